"""Independent reference implementations shared by the unit and acceptance tests."""
import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Six nested loops, no vectorization."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, ic, y * stride + i, xx * stride + j] * w[oc, ic, i, j]
                    out[bi, oc, y, xx] = acc
    return out


def simplex_minimize(w, iters=2000, eta=None):
    """Minimize -sum w log p over the probability simplex by exponentiated gradient.

    The multiplicative update keeps every iterate strictly inside the simplex, so
    no projection is needed. The gradient is -w/p; the step is shifted by its max
    before exponentiating, which the renormalization cancels.
    """
    w = np.asarray(w, dtype=np.float64)
    p = np.full(w.size, 1.0 / w.size)
    eta = eta if eta is not None else 0.5 / w.sum()
    for _ in range(iters):
        step = eta * w / p
        p = p * np.exp(step - step.max())
        p /= p.sum()
    return p


def del_weights_oracle(gt_iso, bins, delta=1.0):
    out = []
    for b in bins:
        d = abs(np.log2(gt_iso) - np.log2(b)) / delta
        out.append(max(0.1, 1.0 - d))
    return np.array(out)
