"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the layer set the ACamera networks need is provided. Shapes are explicit;
the only broadcasting is bias addition in :func:`conv2d` and :func:`linear`.
Calling :meth:`Tensor.backward` twice without :meth:`Tensor.zero_grad`
accumulates into ``grad``.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_relu_recorder: list[np.ndarray] | None = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic used by losses; shapes must match exactly or the other side is a scalar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    track = any(_needs_grad(p) for p in parents)
    out = Tensor(data, _parents=parents if track else (), op=op)
    if track:
        out._backward = backward
    return out


@contextmanager
def record_relu_masks():
    """Collect the activation mask of every relu evaluated inside the block."""
    global _relu_recorder
    prev = _relu_recorder
    _relu_recorder = []
    try:
        yield _relu_recorder
    finally:
        _relu_recorder = prev


# elementwise ---------------------------------------------------------------

def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape and y.size != 1 and x.size != 1:
        raise ValueError(f"add shape mismatch: {x.shape} vs {y.shape}")

    def backward(g):
        gx = g if x.shape == g.shape else np.full(x.shape, g.sum())
        gy = g if y.shape == g.shape else np.full(y.shape, g.sum())
        return gx, gy

    return _make(x.data + y.data, (x, y), backward, "add")


def residual_add(x: Tensor, fx: Tensor) -> Tensor:
    if x.shape != fx.shape:
        raise ValueError(f"residual_add shape mismatch: {x.shape} vs {fx.shape}")
    return add(x, fx)


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape and y.size != 1 and x.size != 1:
        raise ValueError(f"mul shape mismatch: {x.shape} vs {y.shape}")

    def backward(g):
        gx = g * y.data
        gy = g * x.data
        if gx.shape != x.shape:
            gx = np.full(x.shape, gx.sum())
        if gy.shape != y.shape:
            gy = np.full(y.shape, gy.sum())
        return gx, gy

    return _make(x.data * y.data, (x, y), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_recorder is not None:
        _relu_recorder.append(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where the floor is active."""
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    active = x.data > floor if floor > 0 else np.ones_like(x.data, dtype=bool)
    return _make(np.log(clipped), (x,), lambda g: (np.where(active, g / clipped, 0.0),), "log")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    a = np.abs(x.data)
    small = a < beta
    out = np.where(small, 0.5 * x.data * x.data / beta, a - 0.5 * beta)
    return _make(out, (x,), lambda g: (g * np.where(small, x.data / beta, np.sign(x.data)),), "smooth_l1")


def tsum(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


def select(x: Tensor, index) -> Tensor:
    """Basic-index slice ``x[index]`` with a scatter backward."""
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(np.array(x.data[index]), (x,), backward, "select")


# layers ----------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # cols: (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # (N, Ho, Wo, O)
        gw = gb = gx = None
        if _needs_grad(weight):
            gw = (gt.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(weight.shape)
        if bias is not None and _needs_grad(bias):
            gb = g.sum(axis=(0, 2, 3))
        if _needs_grad(x):
            gcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def avg_pool(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"avg_pool window {k} does not tile input {x.shape}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, (x,), backward, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x`` (N, F_in) times ``weight.T`` where ``weight`` is (F_out, F_in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    nd = xs[0].data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"concat axis {axis} out of range for {nd}-D inputs")
    ax = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or any(a != b for d, (a, b) in enumerate(zip(t.shape, xs[0].shape)) if d != ax):
            raise ValueError(f"concat shape mismatch: {xs[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), backward, "concat")



# finite-difference checking --------------------------------------------------------

class GradCheckReport:
    def __init__(self, tol: float):
        self.tol = tol
        self.entries: list[tuple[int, int, float, float, float]] = []
        self.skipped = 0

    @property
    def max_rel_error(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.entries) and self.max_rel_error < self.tol

    def __repr__(self) -> str:
        return (f"GradCheckReport(checked={len(self.entries)}, skipped={self.skipped}, "
                f"max_rel_error={self.max_rel_error:.3e}, tol={self.tol:g}, passed={self.passed})")


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_params: int = 200,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backward gradients of ``f()`` with central differences.

    Up to ``max_params`` scalar entries are sampled across ``params``. An entry
    whose perturbation flips any relu mask sits on a kink and is skipped.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.zero_grad()
    with record_relu_masks() as base_masks:
        loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(max_params, total), replace=False) if total else []
    offsets = np.cumsum(np.concatenate([[0], sizes]))
    report = GradCheckReport(tol)

    def masks_equal(masks):
        return len(masks) == len(base_masks) and all(np.array_equal(a, b) for a, b in zip(masks, base_masks))

    for flat in sorted(int(i) for i in picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = flat - offsets[k]
        view = params[k].data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        with record_relu_masks() as m_plus:
            f_plus = float(f().data)
        view[idx] = orig - h
        with record_relu_masks() as m_minus:
            f_minus = float(f().data)
        view[idx] = orig
        if not (masks_equal(m_plus) and masks_equal(m_minus)):
            report.skipped += 1
            continue
        num = (f_plus - f_minus) / (2 * h)
        a = float(analytic[k].reshape(-1)[idx])
        rel = abs(a - num) / max(abs(a), abs(num), floor)
        report.entries.append((k, int(idx), a, num, rel))
    return report
