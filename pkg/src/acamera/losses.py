"""Distribution-enhanced ISO loss, color regression loss and the weighted joint objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12
WEIGHT_FLOOR = 0.1
TEMP_SCALE = 6000.0
DELTA_SCALE = 50.0
MOD_REG = 1e-4


@dataclass(frozen=True)
class DelWeights:
    weights: np.ndarray
    gt_iso: float
    delta: float


def del_weights(gt_iso: float, bins, delta: float = 1.0, log_domain: bool = True) -> DelWeights:
    """``w_i = max(0.1, 1 - |y - b_i| / delta)``.

    In the default log domain distances are measured in stops (log2 ISO), so
    ``delta = 1`` means one stop. With ``log_domain=False`` distance and
    ``delta`` are in ISO units.
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    b = np.asarray(bins, dtype=np.float64)
    if log_domain:
        dist = np.abs(np.log2(gt_iso) - np.log2(b))
    else:
        dist = np.abs(gt_iso - b)
    return DelWeights(np.maximum(WEIGHT_FLOOR, 1.0 - dist / delta), float(gt_iso), float(delta))


def del_weight_matrix(gt_isos, bins, delta: float = 1.0, log_domain: bool = True) -> np.ndarray:
    return np.stack([del_weights(g, bins, delta, log_domain).weights for g in gt_isos])


def del_loss(probs: Tensor, weights) -> Tensor:
    """``-sum_i w_i log(p_i)`` with ``p`` floored at 1e-12, summed over the batch.

    ``probs`` is (n,) or (N, n); ``weights`` matches it or is a :class:`DelWeights`.
    """
    w = weights.weights if isinstance(weights, DelWeights) else np.asarray(weights, dtype=np.float64)
    probs = ad.as_tensor(probs)
    if w.shape != probs.shape:
        raise ValueError(f"weights shape {w.shape} does not match probs {probs.shape}")
    return -ad.tsum(ad.mul(ad.log(probs, PROB_FLOOR), Tensor(w)))


def del_optimum(weights) -> tuple[np.ndarray, float]:
    """Closed-form minimizer ``w / sum(w)`` over the simplex and the loss there."""
    w = weights.weights if isinstance(weights, DelWeights) else np.asarray(weights, dtype=np.float64)
    p = w / w.sum()
    return p, float(-(w * np.log(p)).sum())


def color_loss(temp: Tensor, delta_r: Tensor, delta_b: Tensor, gt_temp, gt_delta_r, gt_delta_b) -> Tensor:
    """Smooth-L1 on normalized residuals, summed over the three outputs and the batch."""
    def term(pred, gt, scale):
        gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
        return ad.tsum(ad.smooth_l1(ad.mul(ad.add(pred, Tensor(-gt)), 1.0 / scale)))

    return term(temp, gt_temp, TEMP_SCALE) + term(delta_r, gt_delta_r, DELTA_SCALE) + term(delta_b, gt_delta_b, DELTA_SCALE)


def modulation_loss(embedding_params, weight: float = MOD_REG) -> Tensor:
    """Weight-decay style penalty on the modulation embedding."""
    total = None
    for p in embedding_params:
        t = ad.tsum(ad.square(p))
        total = t if total is None else total + t
    return ad.mul(total, weight) if total is not None else Tensor(0.0)


@dataclass
class LossWeights:
    lambdas: np.ndarray = field(default_factory=lambda: np.ones(3))
    dynamic: bool = False
    momentum: float = 0.9
    _running: np.ndarray | None = None

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if self.lambdas.shape != (3,) or not np.all(np.isfinite(self.lambdas)) or np.any(self.lambdas < 0):
            raise ValueError(f"loss weights must be three finite nonnegative values, got {self.lambdas}")

    def observe(self, components) -> None:
        c = np.abs(np.asarray(components, dtype=np.float64))
        self._running = c if self._running is None else self.momentum * self._running + (1 - self.momentum) * c

    def update(self) -> None:
        """Dynamic mode: weights inversely proportional to running magnitudes, summing to 3."""
        if not self.dynamic or self._running is None:
            return
        inv = 1.0 / np.maximum(self._running, 1e-12)
        self.lambdas = 3.0 * inv / inv.sum()


def total_loss(l_exp, l_color, l_mod, weights: LossWeights | tuple = (1.0, 1.0, 1.0)):
    lam = weights.lambdas if isinstance(weights, LossWeights) else np.asarray(weights, dtype=np.float64)
    parts = (l_exp, l_color, l_mod)
    if all(not isinstance(p, Tensor) for p in parts):
        vals = [float(p) for p in parts]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"loss components must be finite, got {vals}")
        return float(np.dot(lam, vals))
    out = None
    for lam_k, part in zip(lam, parts):
        term = ad.mul(ad.as_tensor(part), float(lam_k))
        out = term if out is None else out + term
    return out
