"""Exposure and color networks, parameter-aware modulation and prediction decoding."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .raw import CaptureParams, RawImage, split_mosaic
from .synth import CCT_RANGE, ISO_BINS, PROBE_ISO

log = logging.getLogger(__name__)

# order of the modulation channels and the physical range used to normalize each
MOD_PARAMS = ("shutter_ms", "aperture_f", "focal_mm", "iso")
MOD_RANGES = {"shutter_ms": (0.0, 33.0), "aperture_f": (1.4, 16.0), "focal_mm": (2.0, 50.0), "iso": (100.0, 6400.0)}
MOD_EMBED = 16
TEMP_SPAN = CCT_RANGE[1] - CCT_RANGE[0]
GAIN_CLAMP = (0.25, 8.0)


# prediction containers ------------------------------------------------------------

@dataclass(frozen=True)
class IsoDistribution:
    bins: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if len(self.bins) < 2 or any(a >= b for a, b in zip(self.bins, self.bins[1:])):
            raise ValueError(f"bins must be strictly ascending with n >= 2, got {self.bins}")
        if p.shape != (len(self.bins),):
            raise ValueError(f"probs shape {p.shape} does not match {len(self.bins)} bins")
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def top_bin(self) -> int:
        return int(np.argmax(self.probs))


def expected_iso(dist: IsoDistribution) -> float:
    return float(np.dot(dist.probs, np.asarray(dist.bins, dtype=np.float64)))


@dataclass(frozen=True)
class ColorPrediction:
    temp: float
    delta_r: float
    delta_b: float


def compute_gains(
    pred: ColorPrediction, r_measured: float, b_measured: float, r_ref: float, b_ref: float, clamp: bool = True
) -> tuple[float, float]:
    """White-balance gains ``(ref + delta) / measured`` for red and blue."""
    if r_measured <= 0 or b_measured <= 0:
        raise ValueError(f"degenerate input: R_measured={r_measured}, B_measured={b_measured}")
    r_gain = (r_ref + pred.delta_r) / r_measured
    b_gain = (b_ref + pred.delta_b) / b_measured
    if clamp:
        lo, hi = GAIN_CLAMP
        cr, cb = min(max(r_gain, lo), hi), min(max(b_gain, lo), hi)
        if (cr, cb) != (r_gain, b_gain):
            log.info("gain clamp: (%.4g, %.4g) -> (%.4g, %.4g)", r_gain, b_gain, cr, cb)
        r_gain, b_gain = cr, cb
    return r_gain, b_gain


# modulation -------------------------------------------------------------------

def modulate_param(a: float, lo: float, hi: float) -> float:
    """Residual fusion of a raw capture value with its [0, 1] normalized form."""
    if hi <= lo:
        raise ValueError(f"modulation range needs hi > lo, got [{lo}, {hi}]")
    a_norm = min(max((a - lo) / (hi - lo), 0.0), 1.0)
    return a_norm + a


@dataclass(frozen=True)
class ModulationVector:
    values: np.ndarray  # (..., 4) fused values
    mask: np.ndarray  # (..., 4) True where dropped

    def effective(self) -> np.ndarray:
        return np.where(self.mask, 0.0, self.values)


def modulation_from_capture(capture: CaptureParams, iso: float | None = None) -> ModulationVector:
    raw = {"shutter_ms": capture.shutter_ms, "aperture_f": capture.aperture_f, "focal_mm": capture.focal_mm,
           "iso": capture.iso if iso is None else iso}
    vals = np.array([modulate_param(raw[k], *MOD_RANGES[k]) for k in MOD_PARAMS])
    return ModulationVector(vals, np.zeros(len(MOD_PARAMS), dtype=bool))


def stack_modulations(mods) -> ModulationVector:
    return ModulationVector(np.stack([m.values for m in mods]), np.stack([m.mask for m in mods]))


def channel_drop(mods: ModulationVector, p_drop: float, rng: np.random.Generator) -> ModulationVector:
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    if p_drop == 0.0:
        return mods
    drop = rng.random(mods.values.shape) < p_drop
    return ModulationVector(mods.values, mods.mask | drop)


# layers -----------------------------------------------------------------------

class Layer:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Layer):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Conv2d(Layer):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None):
        self.weight = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Layer):
    def __init__(self, fin, fout, rng):
        self.weight = _kaiming_uniform(rng, (fout, fin), fin)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class ResBlock(Layer):
    def __init__(self, cin, cout, rng, stride=1):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.proj = Conv2d(cin, cout, 1, rng, stride, 0) if (cin != cout or stride != 1) else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(ad.relu(self.conv1(x)))
        short = x if self.proj is None else self.proj(x)
        return ad.relu(ad.residual_add(short, h))


class ParamEmbedding(Layer):
    """Linear embedding of the fused capture parameters (4 -> 16).

    Fused values keep their physical magnitude (ISO reaches ~6400), so each
    channel is divided by a fixed ``hi + 1`` before the linear map.
    """

    def __init__(self, rng):
        self.fc = Linear(len(MOD_PARAMS), MOD_EMBED, rng)
        self.scale = np.array([1.0 / (MOD_RANGES[k][1] + 1.0) for k in MOD_PARAMS])

    def __call__(self, mods: ModulationVector) -> Tensor:
        v = np.atleast_2d(mods.effective()) * self.scale
        return ad.relu(self.fc(Tensor(v)))


class ExposureNet(Layer):
    def __init__(self, n_bins: int, rng, widths=(32, 64, 64, 128)):
        self.stem = Conv2d(4, widths[0], 3, rng)
        chans = (widths[0],) + tuple(widths)
        self.blocks = [ResBlock(chans[i], chans[i + 1], rng, stride=2) for i in range(len(widths))]
        self.head = Linear(widths[-1] + MOD_EMBED, n_bins, rng)

    def logits(self, x: Tensor, emb: Tensor) -> Tensor:
        h = ad.relu(self.stem(x))
        for blk in self.blocks:
            h = blk(h)
        return self.head(ad.concat([ad.global_avg_pool(h), emb], axis=1))

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        return ad.softmax(self.logits(x, emb), axis=1)


class ColorBranch(Layer):
    def __init__(self, rng, stem=16, width=32):
        self.stem = Conv2d(1, stem, 3, rng)
        self.blocks = [ResBlock(stem, width, rng, stride=2), ResBlock(width, width, rng, stride=2)]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.stem(x))
        for blk in self.blocks:
            h = blk(h)
        return ad.global_avg_pool(h)


class ColorNet(Layer):
    def __init__(self, rng, width=32):
        self.branches = [ColorBranch(rng, width=width) for _ in range(4)]
        self.fc1 = Linear(4 * width + MOD_EMBED, 128, rng)
        self.fc2 = Linear(128, 64, rng)
        self.temp_head = Linear(64, 1, rng)
        self.dr_head = Linear(64, 1, rng)
        self.db_head = Linear(64, 1, rng)

    def features(self, x: Tensor) -> list[Tensor]:
        return [br(ad.select(x, (slice(None), slice(c, c + 1)))) for c, br in enumerate(self.branches)]

    def __call__(self, x: Tensor, emb: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (temp in K, delta_r, delta_b), each (N, 1)."""
        h = ad.concat(self.features(x) + [emb], axis=1)
        h = ad.relu(self.fc2(ad.relu(self.fc1(h))))
        temp = ad.sigmoid(self.temp_head(h)) * TEMP_SPAN + CCT_RANGE[0]
        return temp, self.dr_head(h), self.db_head(h)


class ACameraNet(Layer):
    """Exposure net, color net and the shared modulation embedding."""

    def __init__(self, bins=ISO_BINS, input_size: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.bins = tuple(bins)
        self.input_size = int(input_size)
        self.modulation = ParamEmbedding(rng)
        self.exposure = ExposureNet(len(self.bins), rng)
        self.color = ColorNet(rng)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ValueError(f"state mismatch: missing {sorted(set(own) - set(state))}, "
                             f"unexpected {sorted(set(state) - set(own))}")
        for name, p in own.items():
            if p.shape != np.shape(state[name]):
                raise ValueError(f"{name}: shape {np.shape(state[name])} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def check_input(self, x: np.ndarray) -> None:
        s = self.input_size
        if x.ndim != 4 or x.shape[1:] != (4, s, s):
            raise ValueError(f"wrong input size: expected (N, 4, {s}, {s}), got {x.shape}")

    def exposure_probs(self, x: np.ndarray, mods: ModulationVector) -> Tensor:
        self.check_input(x)
        return self.exposure(Tensor(x), self.modulation(mods))

    def color_outputs(self, x: np.ndarray, mods: ModulationVector):
        self.check_input(x)
        return self.color(Tensor(x), self.modulation(mods))


# input preparation -----------------------------------------------------------------

def raw_to_input(raw: RawImage, input_size: int) -> np.ndarray:
    """Four black-subtracted CFA planes scaled to [0, 1] and area-averaged to ``input_size``."""
    planes = np.stack(split_mosaic(raw.samples, raw.cfa_pattern)).astype(np.float64)
    planes = np.maximum(planes - raw.black_level, 0.0) / (raw.white_level - raw.black_level)
    _, h, w = planes.shape
    if h % input_size or w % input_size:
        raise ValueError(f"wrong input size: planes {h}x{w} cannot be area-averaged to {input_size}")
    fy, fx = h // input_size, w // input_size
    return planes.reshape(4, input_size, fy, input_size, fx).mean(axis=(2, 4))


def exposure_forward(model: ACameraNet, probe: RawImage, mods: ModulationVector | None = None) -> IsoDistribution:
    if probe.capture.iso != PROBE_ISO:
        log.warning("probe captured at ISO %g, expected %g", probe.capture.iso, PROBE_ISO)
    mods = mods or modulation_from_capture(probe.capture)
    probs = model.exposure_probs(raw_to_input(probe, model.input_size)[None], mods)
    p = probs.data[0]
    return IsoDistribution(model.bins, p / p.sum())


def color_forward(model: ACameraNet, capture_raw: RawImage, mods: ModulationVector | None = None) -> ColorPrediction:
    mods = mods or modulation_from_capture(capture_raw.capture)
    temp, dr, db = model.color_outputs(raw_to_input(capture_raw, model.input_size)[None], mods)
    return ColorPrediction(float(temp.data[0, 0]), float(dr.data[0, 0]), float(db.data[0, 0]))
