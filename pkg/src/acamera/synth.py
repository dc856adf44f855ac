"""Synthetic RAW renderer, ground-truth ISO / white-balance oracles and dataset generation.

Sensor model (per CFA site, in DN above black)::

    signal = scene_gain * radiance * ratio_c * (iso / 1000) * (shutter_ms / 10)

with green ratio 1 and red/blue ratios from :func:`kelvin_to_channel_ratios`.
Shot noise is Poisson on ``signal / dn_per_electron`` where the conversion
gain scales with ISO; read noise is Gaussian in DN.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .raw import (
    DEFAULT_BLACK_LEVEL,
    CaptureParams,
    RawImage,
    channel_mean,
    mosaic_luma,
    read_raw,
    recompose_cfa,
    split_mosaic,
    write_raw,
)

log = logging.getLogger(__name__)

PROBE_ISO = 1000.0
CCT_RANGE = (2500.0, 8500.0)
ISO_BINS = (100, 200, 400, 800, 1600, 3200, 6400)
TARGET_FRACTION = 0.18
READ_NOISE_DN = 2.0
DN_PER_ELECTRON_AT_PROBE_ISO = 1.0
SENSOR_PEAKS_NM = (600.0, 540.0, 460.0)
SENSOR_SIGMA_NM = 40.0
SCENE_FAMILIES = ("flat", "gradient", "checker", "patches")
MANIFEST_FIELDS = ("path", "gt_iso", "gt_iso_bin", "gt_temp", "gt_delta_r", "gt_delta_b", "cct", "seed")


def default_target_luma(black_level: int = DEFAULT_BLACK_LEVEL, bit_depth: int = 10) -> float:
    return TARGET_FRACTION * ((1 << bit_depth) - 1 - black_level)


# illuminant ------------------------------------------------------------------

def _planck(wl_nm: np.ndarray, t: float) -> np.ndarray:
    h, c, k = 6.62607015e-34, 2.99792458e8, 1.380649e-23
    wl = wl_nm * 1e-9
    return 1.0 / (wl ** 5 * np.expm1(h * c / (wl * k * t)))


def _channel_responses(t: float) -> np.ndarray:
    wl = np.linspace(380.0, 780.0, 401)
    spd = _planck(wl, t)
    sens = np.exp(-0.5 * ((wl[None, :] - np.array(SENSOR_PEAKS_NM)[:, None]) / SENSOR_SIGMA_NM) ** 2)
    return np.trapezoid(spd[None, :] * sens, wl, axis=1)


@lru_cache(maxsize=None)
def _reference_ratios() -> tuple[float, float]:
    r, g, b = _channel_responses(6500.0)
    return float(r / g), float(b / g)


def kelvin_to_channel_ratios(cct: float) -> tuple[float, float]:
    """Green-relative (red, blue) sensor response to a blackbody at ``cct``, unity at 6500 K."""
    lo, hi = CCT_RANGE
    if not lo <= cct <= hi:
        raise ValueError(f"cct {cct} K outside [{lo}, {hi}]")
    if cct == 6500.0:
        return 1.0, 1.0
    r, g, b = _channel_responses(float(cct))
    r0, b0 = _reference_ratios()
    return float((r / g) / r0), float((b / g) / b0)


# scenes -----------------------------------------------------------------------

@dataclass(frozen=True)
class IlluminantSpec:
    cct_kelvin: float = 6500.0

    def __post_init__(self):
        lo, hi = CCT_RANGE
        if not lo <= self.cct_kelvin <= hi:
            raise ValueError(f"cct {self.cct_kelvin} K outside [{lo}, {hi}]")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    family: str = "flat"
    scene_gain: float = 100.0
    seed: int = 0
    level: float = 1.0  # radiance of the flat family; other families draw levels from seed

    def __post_init__(self):
        if self.family not in SCENE_FAMILIES:
            raise ValueError(f"unknown scene family {self.family!r}")
        if not (math.isfinite(self.scene_gain) and self.scene_gain > 0):
            raise ValueError(f"scene_gain must be finite and > 0, got {self.scene_gain}")
        if not 0.0 <= self.level <= 1.0:
            raise ValueError(f"level must lie in [0, 1], got {self.level}")
        if self.width % 2 or self.height % 2:
            raise ValueError(f"invalid dimensions {self.width}x{self.height}: must be even")

    def radiance(self) -> np.ndarray:
        """Per-pixel relative radiance in [0, 1], constant across each 2x2 CFA tile."""
        th, tw = self.height // 2, self.width // 2
        rng = np.random.default_rng(self.seed)
        if self.family == "flat":
            tile = np.full((th, tw), self.level)
        elif self.family == "gradient":
            lo, hi = np.sort(rng.uniform(0.05, 1.0, 2))
            angle = rng.uniform(0, 2 * np.pi)
            yy, xx = np.mgrid[0:th, 0:tw]
            proj = np.cos(angle) * xx / max(tw - 1, 1) + np.sin(angle) * yy / max(th - 1, 1)
            proj = (proj - proj.min()) / max(np.ptp(proj), 1e-12)
            tile = lo + (hi - lo) * proj
        elif self.family == "checker":
            a, b = rng.uniform(0.05, 1.0, 2)
            period = int(rng.integers(1, max(2, min(th, tw) // 2) + 1))
            yy, xx = np.mgrid[0:th, 0:tw]
            tile = np.where(((yy // period) + (xx // period)) % 2 == 0, a, b)
        else:
            cells = int(rng.integers(2, 5))
            levels = rng.uniform(0.02, 1.0, (cells, cells))
            ys = np.minimum(np.arange(th) * cells // th, cells - 1)
            xs = np.minimum(np.arange(tw) * cells // tw, cells - 1)
            tile = levels[np.ix_(ys, xs)]
        tile = np.clip(tile, 0.0, 1.0)
        return np.kron(tile, np.ones((2, 2)))


def expected_signal(
    scene: SceneSpec, illum: IlluminantSpec, capture: CaptureParams, pattern: str = "RGGB"
) -> np.ndarray:
    """Noise-free, unclipped signal mosaic in DN above black."""
    rad = scene.radiance()
    r_ratio, b_ratio = kelvin_to_channel_ratios(illum.cct_kelvin)
    ratio = recompose_cfa(
        tuple(np.full((scene.height // 2, scene.width // 2), v) for v in (r_ratio, 1.0, 1.0, b_ratio)), pattern
    )
    return scene.scene_gain * rad * ratio * (capture.iso / PROBE_ISO) * (capture.shutter_ms / 10.0)


def noise_free_luma(
    scene: SceneSpec,
    illum: IlluminantSpec,
    capture: CaptureParams,
    black_level: int = DEFAULT_BLACK_LEVEL,
    bit_depth: int = 10,
) -> float:
    """:func:`~acamera.raw.mean_luma` of the noise-free, clipped but unquantized render."""
    full = (1 << bit_depth) - 1 - black_level
    sig = np.clip(expected_signal(scene, illum, capture), 0.0, full)
    return mosaic_luma(sig)


def render_raw(
    scene: SceneSpec,
    illum: IlluminantSpec,
    capture: CaptureParams,
    seed: int = 0,
    *,
    noise: bool = True,
    read_noise: float = READ_NOISE_DN,
    black_level: int = DEFAULT_BLACK_LEVEL,
    pattern: str = "RGGB",
) -> RawImage:
    sig = expected_signal(scene, illum, capture, pattern)
    if noise:
        rng = np.random.default_rng(seed)
        gain = DN_PER_ELECTRON_AT_PROBE_ISO * capture.iso / PROBE_ISO
        sig = rng.poisson(sig / gain) * gain
        if read_noise > 0:
            sig = sig + rng.normal(0.0, read_noise, sig.shape)
    dn = np.clip(np.rint(sig + black_level), 0, 1023).astype(np.uint16)
    return RawImage(dn, capture, black_level, pattern)


# oracles ----------------------------------------------------------------------

def oracle_iso(
    scene: SceneSpec,
    illum: IlluminantSpec,
    bins=ISO_BINS,
    target_luma: float | None = None,
    capture: CaptureParams | None = None,
    black_level: int = DEFAULT_BLACK_LEVEL,
) -> tuple[float, int]:
    """Bin whose noise-free render lands closest to ``target_luma``; ties go to the lower ISO."""
    if len(bins) == 0 or any(b1 >= b2 for b1, b2 in zip(bins, bins[1:])):
        raise ValueError(f"bins must be nonempty and strictly ascending, got {bins}")
    target = default_target_luma(black_level) if target_luma is None else target_luma
    capture = capture or CaptureParams()
    best, best_err = 0, math.inf
    for i, b in enumerate(bins):
        err = abs(noise_free_luma(scene, illum, replace(capture, iso=float(b)), black_level) - target)
        # relative slack so analytically exact ties are not decided by rounding
        if err < best_err - 1e-12 * max(target, 1.0):
            best, best_err = i, err
    return float(bins[best]), best


@dataclass(frozen=True)
class WbLabel:
    temp: float
    delta_r: float
    delta_b: float
    r_gain: float
    b_gain: float


def measured_means(raw: RawImage) -> tuple[float, float, float]:
    """(R, G, B) channel means above black; G averages Gr and Gb."""
    r, gr, gb, b = split_mosaic(raw.samples, raw.cfa_pattern)
    g = 0.5 * (channel_mean(gr, raw.black_level) + channel_mean(gb, raw.black_level))
    return channel_mean(r, raw.black_level), g, channel_mean(b, raw.black_level)


def oracle_wb(illum: IlluminantSpec, image: RawImage, refs: tuple[float, float] | None = None) -> WbLabel:
    """Invert the gain formula so the predicted biases reproduce the neutralizing gains."""
    r_meas, g_meas, b_meas = measured_means(image)
    if r_meas <= 0 or b_meas <= 0:
        raise ValueError(f"degenerate scene: R_measured={r_meas}, B_measured={b_meas}")
    r_ref, b_ref = refs if refs is not None else (g_meas, g_meas)
    r_ratio, b_ratio = kelvin_to_channel_ratios(illum.cct_kelvin)
    g_r, g_b = 1.0 / r_ratio, 1.0 / b_ratio
    return WbLabel(float(illum.cct_kelvin), float(g_r * r_meas - r_ref), float(g_b * b_meas - b_ref), g_r, g_b)


# dataset ----------------------------------------------------------------------

@dataclass
class GenConfig:
    count: int = 100
    seed: int = 0
    width: int = 32
    height: int = 32
    bins: tuple = ISO_BINS
    cct_min: float = 2500.0
    cct_max: float = 8500.0
    families: tuple = SCENE_FAMILIES
    iso_opt_min: float = 80.0
    iso_opt_max: float = 8000.0
    shutter_min: float = 1.0
    shutter_max: float = 33.0
    black_level: int = DEFAULT_BLACK_LEVEL
    cfa_pattern: str = "RGGB"
    target_luma: float = field(default_factory=default_target_luma)

    def validate(self) -> None:
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")
        if len(self.bins) < 2 or any(a >= b for a, b in zip(self.bins, self.bins[1:])):
            raise ValueError(f"bins must be strictly ascending with at least 2 entries, got {self.bins}")
        if not CCT_RANGE[0] <= self.cct_min <= self.cct_max <= CCT_RANGE[1]:
            raise ValueError(f"cct range [{self.cct_min}, {self.cct_max}] outside {CCT_RANGE}")
        if not set(self.families) <= set(SCENE_FAMILIES) or not self.families:
            raise ValueError(f"families must be a nonempty subset of {SCENE_FAMILIES}")
        if self.width % 2 or self.height % 2 or self.width < 4 or self.height < 4:
            raise ValueError(f"invalid dimensions {self.width}x{self.height}")
        if not 0 < self.iso_opt_min <= self.iso_opt_max:
            raise ValueError("iso_opt range must be positive and ordered")
        if not 0 < self.shutter_min <= self.shutter_max:
            raise ValueError("shutter range must be positive and ordered")


def _coerce(value: str, like):
    if isinstance(like, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(_coerce(v, like[0]) if like else v for v in items)
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return type(like)(value.strip())


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_kv(cls, kv: dict[str, str]):
    base = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = replace(base, **{k: _coerce(v, getattr(base, k)) for k, v in kv.items()})
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def config_to_kv(cfg) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def load_gen_config(path) -> GenConfig:
    return config_from_kv(GenConfig, parse_kv(Path(path).read_text()))


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class SampleSetup:
    scene: SceneSpec
    illum: IlluminantSpec
    capture: CaptureParams  # probe capture (ISO fixed at 1000)


def setup_from_seed(seed: int, cfg: GenConfig) -> SampleSetup:
    """Scene, illuminant and probe capture drawn deterministically from a per-sample seed."""
    rng = np.random.default_rng(seed)
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    level = float(rng.uniform(0.2, 1.0))
    scene_seed = int(rng.integers(2 ** 31))
    cct = float(rng.uniform(cfg.cct_min, cfg.cct_max))
    iso_opt = float(np.exp(rng.uniform(np.log(cfg.iso_opt_min), np.log(cfg.iso_opt_max))))
    capture = CaptureParams(
        iso=PROBE_ISO,
        shutter_ms=float(rng.uniform(cfg.shutter_min, cfg.shutter_max)),
        aperture_f=float(np.exp(rng.uniform(np.log(1.4), np.log(16.0)))),
        focal_mm=float(rng.uniform(2.0, 50.0)),
    )
    illum = IlluminantSpec(cct)
    unit = SceneSpec(cfg.width, cfg.height, family, 1.0, scene_seed, level)
    r_ratio, b_ratio = kelvin_to_channel_ratios(cct)
    mean_rad = float(unit.radiance().mean())
    per_gain = mean_rad * (r_ratio + 2.0 + b_ratio) / 4.0 * (iso_opt / PROBE_ISO) * (capture.shutter_ms / 10.0)
    scene = replace(unit, scene_gain=cfg.target_luma / per_gain)
    return SampleSetup(scene, illum, capture)


@dataclass
class LabeledSample:
    path: str
    gt_iso: float
    gt_iso_bin: int
    gt_temp: float
    gt_delta_r: float
    gt_delta_b: float
    cct: float
    seed: int

    def row(self) -> list[str]:
        return [self.path, repr(self.gt_iso), str(self.gt_iso_bin), repr(self.gt_temp),
                repr(self.gt_delta_r), repr(self.gt_delta_b), repr(self.cct), str(self.seed)]


def capture_path(probe_path: Path) -> Path:
    """Location of the companion capture rendered at the ground-truth ISO."""
    return probe_path.with_name(probe_path.stem + "_cap.craw")


def label_sample(seed: int, cfg: GenConfig) -> tuple[RawImage, RawImage, LabeledSample]:
    st = setup_from_seed(seed, cfg)
    probe = render_raw(st.scene, st.illum, st.capture, seed=seed ^ 0x5A5A, black_level=cfg.black_level,
                       pattern=cfg.cfa_pattern)
    gt_iso, gt_bin = oracle_iso(st.scene, st.illum, cfg.bins, cfg.target_luma, st.capture, cfg.black_level)
    cap = render_raw(st.scene, st.illum, replace(st.capture, iso=gt_iso), seed=seed ^ 0xA5A5,
                     black_level=cfg.black_level, pattern=cfg.cfa_pattern)
    wb = oracle_wb(st.illum, cap)
    rec = LabeledSample("", gt_iso, gt_bin, wb.temp, wb.delta_r, wb.delta_b, st.illum.cct_kelvin, seed)
    return probe, cap, rec


def generate_dataset(cfg: GenConfig, out_dir) -> list[LabeledSample]:
    """Write probes, companion captures, ``manifest.csv`` and ``dataset.cfg`` under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.cfg").write_text(config_to_kv(cfg))
    if cfg.count:
        (out / "samples").mkdir(exist_ok=True)
    records = []
    for i in range(cfg.count):
        s = sample_seed(cfg.seed, i)
        probe, cap, rec = label_sample(s, cfg)
        rel = Path("samples") / f"{i:06d}.craw"
        write_raw(probe, out / rel)
        write_raw(cap, capture_path(out / rel))
        rec.path = rel.as_posix()
        records.append(rec)
    write_manifest(records, out / "manifest.csv")
    return records


def write_manifest(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow(r.row())


def read_manifest(path) -> list[LabeledSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: bad manifest header {header}")
        out = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(MANIFEST_FIELDS):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
            p, iso, b, temp, dr, db, cct, seed = (c.strip() for c in row)
            out.append(LabeledSample(p, float(iso), int(b), float(temp), float(dr), float(db), float(cct), int(seed)))
        return out


def load_dataset_config(data_dir) -> GenConfig:
    return load_gen_config(Path(data_dir) / "dataset.cfg")


def verify_dataset(data_dir) -> list[str]:
    """Re-run both oracles on every manifest row; returns mismatch descriptions."""
    data_dir = Path(data_dir)
    cfg = load_dataset_config(data_dir)
    problems = []
    for rec in read_manifest(data_dir / "manifest.csv"):
        st = setup_from_seed(rec.seed, cfg)
        iso, b = oracle_iso(st.scene, st.illum, cfg.bins, cfg.target_luma, st.capture, cfg.black_level)
        if iso != rec.gt_iso or b != rec.gt_iso_bin or cfg.bins[b] != rec.gt_iso:
            problems.append(f"{rec.path}: iso label {rec.gt_iso}/{rec.gt_iso_bin} != oracle {iso}/{b}")
        probe = read_raw(data_dir / rec.path)
        if probe.capture.iso != PROBE_ISO:
            problems.append(f"{rec.path}: probe captured at ISO {probe.capture.iso}")
        wb = oracle_wb(st.illum, read_raw(capture_path(data_dir / rec.path)))
        if (wb.temp, wb.delta_r, wb.delta_b) != (rec.gt_temp, rec.gt_delta_r, rec.gt_delta_b):
            problems.append(f"{rec.path}: wb label mismatch")
    return problems
