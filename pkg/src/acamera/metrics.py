"""Colorimetry, luminance deviation and the two-capture evaluation protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nets import (
    ACameraNet,
    ColorPrediction,
    color_forward,
    compute_gains,
    expected_iso,
    exposure_forward,
    modulation_from_capture,
)
from .raw import RawImage, mean_luma, read_raw
from .synth import (
    GenConfig,
    kelvin_to_channel_ratios,
    load_dataset_config,
    measured_means,
    read_manifest,
    render_raw,
    setup_from_seed,
)

log = logging.getLogger(__name__)

METRICS_VERSION = "deltaE=CIE76;luma_dev=mean|luma-target|*255/full_scale;patch_gray=0.18"
D65_WHITE = (0.95047, 1.0, 1.08883)
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_EPS = 216 / 24389
_KAPPA = 24389 / 27
PATCH_GRAY = 0.18


@dataclass(frozen=True)
class LabColor:
    L: float
    a: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.L, self.a, self.b])


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(np.maximum(c, 0.0), 1 / 2.4) - 0.055)


def srgb_to_lab(rgb) -> LabColor:
    rgb = np.asarray(rgb, dtype=np.float64)
    if np.any(rgb < 0) or np.any(rgb > 1):
        log.warning("srgb_to_lab: clamping %s to [0, 1]", rgb)
        rgb = np.clip(rgb, 0.0, 1.0)
    # white point from the same matrix so (1, 1, 1) lands on L=100, a=b=0 exactly
    xyz = _RGB_TO_XYZ @ srgb_to_linear(rgb)
    white = _RGB_TO_XYZ.sum(axis=1)
    t = xyz / white
    f = np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16) / 116)
    return LabColor(float(116 * f[1] - 16), float(500 * (f[0] - f[1])), float(200 * (f[1] - f[2])))


def lab_to_srgb(lab: LabColor) -> np.ndarray:
    fy = (lab.L + 16) / 116
    fx = fy + lab.a / 500
    fz = fy - lab.b / 200
    f = np.array([fx, fy, fz])
    t = np.where(f ** 3 > _EPS, f ** 3, (116 * f - 16) / _KAPPA)
    xyz = t * _RGB_TO_XYZ.sum(axis=1)
    return linear_to_srgb(_XYZ_TO_RGB @ xyz)


def delta_e76(x: LabColor, y: LabColor) -> float:
    return float(np.linalg.norm(x.as_array() - y.as_array()))


def gray_patch(means: tuple[float, float, float], r_gain: float, b_gain: float) -> np.ndarray:
    """sRGB-encoded patch of white-balanced channel means, green pinned at mid-gray."""
    r, g, b = means
    if g <= 0:
        raise ValueError("zero green mean")
    lin = PATCH_GRAY * np.array([r * r_gain / g, 1.0, b * b_gain / g])
    return linear_to_srgb(np.clip(lin, 0.0, 1.0))


def scene_delta_e(raw: RawImage, gains: tuple[float, float], gt_gains: tuple[float, float]) -> float:
    means = measured_means(raw)
    return delta_e76(srgb_to_lab(gray_patch(means, *gains)), srgb_to_lab(gray_patch(means, *gt_gains)))


def to_8bit(dn: float, full_scale: float) -> float:
    return dn * 255.0 / full_scale


def luminance_deviation(lumas, target_luma: float, full_scale: float = 959.0) -> float:
    """Mean ``|luma - target|`` over images, on an 8-bit-equivalent scale."""
    lumas = np.asarray(list(lumas), dtype=np.float64)
    if lumas.size == 0:
        raise ValueError("luminance_deviation of an empty set")
    return float(to_8bit(np.abs(lumas - target_luma).mean(), full_scale))


# predictors ------------------------------------------------------------------------

class ModelPredictor:
    name = "model"

    def __init__(self, model: ACameraNet):
        self.model = model

    def iso(self, probe, rec):
        dist = exposure_forward(self.model, probe)
        return expected_iso(dist), dist.top_bin

    def gains(self, capture: RawImage, rec, iso: float):
        pred = color_forward(self.model, capture, modulation_from_capture(capture.capture, iso))
        r, g, b = measured_means(capture)
        return compute_gains(pred, r, b, g, g), pred.temp


class OraclePredictor:
    """Feeds the dataset labels back as predictions."""
    name = "oracle"

    def iso(self, probe, rec):
        return rec.gt_iso, rec.gt_iso_bin

    def gains(self, capture, rec, iso):
        r, g, b = measured_means(capture)
        pred = ColorPrediction(rec.gt_temp, rec.gt_delta_r, rec.gt_delta_b)
        return compute_gains(pred, r, b, g, g), rec.gt_temp


class ConstantPredictor:
    """Fixed ISO and fixed gains regardless of the scene."""
    name = "constant"

    def __init__(self, bins, iso: float = 800.0, gains=(1.0, 1.0), temp: float = 6500.0):
        self.bins = tuple(bins)
        self.fixed_iso = iso
        self.fixed_gains = tuple(gains)
        self.temp = temp

    def iso(self, probe, rec):
        return self.fixed_iso, int(np.argmin(np.abs(np.log2(np.asarray(self.bins, float) / self.fixed_iso))))

    def gains(self, capture, rec, iso):
        return self.fixed_gains, self.temp


# evaluation ----------------------------------------------------------------------

@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)
    target_luma: float = 0.0
    full_scale: float = 959.0
    predictor: str = ""

    AGG_KEYS = ("iso_mae", "iso_mae_stops", "top1", "lum_dev", "delta_e")

    def aggregate(self, records=None) -> dict:
        recs = self.records if records is None else records
        if not recs:
            return {"count": 0}
        col = lambda k: np.array([r[k] for r in recs], dtype=np.float64)
        return {
            "count": len(recs),
            "iso_mae": float(np.abs(col("pred_iso") - col("gt_iso")).mean()),
            "iso_mae_stops": float(np.abs(np.log2(col("pred_iso")) - np.log2(col("gt_iso"))).mean()),
            "top1": float((col("pred_bin") == col("gt_bin")).mean()),
            "lum_dev": luminance_deviation(col("luma"), self.target_luma, self.full_scale),
            "delta_e": float(col("delta_e").mean()),
        }

    def by_scene(self) -> dict[str, dict]:
        groups: dict[str, list] = {}
        for r in self.records:
            groups.setdefault(r["family"], []).append(r)
        return {k: self.aggregate(v) for k, v in sorted(groups.items())}

    def to_lines(self) -> list[str]:
        lines = [f"# version={METRICS_VERSION} predictor={self.predictor} target_luma={self.target_luma!r}"]
        for r in self.records:
            lines.append("sample " + " ".join(f"{k}={v}" for k, v in r.items()))
        for scene, agg in self.by_scene().items():
            lines.append(f"scene name={scene} " + " ".join(f"{k}={v!r}" for k, v in agg.items()))
        lines.append("aggregate " + " ".join(f"{k}={v!r}" for k, v in self.aggregate().items()))
        return lines

    def summary_table(self) -> str:
        rows = [("scene", "count", "iso_mae", "stops", "top1", "lum_dev", "dE")]
        for name, a in list(self.by_scene().items()) + [("ALL", self.aggregate())]:
            if a["count"]:
                rows.append((name, str(a["count"]), f"{a['iso_mae']:.1f}", f"{a['iso_mae_stops']:.3f}",
                             f"{a['top1']:.3f}", f"{a['lum_dev']:.2f}", f"{a['delta_e']:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    def write_plot_data(self, out_dir) -> list[Path]:
        """(x, y) series per figure: ISO per scene, luminance deviation per scene, delta E per scene."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scenes = self.by_scene()
        files = []
        series = {
            "iso_by_scene.dat": [(r["index"], r["pred_iso"], r["gt_iso"]) for r in self.records],
            "lum_dev_by_scene.dat": [(i, a["lum_dev"]) for i, a in enumerate(scenes.values())],
            "delta_e_by_scene.dat": [(i, a["delta_e"]) for i, a in enumerate(scenes.values())],
        }
        headers = {"iso_by_scene.dat": "# index pred_iso gt_iso",
                   "lum_dev_by_scene.dat": "# scene_index lum_dev  scenes=" + ",".join(scenes),
                   "delta_e_by_scene.dat": "# scene_index delta_e  scenes=" + ",".join(scenes)}
        for name, rows in series.items():
            p = out / name
            p.write_text(headers[name] + "\n" + "\n".join(" ".join(repr(float(v)) for v in row) for row in rows) + "\n")
            files.append(p)
        return files


def evaluate(predictor, data_dir, manifest: str = "manifest.csv", gen_cfg: GenConfig | None = None,
             seed: int = 0) -> EvalReport:
    """Probe -> ISO -> synthetic re-capture at that ISO -> gains -> metrics, per manifest row."""
    data_dir = Path(data_dir)
    cfg = gen_cfg or load_dataset_config(data_dir)
    if isinstance(predictor, ACameraNet):
        predictor = ModelPredictor(predictor)
    model = getattr(predictor, "model", None)
    if model is not None and tuple(model.bins) != tuple(cfg.bins):
        raise ValueError(f"model has {len(model.bins)} bins {model.bins}, dataset has {cfg.bins}")
    full = float((1 << 10) - 1 - cfg.black_level)
    report = EvalReport(target_luma=cfg.target_luma, full_scale=full, predictor=predictor.name)
    for i, rec in enumerate(read_manifest(data_dir / manifest)):
        st = setup_from_seed(rec.seed, cfg)
        probe = read_raw(data_dir / rec.path)
        iso, top = predictor.iso(probe, rec)
        iso = float(np.clip(iso, 1.0, 1e6))
        capture = render_raw(st.scene, st.illum, replace(st.capture, iso=iso),
                             seed=int(np.random.SeedSequence([rec.seed, seed, 7]).generate_state(1)[0]),
                             black_level=cfg.black_level, pattern=cfg.cfa_pattern)
        gains, temp = predictor.gains(capture, rec, iso)
        r_ratio, b_ratio = kelvin_to_channel_ratios(st.illum.cct_kelvin)
        gt_gains = (1.0 / r_ratio, 1.0 / b_ratio)
        report.records.append({
            "index": i,
            "family": st.scene.family,
            "gt_iso": rec.gt_iso,
            "gt_bin": rec.gt_iso_bin,
            "pred_iso": float(capture.capture.iso),
            "pred_bin": int(top),
            "luma": mean_luma(capture),
            "delta_e": scene_delta_e(capture, gains, gt_gains),
            "pred_temp": float(temp),
            "gt_temp": rec.gt_temp,
            "r_gain": float(gains[0]),
            "b_gain": float(gains[1]),
        })
    return report
