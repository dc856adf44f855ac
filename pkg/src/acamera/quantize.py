"""Symmetric per-tensor INT8 weight quantization (quantize-dequantize simulation)."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .nets import ACameraNet, ModulationVector
from .training import decode_checkpoint, encode_checkpoint, meta_entries, split_meta


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8
    scale: float
    shape: tuple

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64).reshape(self.shape) * self.scale


def quantize_tensor(t) -> QuantizedTensor:
    """``scale = max|t| / 127``, round half to even; an all-zero tensor gets scale 1."""
    a = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot quantize non-finite values")
    peak = float(np.abs(a).max()) if a.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(a / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(q, scale, a.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.dequantize()


def is_quantized_name(name: str) -> bool:
    return name.endswith(".weight")


def quantize_model(model: ACameraNet) -> tuple[ACameraNet, dict[str, QuantizedTensor]]:
    """Copy of ``model`` whose weight tensors are replaced by their INT8 round trip; biases stay float."""
    qmodel = copy.deepcopy(model)
    table = {}
    for name, p in qmodel.named_parameters():
        if is_quantized_name(name):
            q = quantize_tensor(p)
            table[name] = q
            p.data = q.dequantize()
    return qmodel, table


def quantized_forward(model: ACameraNet, x: np.ndarray, mods: ModulationVector):
    """Float-activation forward of both networks with INT8 round-tripped weights.

    Quantizes on every call; for repeated use quantize once with
    :func:`quantize_model` and run the returned model.
    """
    qmodel, _ = quantize_model(model)
    probs = qmodel.exposure_probs(x, mods).data
    temp, dr, db = qmodel.color_outputs(x, mods)
    return probs, (temp.data, dr.data, db.data)


def save_quantized_checkpoint(model: ACameraNet, table: dict[str, QuantizedTensor], src_ckpt, path) -> None:
    """Same container as float checkpoints, weights tagged int8 with a per-tensor scale."""
    config_hash, epoch, tensors, _ = decode_checkpoint(Path(src_ckpt).read_bytes())
    _, cfg, _ = split_meta(tensors)
    entries = meta_entries(model, cfg)
    for name, p in model.named_parameters():
        if name in table:
            q = table[name]
            entries.append((name, q.values, q.scale))
        else:
            entries.append((name, p.data))
    Path(path).write_bytes(encode_checkpoint(config_hash, epoch, entries, []))


def drift_report(float_report, quant_report) -> dict:
    """Per-sample expected-ISO drift (in stops) and mean delta E degradation."""
    f_iso = np.array([r["pred_iso"] for r in float_report.records])
    q_iso = np.array([r["pred_iso"] for r in quant_report.records])
    if f_iso.shape != q_iso.shape:
        raise ValueError("reports cover different sample sets")
    stops = np.abs(np.log2(q_iso) - np.log2(f_iso))
    de_f = float(np.mean([r["delta_e"] for r in float_report.records]))
    de_q = float(np.mean([r["delta_e"] for r in quant_report.records]))
    return {
        "within_one_bin": float((stops <= 1.0).mean()),
        "max_iso_drift_stops": float(stops.max()),
        "delta_e_float": de_f,
        "delta_e_quantized": de_q,
        "delta_e_degradation": de_q - de_f,
    }
