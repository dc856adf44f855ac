"""Adam(W) optimization, cosine learning-rate decay, two-stage training and checkpoints."""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossWeights, color_loss, del_loss, del_weight_matrix, modulation_loss, total_loss
from .nets import ACameraNet, ModulationVector, channel_drop, modulation_from_capture, raw_to_input, stack_modulations
from .raw import read_raw
from .synth import ISO_BINS, capture_path, config_from_kv, config_to_kv, parse_kv, read_manifest

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ACKP"
CKPT_VERSION = 1
TAG_F64, TAG_I8 = 0, 1


class CheckpointError(ValueError):
    pass


# optimizer ---------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    param_steps: np.ndarray  # per-parameter update counts, used for bias correction
    step: int = 0  # batches processed


class Adam:
    """Adam with bias correction; ``decoupled=True`` applies AdamW-style weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decoupled=True):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.state = OptimizerState(
            [np.zeros_like(p.data) for p in self.params],
            [np.zeros_like(p.data) for p in self.params],
            np.zeros(len(self.params), dtype=np.int64),
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, grads=None, lr: float | None = None) -> None:
        """Apply one update. Parameters with no gradient are left untouched."""
        lr = self.lr if lr is None else lr
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        st = self.state
        st.step += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            st.param_steps[i] += 1
            t = st.param_steps[i]
            st.m[i] = self.beta1 * st.m[i] + (1 - self.beta1) * g
            st.v[i] = self.beta2 * st.v[i] + (1 - self.beta2) * (g * g)
            m_hat = st.m[i] / (1 - self.beta1 ** t)
            v_hat = st.v[i] / (1 - self.beta2 ** t)
            if self.weight_decay and self.decoupled:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: list[Tensor], grads, state: Adam, lr: float | None = None) -> None:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("parameters do not match the optimizer state")
    state.step(grads, lr)


# configuration -----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    stage1_epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    lr_min: float = 1e-6
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    seed: int = 0
    p_drop: float = 0.2
    lambdas: tuple = (1.0, 1.0, 1.0)
    dynamic_lambda: bool = False
    input_size: int = 128
    del_delta: float = 1.0
    del_log_domain: bool = True
    bins: tuple = ISO_BINS

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.stage1_epochs <= self.epochs:
            raise ValueError(f"stage1_epochs must lie in [0, epochs], got {self.stage1_epochs}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {self.p_drop}")
        if len(self.lambdas) != 3 or any(l < 0 for l in self.lambdas):
            raise ValueError(f"lambdas must be three nonnegative values, got {self.lambdas}")

    def digest(self) -> bytes:
        return hashlib.sha256(config_to_kv(self).encode()).digest()


def load_train_config(path) -> TrainConfig:
    return config_from_kv(TrainConfig, parse_kv(Path(path).read_text()))


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr`` at epoch 0 to ``lr_min`` at ``epochs``."""
    e = min(max(epoch, 0.0), cfg.epochs)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * e / cfg.epochs))


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))


# data ------------------------------------------------------------------------------

@dataclass
class TrainingSet:
    probe: np.ndarray  # (N, 4, S, S)
    capture: np.ndarray  # (N, 4, S, S) companion capture at the ground-truth ISO
    probe_mods: ModulationVector
    capture_mods: ModulationVector
    gt_iso: np.ndarray
    gt_bin: np.ndarray
    gt_temp: np.ndarray
    gt_delta_r: np.ndarray
    gt_delta_b: np.ndarray

    def __len__(self) -> int:
        return len(self.gt_iso)

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx, dtype=np.intp)
        return TrainingSet(
            self.probe[idx], self.capture[idx],
            ModulationVector(self.probe_mods.values[idx], self.probe_mods.mask[idx]),
            ModulationVector(self.capture_mods.values[idx], self.capture_mods.mask[idx]),
            self.gt_iso[idx], self.gt_bin[idx], self.gt_temp[idx], self.gt_delta_r[idx], self.gt_delta_b[idx],
        )


def load_training_set(data_dir, input_size: int, manifest: str = "manifest.csv") -> TrainingSet:
    data_dir = Path(data_dir)
    mpath = data_dir / manifest
    if not mpath.is_file():
        raise FileNotFoundError(f"manifest not found: {mpath}")
    recs = read_manifest(mpath)
    if not recs:
        raise ValueError(f"empty dataset: {mpath}")
    probes, caps, pm, cm = [], [], [], []
    for r in recs:
        probe = read_raw(data_dir / r.path)
        cap = read_raw(capture_path(data_dir / r.path))
        probes.append(raw_to_input(probe, input_size))
        caps.append(raw_to_input(cap, input_size))
        pm.append(modulation_from_capture(probe.capture))
        cm.append(modulation_from_capture(cap.capture))
    col = lambda name: np.array([getattr(r, name) for r in recs], dtype=np.float64)
    return TrainingSet(
        np.stack(probes), np.stack(caps), stack_modulations(pm), stack_modulations(cm),
        col("gt_iso"), col("gt_iso_bin").astype(np.int64), col("gt_temp"), col("gt_delta_r"), col("gt_delta_b"),
    )


# training loop ---------------------------------------------------------------------

@dataclass
class Trainer:
    model: ACameraNet
    cfg: TrainConfig
    optimizer: Adam
    loss_weights: LossWeights
    epoch: int = 0  # epochs completed
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TrainConfig, model: ACameraNet | None = None) -> "Trainer":
        cfg.validate()
        model = model or ACameraNet(cfg.bins, cfg.input_size, seed=cfg.seed)
        if tuple(model.bins) != tuple(cfg.bins):
            raise ValueError(f"model bins {model.bins} != config bins {cfg.bins}")
        opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled=cfg.optimizer == "adamw")
        return cls(model, cfg, opt, LossWeights(np.array(cfg.lambdas, dtype=np.float64), cfg.dynamic_lambda))

    def stage_of(self, epoch: int) -> int:
        return 1 if epoch < self.cfg.stage1_epochs else 2

    def _batch_loss(self, data: TrainingSet, idx: np.ndarray, stage: int, rng: np.random.Generator):
        cfg, m = self.cfg, self.model
        w = del_weight_matrix(data.gt_iso[idx], cfg.bins, cfg.del_delta, cfg.del_log_domain)
        pmods = channel_drop(ModulationVector(data.probe_mods.values[idx], data.probe_mods.mask[idx]), cfg.p_drop, rng)
        probs = m.exposure_probs(data.probe[idx], pmods)
        l_exp = ad.mul(del_loss(probs, w), 1.0 / len(idx))
        parts = {"l_exp": l_exp}
        if stage == 1:
            loss = l_exp
        else:
            cmods = channel_drop(ModulationVector(data.capture_mods.values[idx], data.capture_mods.mask[idx]),
                                 cfg.p_drop, rng)
            temp, dr, db = m.color_outputs(data.capture[idx], cmods)
            l_color = ad.mul(color_loss(temp, dr, db, data.gt_temp[idx], data.gt_delta_r[idx], data.gt_delta_b[idx]),
                             1.0 / len(idx))
            l_mod = modulation_loss(m.modulation.parameters())
            parts.update(l_color=l_color, l_mod=l_mod)
            loss = total_loss(l_exp, l_color, l_mod, self.loss_weights)
        return loss, probs.data, parts

    def run_epoch(self, data: TrainingSet) -> dict:
        e = self.epoch
        stage = self.stage_of(e)
        lr = lr_at(e, self.cfg)
        order = _epoch_rng(self.cfg.seed, e, 0).permutation(len(data))
        drop_rng = _epoch_rng(self.cfg.seed, e, 1)
        bins = np.asarray(self.cfg.bins, dtype=np.float64)
        sums = {"loss": 0.0, "l_exp": 0.0, "l_color": 0.0, "l_mod": 0.0}
        correct, abs_stops, n = 0, 0.0, 0
        for start in range(0, len(order), self.cfg.batch_size):
            idx = order[start:start + self.cfg.batch_size]
            self.optimizer.zero_grad()
            loss, probs, parts = self._batch_loss(data, idx, stage, drop_rng)
            loss.backward()
            self.optimizer.step(lr=lr)
            k = len(idx)
            sums["loss"] += loss.item() * k
            for name, t in parts.items():
                sums[name] += t.item() * k
            if stage == 2:
                self.loss_weights.observe([parts["l_exp"].item(), parts["l_color"].item(), parts["l_mod"].item()])
            correct += int((probs.argmax(axis=1) == data.gt_bin[idx]).sum())
            abs_stops += float(np.abs(np.log2(probs @ bins) - np.log2(data.gt_iso[idx])).sum())
            n += k
        if stage == 2:
            self.loss_weights.update()
        self.epoch += 1
        rec = {"epoch": self.epoch, "stage": stage, "lr": lr}
        rec.update({k: v / n for k, v in sums.items()})
        rec.update(top1=correct / n, iso_mae_stops=abs_stops / n)
        return rec

    def fit(self, data: TrainingSet, until_epoch: int, log_fn: Callable[[dict], None] | None = None) -> list[dict]:
        history = []
        while self.epoch < until_epoch:
            rec = self.run_epoch(data)
            history.append(rec)
            log.debug(format_log_line(rec))
            if log_fn:
                log_fn(rec)
        return history


def format_log_line(rec: dict) -> str:
    return " ".join(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())


def train_stage1(data: TrainingSet, cfg: TrainConfig, out_path=None, log_fn=None, model=None) -> Trainer:
    """Pretrain the exposure branch (and modulation embedding) on the distribution loss only."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    tr = Trainer.create(cfg, model)
    tr.history = tr.fit(data, cfg.stage1_epochs, log_fn)
    if out_path is not None:
        save_checkpoint(tr, out_path)
    return tr


def train_stage2(data: TrainingSet, stage1_ckpt, cfg: TrainConfig | None = None, out_path=None, log_fn=None) -> Trainer:
    """Joint training of all branches, resumed from a stage-1 checkpoint."""
    if stage1_ckpt is None or not Path(stage1_ckpt).is_file():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {stage1_ckpt}")
    if len(data) == 0:
        raise ValueError("empty dataset")
    tr = load_checkpoint(stage1_ckpt, cfg)
    if tr.epoch < tr.cfg.stage1_epochs:
        raise ValueError(f"checkpoint at epoch {tr.epoch} has not finished stage 1 ({tr.cfg.stage1_epochs} epochs)")
    tr.history = tr.fit(data, tr.cfg.epochs, log_fn)
    if out_path is not None:
        save_checkpoint(tr, out_path)
    return tr


def exposure_accuracy(model: ACameraNet, data: TrainingSet, batch: int = 64) -> float:
    correct = 0
    for s in range(0, len(data), batch):
        sl = slice(s, s + batch)
        probs = model.exposure_probs(data.probe[sl], ModulationVector(data.probe_mods.values[sl],
                                                                      data.probe_mods.mask[sl]))
        correct += int((probs.data.argmax(axis=1) == data.gt_bin[sl]).sum())
    return correct / len(data)


# checkpoints --------------------------------------------------------------------

def _pack_table(entries) -> bytes:
    """entries: iterable of (name, array) or (name, int8 array, scale)."""
    out = [struct.pack("<I", len(entries))]
    for e in entries:
        name, arr = e[0], np.asarray(e[1])
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        if len(e) == 3:
            out.append(struct.pack("<B", TAG_I8))
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(struct.pack("<d", e[2]) + arr.astype(np.int8).tobytes())
        else:
            out.append(struct.pack("<B", TAG_F64))
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_table(buf: bytes, pos: int):
    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(buf[pos:pos + nlen]).decode()
        pos += nlen
        (tag,) = take("<B")
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        count_el = int(np.prod(shape)) if shape else 1
        if tag == TAG_F64:
            raw = buf[pos:pos + 8 * count_el]
            if len(raw) != 8 * count_el:
                raise CheckpointError(f"truncated tensor {name!r}")
            entries.append((name, np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)))
            pos += 8 * count_el
        elif tag == TAG_I8:
            (scale,) = take("<d")
            raw = buf[pos:pos + count_el]
            if len(raw) != count_el:
                raise CheckpointError(f"truncated tensor {name!r}")
            entries.append((name, np.frombuffer(raw, dtype=np.int8).reshape(shape).copy(), scale))
            pos += count_el
        else:
            raise CheckpointError(f"unknown payload tag {tag} for {name!r}")
    return entries, pos


def encode_checkpoint(config_hash: bytes, epoch: int, tensors, optimizer) -> bytes:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    head = CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + config_hash + struct.pack("<I", epoch)
    return head + _pack_table(tensors) + _pack_table(optimizer)


def decode_checkpoint(buf: bytes):
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    if len(buf) < 42:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_hash = bytes(buf[6:38])
    (epoch,) = struct.unpack_from("<I", buf, 38)
    tensors, pos = _unpack_table(buf, 42)
    optimizer, pos = _unpack_table(buf, pos)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after optimizer table")
    return config_hash, epoch, tensors, optimizer


def meta_entries(model: ACameraNet, cfg: TrainConfig):
    return [("meta/bins", np.asarray(model.bins, dtype=np.float64)),
            ("meta/input_size", np.array(float(model.input_size))),
            ("meta/config", np.frombuffer(config_to_kv(cfg).encode(), dtype=np.uint8).astype(np.float64))]


def save_checkpoint(tr: Trainer, path) -> None:
    tensors = meta_entries(tr.model, tr.cfg) + list(tr.model.state_dict().items())
    names = [n for n, _ in tr.model.named_parameters()]
    st = tr.optimizer.state
    opt = [("step", np.array(float(st.step))), ("param_steps", st.param_steps.astype(np.float64)),
           ("loss/lambdas", tr.loss_weights.lambdas.copy())]
    if tr.loss_weights._running is not None:
        opt.append(("loss/running", tr.loss_weights._running.copy()))
    opt += [(f"m/{n}", a) for n, a in zip(names, st.m)] + [(f"v/{n}", a) for n, a in zip(names, st.v)]
    Path(path).write_bytes(encode_checkpoint(tr.cfg.digest(), tr.epoch, tensors, opt))


def split_meta(tensors):
    meta = {e[0][5:]: e[1] for e in tensors if e[0].startswith("meta/")}
    rest = [e for e in tensors if not e[0].startswith("meta/")]
    cfg = config_from_kv(TrainConfig, parse_kv(bytes(meta["config"].astype(np.uint8)).decode()))
    return meta, cfg, rest


def load_model(path) -> ACameraNet:
    """Model weights from a float or quantized checkpoint (quantized tensors are dequantized)."""
    _, _, tensors, _ = decode_checkpoint(Path(path).read_bytes())
    meta, cfg, rest = split_meta(tensors)
    model = ACameraNet(tuple(int(b) for b in meta["bins"]), int(meta["input_size"]), seed=cfg.seed)
    model.load_state_dict({e[0]: (e[1].astype(np.float64) * e[2] if len(e) == 3 else e[1]) for e in rest})
    return model


def load_checkpoint(path, cfg: TrainConfig | None = None) -> Trainer:
    """Restore a trainer; ``cfg`` may override the stored config (it must keep the same bins)."""
    config_hash, epoch, tensors, opt = decode_checkpoint(Path(path).read_bytes())
    meta, stored, rest = split_meta(tensors)
    if stored.digest() != config_hash:
        raise CheckpointError("config hash does not match the embedded config")
    if any(len(e) == 3 for e in rest):
        raise CheckpointError("quantized checkpoints cannot resume training")
    overridden = cfg is not None and cfg != stored
    cfg = cfg or stored
    model = ACameraNet(tuple(int(b) for b in meta["bins"]), int(meta["input_size"]), seed=cfg.seed)
    model.load_state_dict(dict(rest))
    tr = Trainer.create(cfg, model)
    tr.epoch = epoch
    o = {e[0]: e[1] for e in opt}
    st = tr.optimizer.state
    st.step = int(o["step"])
    st.param_steps = o["param_steps"].astype(np.int64)
    names = [n for n, _ in model.named_parameters()]
    st.m = [o[f"m/{n}"].copy() for n in names]
    st.v = [o[f"v/{n}"].copy() for n in names]
    if not overridden:
        tr.loss_weights.lambdas = o["loss/lambdas"].copy()
        if "loss/running" in o:
            tr.loss_weights._running = o["loss/running"].copy()
    return tr


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
