"""``acamera`` command line: gen-data, train, eval, predict, quantize, inspect.

Exit codes: 0 ok, 2 configuration error, 3 I/O or parse error, 4 state error
(e.g. stage 2 without a stage-1 checkpoint).
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from .metrics import ConstantPredictor, OraclePredictor, evaluate
from .nets import color_forward, compute_gains, expected_iso, exposure_forward
from .quantize import drift_report, quantize_model, save_quantized_checkpoint
from .raw import RawFormatError, channel_means, mean_luma, read_raw
from .synth import (
    GenConfig,
    PROBE_ISO,
    generate_dataset,
    load_gen_config,
    measured_means,
    verify_dataset,
)
from .training import (
    CheckpointError,
    TrainConfig,
    checkpoint_digest,
    decode_checkpoint,
    format_log_line,
    load_model,
    load_train_config,
    load_training_set,
    split_meta,
    train_stage1,
    train_stage2,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STATE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(pairs, porcelain: bool) -> None:
    for k, v in pairs:
        print(f"{k}={v}" if porcelain else f"{k:>12}: {v}")


# subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        cfg = load_gen_config(args.config) if args.config else GenConfig()
        cfg = replace(cfg, **{k: v for k, v in (("count", args.count), ("seed", args.seed)) if v is not None})
        cfg.validate()
    except (ValueError, OSError) as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG)
    try:
        records = generate_dataset(cfg, args.out)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO)
    manifest = Path(args.out) / "manifest.csv"
    print(f"manifest: {manifest}")
    print(f"samples: {len(records)}")
    hist = Counter(r.gt_iso_bin for r in records)
    for i, b in enumerate(cfg.bins):
        print(f"  iso {b:>6}: {hist.get(i, 0)}")
    if records:
        cct = np.array([r.cct for r in records])
        print(f"cct: mean {cct.mean():.0f} K, range [{cct.min():.0f}, {cct.max():.0f}] K")
    if args.verify:
        problems = verify_dataset(args.out)
        for p in problems:
            print(f"mismatch: {p}")
        print(f"verify: {len(problems)} mismatches")
        if problems:
            return EXIT_STATE
    return EXIT_OK


def _resolve_data(path: str) -> tuple[Path, str]:
    p = Path(path)
    if p.is_dir():
        return p, "manifest.csv"
    if p.is_file():
        return p.parent, p.name
    raise CliError(f"manifest not found: {path}", EXIT_CONFIG)


def _train_config(args) -> TrainConfig:
    try:
        cfg = load_train_config(args.config) if args.config else TrainConfig()
        overrides = {
            "seed": args.seed, "epochs": args.epochs, "stage1_epochs": args.stage1_epochs,
            "input_size": args.input_size, "batch_size": args.batch_size, "lr": args.lr,
        }
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
        cfg.validate()
        return cfg
    except (ValueError, OSError) as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG)


def cmd_train(args) -> int:
    data_dir, manifest = _resolve_data(args.data)
    cfg = _train_config(args)
    try:
        data = load_training_set(data_dir, cfg.input_size, manifest)
    except ValueError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO)
    log_fh = open(args.log, "w") if args.log else None

    def log_fn(rec):
        line = format_log_line(rec)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        if not args.quiet:
            print(line, flush=True)

    out = Path(args.out)
    try:
        if args.stage == "1":
            train_stage1(data, cfg, out, log_fn)
        elif args.stage == "2":
            if not args.init or not Path(args.init).is_file():
                raise CliError(f"stage 2 needs a stage-1 checkpoint (--init), not found: {args.init}", EXIT_STATE)
            train_stage2(data, args.init, cfg, out, log_fn)
        else:
            stage1 = out.with_name(out.name + ".stage1")
            train_stage1(data, cfg, stage1, log_fn)
            train_stage2(data, stage1, cfg, out, log_fn)
    except CheckpointError as exc:
        raise CliError(f"checkpoint error: {exc}", EXIT_IO)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_STATE)
    finally:
        if log_fh:
            log_fh.close()
    print(f"checkpoint: {out} sha256={checkpoint_digest(out)}")
    return EXIT_OK


def _load_model(path):
    try:
        return load_model(path)
    except (CheckpointError, KeyError) as exc:
        raise CliError(f"checkpoint error: {exc}", EXIT_IO)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO)


def _read_raw(path):
    try:
        return read_raw(path)
    except RawFormatError as exc:
        raise CliError(f"parse error in {path}: {exc}", EXIT_IO)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO)


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    probe = _read_raw(args.raw)
    if probe.capture.iso != PROBE_ISO:
        print(f"warning: probe captured at ISO {probe.capture.iso:g}, expected {PROBE_ISO:g}", file=sys.stderr)
    dist = exposure_forward(model, probe)
    pairs = [("expected_iso", repr(expected_iso(dist))), ("top_bin", dist.top_bin),
             ("top_iso", dist.bins[dist.top_bin])]
    pairs += [(f"p_iso_{b}", repr(float(p))) for b, p in zip(dist.bins, dist.probs)]
    if args.raw2:
        cap = _read_raw(args.raw2)
        pred = color_forward(model, cap)
        r, g, b = measured_means(cap)
        rg, bg = compute_gains(pred, r, b, g, g)
        pairs += [("temp", repr(pred.temp)), ("delta_r", repr(pred.delta_r)), ("delta_b", repr(pred.delta_b)),
                  ("r_gain", repr(rg)), ("b_gain", repr(bg))]
    _emit(pairs, args.porcelain)
    return EXIT_OK


def cmd_eval(args) -> int:
    data_dir, manifest = _resolve_data(args.data)
    if args.predictor == "model":
        if not args.model:
            raise CliError("--model is required with --predictor model", EXIT_CONFIG)
        model = _load_model(args.model)
        if args.quantized:
            model, _ = quantize_model(model)
        predictor = model
    elif args.predictor == "oracle":
        predictor = OraclePredictor()
    else:
        from .synth import load_dataset_config
        predictor = ConstantPredictor(load_dataset_config(data_dir).bins)
    try:
        report = evaluate(predictor, data_dir, manifest, seed=args.seed)
    except ValueError as exc:
        raise CliError(f"state error: {exc}", EXIT_STATE)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO)
    print(report.summary_table())
    if args.porcelain:
        for k, v in report.aggregate().items():
            print(f"{k}={v!r}")
    if args.out:
        report.write(args.out)
    if args.emit_plot_data:
        for p in report.write_plot_data(args.emit_plot_data):
            print(f"plot data: {p}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = _load_model(args.model)
    qmodel, table = quantize_model(model)
    save_quantized_checkpoint(model, table, args.model, args.out)
    print(f"quantized checkpoint: {args.out} ({len(table)} int8 tensors)")
    if args.data:
        data_dir, manifest = _resolve_data(args.data)
        f_rep = evaluate(model, data_dir, manifest, seed=args.seed)
        q_rep = evaluate(qmodel, data_dir, manifest, seed=args.seed)
        for k, v in drift_report(f_rep, q_rep).items():
            print(f"{k}={v!r}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        head = path.read_bytes()[:4]
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IO)
    if head == b"ACKP":
        try:
            config_hash, epoch, tensors, opt = decode_checkpoint(path.read_bytes())
            meta, cfg, rest = split_meta(tensors)
        except (CheckpointError, KeyError) as exc:
            raise CliError(f"checkpoint error: {exc}", EXIT_IO)
        print(f"checkpoint: {path}")
        print(f"epoch: {epoch}")
        print(f"config_hash: {config_hash.hex()}")
        print(f"bins: {tuple(int(b) for b in meta['bins'])}  input_size: {int(meta['input_size'])}")
        total = 0
        for e in rest:
            name, arr = e[0], e[1]
            n = int(np.prod(arr.shape)) if arr.shape else 1
            total += n
            kind = f"int8 scale={e[2]:.6g}" if len(e) == 3 else "f64"
            print(f"  {name:<40} {str(tuple(arr.shape)):<18} {kind:<22} {n}")
        print(f"total_parameters: {total}")
        print(f"optimizer_entries: {len(opt)}")
        return EXIT_OK
    raw = _read_raw(path)
    c = raw.capture
    pairs = [("width", raw.width), ("height", raw.height), ("bit_depth", raw.bit_depth),
             ("cfa_pattern", raw.cfa_pattern), ("black_level", raw.black_level), ("iso", c.iso),
             ("shutter_ms", c.shutter_ms), ("aperture_f", c.aperture_f), ("focal_mm", c.focal_mm)]
    pairs += [(f"mean_{k}", repr(v)) for k, v in channel_means(raw).items()]
    pairs.append(("mean_luma", repr(mean_luma(raw))))
    _emit(pairs, args.porcelain)
    return EXIT_OK


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acamera", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a labeled synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, help="number of samples (overrides config)")
    g.add_argument("--seed", type=int, help="master seed (overrides config)")
    g.add_argument("--config", help="key = value dataset config")
    g.add_argument("--verify", action="store_true", help="re-run both oracles on every written sample")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--data", required=True, help="manifest.csv or the dataset directory")
    t.add_argument("--out", required=True, help="checkpoint to write")
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--init", help="stage-1 checkpoint (required for --stage 2)")
    t.add_argument("--config", help="key = value training config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--input-size", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--log", help="epoch log file (one line per epoch)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="two-capture evaluation on a manifest")
    e.add_argument("--data", required=True)
    e.add_argument("--model", help="checkpoint (float or quantized)")
    e.add_argument("--predictor", choices=("model", "oracle", "constant"), default="model")
    e.add_argument("--quantized", action="store_true", help="INT8 round-trip the weights first")
    e.add_argument("--out", help="write line-delimited report")
    e.add_argument("--emit-plot-data", metavar="DIR", help="write (x, y) series for ISO, luminance and dE plots")
    e.add_argument("--seed", type=int, default=0, help="seed for the synthetic re-capture noise")
    e.add_argument("--porcelain", action="store_true")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict ISO (and white balance) for .craw files")
    pr.add_argument("--model", required=True)
    pr.add_argument("--raw", required=True, help="probe .craw captured at ISO 1000")
    pr.add_argument("--raw2", help="second capture for white-balance prediction")
    pr.add_argument("--porcelain", action="store_true", help="key=value output")
    pr.set_defaults(func=cmd_predict)

    q = sub.add_parser("quantize", help="INT8 weight quantization")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--data", help="evaluate float vs quantized drift on this manifest")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("inspect", help="describe a .craw file or a checkpoint")
    i.add_argument("path")
    i.add_argument("--porcelain", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
