import math
from dataclasses import replace

import numpy as np
import pytest

from acamera.autodiff import Tensor
from acamera.nets import ACameraNet
from acamera.training import (
    Adam,
    CheckpointError,
    TrainConfig,
    Trainer,
    adam_step,
    checkpoint_digest,
    decode_checkpoint,
    encode_checkpoint,
    exposure_accuracy,
    format_log_line,
    load_checkpoint,
    load_model,
    load_train_config,
    load_training_set,
    lr_at,
    save_checkpoint,
    train_stage1,
    train_stage2,
)
from acamera.synth import config_to_kv


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    adam_step([p], [np.zeros(2)], opt)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.state.step == 1


def test_adam_quadratic_converges():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for i in range(200):
        adam_step([x], [2 * x.data], opt, lr=0.1 * (1 - i / 200) + 1e-4)
    assert abs(x.item()) < 1e-3


def test_adam_constant_lr_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        adam_step([x], [2 * x.data], opt)
    assert abs(x.item()) < 0.1


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        ps = [Tensor(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(2)]
        opt = Adam(ps, lr=0.01, weight_decay=1e-4)
        for _ in range(10):
            adam_step(ps, [np.sin(p.data) for p in ps], opt)
        return b"".join(p.data.tobytes() for p in ps)
    assert run() == run()


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p])
    with pytest.raises(ValueError, match="shape"):
        opt.step([np.zeros(4)])
    with pytest.raises(ValueError):
        adam_step([Tensor(np.zeros(3), requires_grad=True)], [np.zeros(3)], opt)


def test_adamw_vs_adam_decay():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    Adam([a], lr=0.1, weight_decay=0.5, decoupled=True).step([np.zeros(1)])
    Adam([b], lr=0.1, weight_decay=0.5, decoupled=False).step([np.zeros(1)])
    assert a.item() == pytest.approx(0.95)  # pure decoupled shrink
    assert b.item() < 1.0 and b.item() != pytest.approx(0.95)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(100, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(50, cfg) == pytest.approx((1e-4 + 1e-6) / 2, rel=1e-12)
    lrs = [lr_at(e, cfg) for e in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_validation_and_file(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd").validate()
    cfg = TrainConfig(epochs=7, stage1_epochs=3, lambdas=(1.0, 0.5, 0.0), dynamic_lambda=True)
    (tmp_path / "t.cfg").write_text(config_to_kv(cfg))
    assert load_train_config(tmp_path / "t.cfg") == cfg
    assert cfg.digest() != TrainConfig().digest()


def test_empty_dataset(tmp_path, tiny_set, tiny_cfg):
    with pytest.raises(ValueError, match="empty"):
        train_stage1(tiny_set.subset([]), tiny_cfg)
    (tmp_path / "manifest.csv").write_text("path,gt_iso,gt_iso_bin,gt_temp,gt_delta_r,gt_delta_b,cct,seed\n")
    with pytest.raises(ValueError, match="empty"):
        load_training_set(tmp_path, 8)
    with pytest.raises(FileNotFoundError):
        load_training_set(tmp_path / "nope", 8)


def test_stage2_missing_checkpoint(tmp_path, tiny_set, tiny_cfg):
    with pytest.raises(FileNotFoundError, match="stage-1 checkpoint"):
        train_stage2(tiny_set, tmp_path / "missing.ckpt", tiny_cfg)


def test_step_count_equals_batches(tiny_set, tiny_cfg):
    tr = Trainer.create(tiny_cfg)
    tr.fit(tiny_set, 3)
    batches = 3 * math.ceil(len(tiny_set) / tiny_cfg.batch_size)
    assert tr.optimizer.state.step == batches
    # color weights only start moving in stage 2 (epoch 3)
    names = [n for n, _ in tr.model.named_parameters()]
    steps = dict(zip(names, tr.optimizer.state.param_steps))
    assert steps["color.fc1.weight"] == batches // 3
    assert steps["exposure.head.weight"] == batches


def test_stage1_leaves_color_untouched(tiny_set, tiny_cfg):
    fresh = ACameraNet(tiny_cfg.bins, tiny_cfg.input_size, seed=tiny_cfg.seed)
    tr = train_stage1(tiny_set, tiny_cfg)
    before, after = fresh.state_dict(), tr.model.state_dict()
    for name in before:
        same = np.array_equal(before[name], after[name])
        assert same == name.startswith("color."), name


def test_training_deterministic(tiny_set, tiny_cfg, tmp_path):
    a = train_stage1(tiny_set, tiny_cfg, tmp_path / "a.ckpt")
    b = train_stage1(tiny_set, tiny_cfg, tmp_path / "b.ckpt")
    assert [format_log_line(r) for r in a.history] == [format_log_line(r) for r in b.history]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_loss_decreases(tiny_set):
    cfg = TrainConfig(epochs=40, stage1_epochs=20, batch_size=4, input_size=8, lr=1e-3, seed=0)
    tr = Trainer.create(cfg)
    hist = tr.fit(tiny_set, 40)
    assert hist[19]["l_exp"] < hist[0]["l_exp"]
    assert hist[-1]["loss"] < hist[20]["loss"]
    assert set(hist[-1]) >= {"epoch", "stage", "lr", "loss", "l_exp", "l_color", "l_mod", "top1", "iso_mae_stops"}


def test_resume_equals_uninterrupted(tiny_set, tiny_cfg, tmp_path):
    full = Trainer.create(tiny_cfg)
    full.fit(tiny_set, 4)
    part = Trainer.create(tiny_cfg)
    part.fit(tiny_set, 1)
    save_checkpoint(part, tmp_path / "k.ckpt")
    resumed = load_checkpoint(tmp_path / "k.ckpt")
    assert resumed.epoch == 1
    resumed.fit(tiny_set, 4)
    save_checkpoint(full, tmp_path / "full.ckpt")
    save_checkpoint(resumed, tmp_path / "resumed.ckpt")
    assert checkpoint_digest(tmp_path / "full.ckpt") == checkpoint_digest(tmp_path / "resumed.ckpt")


def test_two_stage_chain_equals_single_run(tiny_set, tiny_cfg, tmp_path):
    train_stage1(tiny_set, tiny_cfg, tmp_path / "s1.ckpt")
    train_stage2(tiny_set, tmp_path / "s1.ckpt", tiny_cfg, tmp_path / "s2.ckpt")
    single = Trainer.create(tiny_cfg)
    single.fit(tiny_set, tiny_cfg.epochs)
    save_checkpoint(single, tmp_path / "single.ckpt")
    assert (tmp_path / "s2.ckpt").read_bytes() == (tmp_path / "single.ckpt").read_bytes()


def test_stage2_requires_finished_stage1(tiny_set, tiny_cfg, tmp_path):
    tr = Trainer.create(tiny_cfg)
    tr.fit(tiny_set, 1)
    save_checkpoint(tr, tmp_path / "early.ckpt")
    with pytest.raises(ValueError, match="has not finished stage 1"):
        train_stage2(tiny_set, tmp_path / "early.ckpt", tiny_cfg)


def test_lambda_exposure_only_matches_stage1(tiny_set, tiny_cfg):
    # with lambda = (1, 0, 0) the exposure weights follow the stage-1 objective in stage 2
    cfg = replace(tiny_cfg, lambdas=(1.0, 0.0, 0.0), p_drop=0.0, stage1_epochs=1, epochs=3)
    cfg1 = replace(cfg, stage1_epochs=3)
    a = Trainer.create(cfg)
    a.fit(tiny_set, 3)
    b = Trainer.create(cfg1)
    b.fit(tiny_set, 3)
    for name, p in a.model.exposure.named_parameters("exposure."):
        np.testing.assert_allclose(p.data, b.model.state_dict()[name], rtol=0, atol=1e-12)


def test_dynamic_lambda_round_trip(tiny_set, tiny_cfg, tmp_path):
    cfg = replace(tiny_cfg, dynamic_lambda=True)
    tr = Trainer.create(cfg)
    tr.fit(tiny_set, 3)
    assert tr.loss_weights.lambdas.sum() == pytest.approx(3.0)
    assert not np.allclose(tr.loss_weights.lambdas, 1.0)
    save_checkpoint(tr, tmp_path / "d.ckpt")
    back = load_checkpoint(tmp_path / "d.ckpt", cfg)
    np.testing.assert_array_equal(back.loss_weights.lambdas, tr.loss_weights.lambdas)


def test_checkpoint_layout_and_errors(tiny_set, tiny_cfg, tmp_path):
    tr = Trainer.create(tiny_cfg)
    save_checkpoint(tr, tmp_path / "c.ckpt")
    buf = (tmp_path / "c.ckpt").read_bytes()
    assert buf[:4] == b"ACKP" and int.from_bytes(buf[4:6], "little") == 1
    assert buf[6:38] == tiny_cfg.digest()
    h, epoch, tensors, opt = decode_checkpoint(buf)
    assert epoch == 0 and len(opt) > 0
    names = {e[0] for e in tensors}
    assert "exposure.stem.weight" in names and "meta/config" in names
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(buf[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(buf + b"\0")
    bad = bytearray(buf)
    bad[6] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_round_trip_weights(tiny_set, tiny_cfg, tmp_path):
    tr = Trainer.create(tiny_cfg)
    tr.fit(tiny_set, 1)
    save_checkpoint(tr, tmp_path / "w.ckpt")
    model = load_model(tmp_path / "w.ckpt")
    for name, arr in tr.model.state_dict().items():
        assert model.state_dict()[name].tobytes() == arr.tobytes()
    assert model.bins == tr.model.bins and model.input_size == tr.model.input_size


def test_encode_decode_scalars_and_int8():
    entries = [("a", np.array(3.5)), ("b", np.arange(6.0).reshape(2, 3)), ("q", np.array([-127, 0, 5], np.int8), 0.25)]
    buf = encode_checkpoint(bytes(32), 9, entries, [])
    _, epoch, back, opt = decode_checkpoint(buf)
    assert epoch == 9 and opt == []
    assert back[0][1].shape == () and back[0][1] == 3.5
    np.testing.assert_array_equal(back[1][1], entries[1][1])
    assert back[2][1].dtype == np.int8 and back[2][2] == 0.25


def test_exposure_accuracy_bounds(tiny_set, tiny_cfg):
    acc = exposure_accuracy(ACameraNet(tiny_cfg.bins, tiny_cfg.input_size), tiny_set)
    assert 0.0 <= acc <= 1.0
