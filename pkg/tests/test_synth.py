import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from acamera.nets import ColorPrediction, compute_gains
from acamera.raw import CaptureParams, mean_luma, read_raw, split_mosaic
from acamera.synth import (
    ISO_BINS,
    GenConfig,
    IlluminantSpec,
    SceneSpec,
    capture_path,
    config_from_kv,
    config_to_kv,
    default_target_luma,
    expected_signal,
    generate_dataset,
    kelvin_to_channel_ratios,
    load_gen_config,
    measured_means,
    noise_free_luma,
    oracle_iso,
    oracle_wb,
    parse_kv,
    read_manifest,
    render_raw,
    sample_seed,
    setup_from_seed,
    verify_dataset,
)

TARGET = default_target_luma()
NEUTRAL = IlluminantSpec(6500.0)


def planck_ratio_oracle(cct):
    """Independent blackbody integration by adaptive quadrature over 380-780 nm."""
    h, c, k = 6.62607015e-34, 2.99792458e8, 1.380649e-23

    def resp(t, peak):
        f = lambda wl: math.exp(-0.5 * ((wl - peak) / 40.0) ** 2) / (
            (wl * 1e-9) ** 5 * math.expm1(h * c / (wl * 1e-9 * k * t)))
        return quad(f, 380.0, 780.0, epsrel=1e-12, limit=200)[0]

    r, g, b = (resp(cct, p) for p in (600, 540, 460))
    r0, g0, b0 = (resp(6500.0, p) for p in (600, 540, 460))
    return (r / g) / (r0 / g0), (b / g) / (b0 / g0)


def test_target_is_mid_gray():
    assert TARGET == pytest.approx(0.18 * 959)


def test_ratios_at_6500_exact():
    assert kelvin_to_channel_ratios(6500) == (1.0, 1.0)


def test_warm_light_is_red_heavy():
    r, b = kelvin_to_channel_ratios(2850)
    assert r > 1 and b < 1
    ro, bo = planck_ratio_oracle(2850)
    assert r == pytest.approx(ro, rel=1e-4) and b == pytest.approx(bo, rel=1e-4)


def test_ratio_sweep_monotone():
    ratios = np.array([kelvin_to_channel_ratios(t) for t in range(2500, 8501, 100)])
    assert np.all(np.diff(ratios[:, 0]) < 0)
    assert np.all(np.diff(ratios[:, 1]) > 0)


@pytest.mark.parametrize("cct", [2499, 8501.0, -1])
def test_ratio_out_of_range(cct):
    with pytest.raises(ValueError, match="outside"):
        kelvin_to_channel_ratios(cct)
    with pytest.raises(ValueError):
        IlluminantSpec(cct)


@settings(max_examples=40, deadline=None)
@given(st.floats(2500, 8499))
def test_property_ratio_continuous(t):
    a = np.array(kelvin_to_channel_ratios(t))
    b = np.array(kelvin_to_channel_ratios(t + 1e-3))
    assert np.all(np.abs(a - b) < 1e-5)


def test_dark_frame():
    scene = SceneSpec(8, 8, "flat", 100.0, level=0.0)
    noisy = render_raw(scene, NEUTRAL, CaptureParams(), seed=1)
    assert np.all(np.abs(noisy.samples.astype(int) - 64) <= 12)  # 6 sigma of read noise
    clean = render_raw(scene, NEUTRAL, CaptureParams(), seed=1, read_noise=0.0)
    assert np.all(clean.samples == 64)


def test_render_deterministic():
    scene = SceneSpec(16, 16, "patches", 150.0, seed=4)
    a = render_raw(scene, IlluminantSpec(3000), CaptureParams(), seed=7)
    b = render_raw(scene, IlluminantSpec(3000), CaptureParams(), seed=7)
    assert a == b
    assert render_raw(scene, IlluminantSpec(3000), CaptureParams(), seed=8) != a


def test_noise_free_doubling_iso():
    scene = SceneSpec(16, 16, "gradient", 80.0, seed=2)
    lo = noise_free_luma(scene, IlluminantSpec(4000), CaptureParams(iso=400))
    hi = noise_free_luma(scene, IlluminantSpec(4000), CaptureParams(iso=800))
    assert abs(hi / lo - 2.0) < 1e-9


def test_noise_free_render_doubles_before_quantization():
    # the u16 render rounds to whole DN, so doubling holds to half a DN per sample
    scene = SceneSpec(16, 16, "flat", 100.0, level=0.5)
    a = render_raw(scene, NEUTRAL, CaptureParams(iso=500), noise=False)
    b = render_raw(scene, NEUTRAL, CaptureParams(iso=1000), noise=False)
    assert abs(mean_luma(b) - 2 * mean_luma(a)) <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(1, 200), st.floats(0.5, 30), st.floats(100, 6400), st.sampled_from(["flat", "checker", "patches"]),
       st.integers(0, 100))
def test_property_linear_in_gain_shutter_iso(gain, shutter, iso, family, seed):
    scene = SceneSpec(8, 8, family, gain, seed)
    cap = CaptureParams(iso=iso, shutter_ms=shutter)
    base = expected_signal(scene, IlluminantSpec(5000), cap)
    for scaled in (
        expected_signal(replace(scene, scene_gain=2 * gain), IlluminantSpec(5000), cap),
        expected_signal(scene, IlluminantSpec(5000), replace(cap, shutter_ms=2 * cap.shutter_ms)),
        expected_signal(scene, IlluminantSpec(5000), replace(cap, iso=2 * cap.iso)),
    ):
        np.testing.assert_allclose(scaled, 2 * base, rtol=1e-9, atol=0)


def test_radiance_in_unit_range_and_tile_constant():
    for fam in ("flat", "gradient", "checker", "patches"):
        rad = SceneSpec(16, 16, fam, 1.0, seed=3).radiance()
        assert rad.min() >= 0 and rad.max() <= 1
        planes = split_mosaic(rad)
        for p in planes[1:]:
            np.testing.assert_array_equal(p, planes[0])


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec(family="stripes")
    with pytest.raises(ValueError):
        SceneSpec(scene_gain=0.0)
    with pytest.raises(ValueError):
        SceneSpec(scene_gain=float("inf"))


def _luma_at(scene, iso):
    # flat neutral scenes: luma = gain * level * iso/1000 * shutter/10, written out directly
    return min(scene.scene_gain * scene.level * iso / 1000.0, 959.0)


def test_oracle_iso_hits_800():
    scene = SceneSpec(8, 8, "flat", TARGET / 0.8)
    errs = [abs(_luma_at(scene, b) - TARGET) for b in ISO_BINS]
    assert int(np.argmin(errs)) == ISO_BINS.index(800)
    assert oracle_iso(scene, NEUTRAL) == (800.0, 3)


def test_oracle_iso_minimum_bin():
    scene = SceneSpec(8, 8, "flat", TARGET / 0.1)
    assert oracle_iso(scene, NEUTRAL) == (100.0, 0)
    # far too bright for any bin also lands on the minimum
    assert oracle_iso(SceneSpec(8, 8, "flat", 1e5), NEUTRAL) == (100.0, 0)


def test_oracle_iso_tie_goes_low():
    # luma(400) = 2T/3 and luma(800) = 4T/3 are equally far from T
    scene = SceneSpec(8, 8, "flat", (2 * TARGET / 3) / 0.4)
    assert oracle_iso(scene, NEUTRAL) == (400.0, 2)


def test_oracle_iso_rejects_bad_bins():
    with pytest.raises(ValueError):
        oracle_iso(SceneSpec(), NEUTRAL, bins=(200, 100))
    with pytest.raises(ValueError):
        oracle_iso(SceneSpec(), NEUTRAL, bins=())


@settings(max_examples=40, deadline=None)
@given(st.floats(1, 5000), st.floats(2500, 8500), st.sampled_from(["flat", "gradient", "checker", "patches"]),
       st.integers(0, 1000))
def test_property_oracle_iso_consistent(gain, cct, family, seed):
    scene, illum = SceneSpec(8, 8, family, gain, seed), IlluminantSpec(cct)
    iso, idx = oracle_iso(scene, illum)
    assert iso == ISO_BINS[idx]
    errs = [abs(noise_free_luma(scene, illum, CaptureParams(iso=b)) - TARGET) for b in ISO_BINS]
    assert errs[idx] <= min(errs) + 1e-9


def test_oracle_wb_neutral():
    raw = render_raw(SceneSpec(8, 8, "flat", 300.0), NEUTRAL, CaptureParams(), noise=False)
    r, g, b = measured_means(raw)
    lab = oracle_wb(NEUTRAL, raw, refs=(r, b))
    assert (lab.temp, lab.delta_r, lab.delta_b) == (6500.0, 0.0, 0.0)


def test_oracle_wb_warm_arithmetic(monkeypatch):
    import acamera.synth as synth
    monkeypatch.setattr(synth, "kelvin_to_channel_ratios", lambda t: (1.25, 1.0))
    monkeypatch.setattr(synth, "measured_means", lambda raw: (250.0, 200.0, 100.0))
    lab = synth.oracle_wb(IlluminantSpec(3000), None, refs=(190.0, 100.0))
    assert lab.delta_r == pytest.approx(10.0, abs=1e-12)
    assert lab.r_gain == 0.8


def test_oracle_wb_degenerate():
    dark = render_raw(SceneSpec(8, 8, "flat", 1.0, level=0.0), NEUTRAL, CaptureParams(), noise=False)
    with pytest.raises(ValueError, match="degenerate"):
        oracle_wb(NEUTRAL, dark)


@settings(max_examples=40, deadline=None)
@given(st.floats(2500, 8500), st.floats(20, 200), st.integers(0, 2 ** 16))
def test_property_wb_inversion(cct, gain, seed):
    illum = IlluminantSpec(cct)
    raw = render_raw(SceneSpec(8, 8, "patches", gain, seed), illum, CaptureParams(), seed=seed)
    lab = oracle_wb(illum, raw)
    r, g, b = measured_means(raw)
    rg, bg = compute_gains(ColorPrediction(lab.temp, lab.delta_r, lab.delta_b), r, b, g, g)
    r_ratio, b_ratio = kelvin_to_channel_ratios(cct)
    assert rg == pytest.approx(1 / r_ratio, rel=1e-9)
    assert bg == pytest.approx(1 / b_ratio, rel=1e-9)


@pytest.mark.parametrize("cct", [2600.0, 4000.0, 8000.0])
def test_oracle_gains_neutralize(cct):
    illum = IlluminantSpec(cct)
    raw = render_raw(SceneSpec(16, 16, "flat", 500.0, level=0.5), illum, CaptureParams(iso=400), noise=False)
    # use the unquantized signal for the noise-free check
    sig = expected_signal(SceneSpec(16, 16, "flat", 500.0, level=0.5), illum, CaptureParams(iso=400))
    r, gr, gb, b = (p.mean() for p in split_mosaic(sig))
    lab = oracle_wb(illum, raw)
    g = (gr + gb) / 2
    assert r * lab.r_gain / g == pytest.approx(1.0, abs=1e-6)
    assert b * lab.b_gain / g == pytest.approx(1.0, abs=1e-6)


def test_kv_config_round_trip(tmp_path):
    cfg = GenConfig(count=7, seed=3, bins=(100, 400, 1600), families=("flat", "checker"))
    p = tmp_path / "gen.cfg"
    p.write_text("# comment\n" + config_to_kv(cfg))
    assert load_gen_config(p) == cfg


def test_kv_config_errors():
    with pytest.raises(ValueError, match="unknown config keys"):
        config_from_kv(GenConfig, {"colour": "red"})
    with pytest.raises(ValueError, match="expected 'key = value'"):
        parse_kv("count 3")
    with pytest.raises(ValueError, match="ascending"):
        config_from_kv(GenConfig, {"bins": "800, 400"})


def test_sample_seed_stable():
    assert sample_seed(0, 5) == sample_seed(0, 5)
    assert len({sample_seed(0, i) for i in range(100)}) == 100


def test_setup_hits_target_range():
    cfg = GenConfig()
    for i in range(20):
        s = setup_from_seed(sample_seed(1, i), cfg)
        assert s.capture.iso == 1000.0
        assert cfg.cct_min <= s.illum.cct_kelvin <= cfg.cct_max


def test_generate_empty(tmp_path):
    recs = generate_dataset(GenConfig(count=0), tmp_path / "d")
    assert recs == []
    assert (tmp_path / "d" / "manifest.csv").read_text().strip().count("\n") == 0
    assert not (tmp_path / "d" / "samples").exists()


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(GenConfig(count=1), blocker / "sub")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(GenConfig(count=100, seed=42), out)
    return out


def test_generate_deterministic(dataset, tmp_path):
    generate_dataset(GenConfig(count=100, seed=42), tmp_path)
    assert (tmp_path / "manifest.csv").read_bytes() == (dataset / "manifest.csv").read_bytes()
    for name in ("000000.craw", "000099_cap.craw"):
        assert (tmp_path / "samples" / name).read_bytes() == (dataset / "samples" / name).read_bytes()


def test_generated_labels_verify(dataset):
    assert verify_dataset(dataset) == []


def test_generated_sample_invariants(dataset):
    recs = read_manifest(dataset / "manifest.csv")
    assert len(recs) == 100
    for r in recs:
        assert r.gt_iso == ISO_BINS[r.gt_iso_bin]
        assert read_raw(dataset / r.path).capture.iso == 1000.0
        assert read_raw(capture_path(dataset / r.path)).capture.iso == r.gt_iso
        assert r.gt_temp == r.cct
    # labels span several bins
    assert len({r.gt_iso_bin for r in recs}) >= 5


def test_verify_catches_tampering(dataset, tmp_path):
    import shutil
    shutil.copytree(dataset, tmp_path / "copy")
    m = tmp_path / "copy" / "manifest.csv"
    lines = m.read_text().splitlines()
    f = lines[1].split(",")
    f[2] = str((int(f[2]) + 1) % 7)
    lines[1] = ",".join(f)
    m.write_text("\n".join(lines) + "\n")
    problems = verify_dataset(tmp_path / "copy")
    assert len(problems) == 1 and "iso label" in problems[0]


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        read_manifest(tmp_path / "m.csv")
