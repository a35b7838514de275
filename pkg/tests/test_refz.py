import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualz.errors import FewerThanThreeFrames, TooFewParticles, ZeroWeightSum
from dualz.fitting import fit_gaussian, gaussian
from dualz.imaging import Frame, OpticalConfig, ParticleTruth, ZStack, random_particles, simulate_stack
from dualz.refz import (BrightnessSeries, NoiseConstants, fit_profile_baseline, measure_brightness,
                        read_reference_csv, reference_table, reference_z, weighted_z, weighted_z_sigma,
                        write_reference_csv)
from oracles import centroid_exact, centroid_sigma_exact


def series(z, b):
    return BrightnessSeries(0, z, b)


def test_single_entry_centroid():
    assert weighted_z(series([100.0], [5.0])) == 100.0


def test_symmetric_weights():
    assert weighted_z(series([0, 250, 500], [1, 2, 1])) == 250.0


def test_asymmetric_weights_hand_value():
    assert weighted_z(series([0, 250, 500], [1, 3, 2])) == pytest.approx(1750 / 6, rel=1e-15)


def test_single_entry_sigma_is_encoder_accuracy():
    assert weighted_z_sigma(series([100.0], [7.0])) == pytest.approx(35.0, rel=1e-15)


def test_two_equal_entries_sigma_hand_value():
    expected = math.sqrt(0.5 * 1225 + 31250 / 4 * 0.5329)
    assert weighted_z_sigma(series([0, 250], [1, 1])) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(69.1, abs=0.05)


def test_brightness_scaling_splits_terms():
    s = series([0, 250, 500, 750], [2.0, 5.0, 4.0, 1.0])
    s10 = series(s.z, s.b * 10)
    only_z = NoiseConstants(35.0, 0.0)
    only_b = NoiseConstants(0.0, 0.73)
    assert weighted_z_sigma(s10, only_z) == pytest.approx(weighted_z_sigma(s, only_z), rel=1e-14)
    assert weighted_z_sigma(s10, only_b) == pytest.approx(weighted_z_sigma(s, only_b) / 10, rel=1e-14)


def test_zero_weight_sum():
    with pytest.raises(ZeroWeightSum):
        weighted_z(series([0, 250], [0, 0]))
    with pytest.raises(ZeroWeightSum):
        weighted_z_sigma(series([0, 250], [1, -1]))


def test_matches_exact_transcription_on_random_series(rng):
    for _ in range(200):
        n = rng.integers(1, 12)
        z = np.sort(rng.uniform(-2000, 4000, n))
        b = rng.uniform(0.01, 50, n)
        s = series(z, b)
        assert weighted_z(s) == pytest.approx(float(centroid_exact(z, b)), rel=1e-12, abs=1e-9)
        assert weighted_z_sigma(s) == pytest.approx(centroid_sigma_exact(z, b), rel=1e-12)


positive = st.floats(0.01, 1e4, allow_nan=False)
coords = st.floats(-5000, 5000, allow_nan=False)


@st.composite
def brightness_series(draw):
    n = draw(st.integers(1, 10))
    z = draw(st.lists(coords, min_size=n, max_size=n))
    b = draw(st.lists(positive, min_size=n, max_size=n))
    return series(z, b)


@settings(max_examples=200, deadline=None)
@given(brightness_series(), st.floats(-1e4, 1e4))
def test_shift_equivariance(s, c):
    shifted = series(s.z + c, s.b)
    assert weighted_z(shifted) == pytest.approx(weighted_z(s) + c, abs=1e-8 * (1 + abs(c) + np.abs(s.z).max()))


@settings(max_examples=200, deadline=None)
@given(brightness_series(), st.floats(1e-3, 1e3))
def test_scale_invariance(s, lam):
    assert weighted_z(series(s.z, s.b * lam)) == pytest.approx(weighted_z(s), rel=1e-12, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(brightness_series())
def test_centroid_is_convex_combination(s):
    zb = weighted_z(s)
    tol = 1e-9 * (1 + np.abs(s.z).max())
    assert s.z.min() - tol <= zb <= s.z.max() + tol


@settings(max_examples=200, deadline=None)
@given(brightness_series())
def test_encoder_term_bounded_by_single_frame_accuracy(s):
    k = NoiseConstants(35.0, 0.0)
    assert weighted_z_sigma(s, k) <= 35.0 * (1 + 1e-12)


def test_encoder_term_equality_only_for_single_weight():
    k = NoiseConstants(35.0, 0.0)
    assert weighted_z_sigma(series([0, 250, 500], [0, 4, 0]), k) == pytest.approx(35.0)
    assert weighted_z_sigma(series([0, 250, 500], [1, 4, 0]), k) < 35.0


def _stack_from_images(images, z_step=250.0):
    frames = [Frame(np.asarray(im, np.float32), k * z_step, k * z_step) for k, im in enumerate(images)]
    return ZStack(ParticleTruth(7, 0.0, 0.0, 500.0), frames, True)


def test_noiseless_stack_five_frames_decreasing_away_from_peak():
    cfg = OpticalConfig(crop_px=32, asymmetry=0.0, sensor_noise_rms=0.0, encoder_sigma=0.0)
    p = ParticleTruth(1, cfg.center_nm, cfg.center_nm, 500.0)
    stack = simulate_stack(p, 0, 1000, cfg, seed=0)
    s = measure_brightness(stack, detection_threshold=1e-3)
    assert len(s) == 5
    peak = int(np.argmax(s.b))
    assert s.z[peak] == 500
    assert np.all(np.diff(s.b[:peak + 1]) > 0) and np.all(np.diff(s.b[peak:]) < 0)


def test_all_dark_stack_raises():
    rng = np.random.default_rng(0)
    stack = _stack_from_images([20 + 0.73 * rng.standard_normal((32, 32)) for _ in range(6)])
    with pytest.raises(FewerThanThreeFrames):
        measure_brightness(stack, detection_threshold=5.0)


def test_background_offset_removed_and_excluded_by_default_threshold():
    rng = np.random.default_rng(1)
    stack = _stack_from_images([123.0 + 0.73 * rng.standard_normal((64, 64)) for _ in range(8)])
    from dualz.refz import detect_frames

    signal, detected = detect_frames(stack)
    assert np.all(np.abs(signal) < 1.0)
    assert detected.sum() <= 1
    with pytest.raises(FewerThanThreeFrames):
        measure_brightness(stack)


def test_reference_uses_stage_z_and_table_skips_unusable(small_stacks):
    refs, ser = reference_table(small_stacks)
    assert refs and set(refs) == set(ser)
    for st_ in small_stacks:
        if st_.particle.id in refs:
            assert st_.usable
            s = ser[st_.particle.id]
            assert set(s.z) <= set(st_.z_stages)
            assert refs[st_.particle.id] == reference_z(s)


def test_reference_csv_round_trip(tmp_path, small_stacks):
    refs, _ = reference_table(small_stacks)
    path = tmp_path / "refs.csv"
    write_reference_csv(path, refs)
    assert read_reference_csv(path) == refs


def test_fit_exact_gaussian_residual():
    x = np.linspace(-1000, 1000, 81)
    y = gaussian(x, 3.5, 40.0, 250.0, 0.2)
    fit = fit_gaussian(x, y, offset=True)
    assert fit["residual_rms"] < 1e-8 * 3.5
    assert fit["sigma"] == pytest.approx(250.0, rel=1e-9)


def test_baseline_symmetric_profile_recovers_axial_sigma():
    cfg = OpticalConfig(asymmetry=0.0, crop_px=64)
    parts = random_particles(500, cfg, 500, 1250, seed=21)
    stacks = [simulate_stack(p, 0, 1750, cfg, seed=p.id) for p in parts]
    fit = fit_profile_baseline(stacks)
    assert fit.sigma_single == pytest.approx(260.0, abs=13.0)


def test_baseline_centre_shifts_towards_skew():
    cfg_p = OpticalConfig(asymmetry=0.3, crop_px=32)
    cfg_m = OpticalConfig(asymmetry=-0.3, crop_px=32)
    parts = random_particles(150, cfg_p, 500, 1250, seed=5)
    cp = fit_profile_baseline([simulate_stack(p, 0, 1750, cfg_p, seed=p.id) for p in parts]).params["center"]
    cm = fit_profile_baseline([simulate_stack(p, 0, 1750, cfg_m, seed=p.id) for p in parts]).params["center"]
    assert cp > 0 > cm


def test_baseline_needs_ten_particles(small_stacks):
    with pytest.raises(TooFewParticles):
        fit_profile_baseline(small_stacks[:3])
