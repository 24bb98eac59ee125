import numpy as np
import pytest

from gestream.config import FPS
from gestream.errors import InsufficientSamples, NoBeats
from gestream.geometry import default_skeleton
from gestream.metrics import (FEATURE_DIM, GestureFeatureExtractor,
                              LatencyStats, beat_align, facial_mse, fgd,
                              gesture_beats, l1_div, latency_report, mpjpe,
                              sliding_windows)
from gestream.motion import synth_motion
from gestream.script import make_script

SPEC = default_skeleton(expr_dim=8)


def _motion(seed=3, seconds=30.0):
    script = make_script(seed, 0, seconds)
    return synth_motion(script, SPEC, seed), script


# -- distribution distance -----------------------------------------------------

def test_fgd_identical_sets_is_zero(rng):
    x = rng.normal(size=(200, 16))
    assert abs(fgd(x, x.copy())) <= 1e-6


def test_fgd_symmetric_and_positive(rng):
    x = rng.normal(size=(300, 8))
    y = rng.normal(size=(300, 8)) + 1.0
    d1, d2 = fgd(x, y), fgd(y, x)
    assert d1 > 0
    assert d1 == pytest.approx(d2, rel=1e-6)


def test_fgd_known_gaussian_value(rng):
    # N(0, I) vs N(m, s^2 I) in k dims: ||m||^2 + k*(1-s)^2 in the limit
    k, n = 4, 60000
    x = rng.normal(size=(n, k))
    y = 2.0 + 0.5 * rng.normal(size=(n, k))
    expect = k * (2.0 ** 2) + k * (1 - 0.5) ** 2
    assert fgd(x, y) == pytest.approx(expect, rel=0.05)


def test_fgd_insufficient_samples(rng):
    with pytest.raises(InsufficientSamples):
        fgd(rng.normal(size=(1, 4)), rng.normal(size=(10, 4)))


# -- beats ---------------------------------------------------------------------

def test_gesture_beats_found_on_synthetic_motion():
    motion, script = _motion()
    # restrict to one speaking span so sway minima stay out of the picture
    spans = [s for s in script.spans if s[2] and s[1] - s[0] >= 2.0]
    s0, s1, _ = spans[0]
    a, b = int(s0 * FPS), int(s1 * FPS)
    import copy
    m = copy.copy(motion)
    m.upper, m.lower, m.face = motion.upper[a:b], motion.lower[a:b], motion.face[a:b]
    beats = gesture_beats(m, SPEC)
    gt = script.beats[(script.beats >= s0) & (script.beats < s1)] - s0
    assert len(beats) >= max(1, len(gt) // 2)


def test_gesture_beats_too_short_raises():
    m, _ = _motion(seconds=2.0)
    import copy
    short = copy.copy(m)
    short.upper, short.lower, short.face = m.upper[:3], m.lower[:3], m.face[:3]
    with pytest.raises(NoBeats):
        gesture_beats(short, SPEC)


def test_beat_align_perfect_and_sigma_offset():
    motion, script = _motion()
    detected = gesture_beats(motion, SPEC)
    assert beat_align(motion, detected, SPEC) == pytest.approx(1.0)
    assert beat_align(motion, detected + 0.1, SPEC) == pytest.approx(
        np.exp(-0.5), rel=1e-6)


# -- pose statistics -------------------------------------------------------------

def test_l1_div_hand_case():
    # two pose vectors, one unit apart in one channel: mean |x - mean| = 0.5
    # per frame, summed over channels
    poses = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert l1_div(poses) == pytest.approx(0.5)


def test_l1_div_constant_is_zero():
    assert l1_div(np.ones((10, 5))) == pytest.approx(0.0)


def test_mpjpe_uniform_offset():
    motion, _ = _motion(seconds=4.0)
    import copy
    shifted = copy.copy(motion)
    lower = motion.lower.copy()
    lower[:, -7:-4] += np.array([0.01, 0.0, 0.0])  # move root 1 cm in x
    shifted.lower = lower
    assert mpjpe(motion, shifted, SPEC) == pytest.approx(0.01, rel=1e-9)


def test_mpjpe_identical_is_zero():
    motion, _ = _motion(seconds=2.0)
    assert mpjpe(motion, motion, SPEC) == pytest.approx(0.0)


def test_facial_mse_hand_case():
    a = np.zeros((5, 3))
    b = np.full((5, 3), 0.2)
    assert facial_mse(a, b) == pytest.approx(0.04)


# -- feature extractor -----------------------------------------------------------

def test_extractor_fit_and_extract(rng):
    motion, _ = _motion(seconds=60.0)
    windows = sliding_windows(motion.upper, 64, 32)
    assert windows.shape[1] == 64
    ex = GestureFeatureExtractor(motion.upper.shape[1], seed=0)
    ex.fit(windows, epochs=2)
    feats = ex.extract(motion.upper)
    assert feats.shape[1] == FEATURE_DIM
    assert np.isfinite(feats).all()


def test_extractor_requires_samples():
    ex = GestureFeatureExtractor(4, seed=0)
    with pytest.raises(InsufficientSamples):
        ex.fit(np.zeros((1, 64, 4)))


# -- latency summaries -----------------------------------------------------------

def test_latency_percentiles_linear_interpolation():
    stats = latency_report(list(range(1, 101)), warmup=0)
    assert stats.p50 == pytest.approx(50.5)
    assert stats.p95 == pytest.approx(95.05)
    assert stats.n == 100


def test_latency_warmup_excluded():
    samples = [1000.0] * 10 + [10.0] * 90
    stats = latency_report(samples)  # default warmup=10
    assert stats.p95 == pytest.approx(10.0)
    assert stats.n == 90


def test_latency_stats_round_trip():
    stats = latency_report([5.0, 6.0, 7.0], warmup=0)
    again = LatencyStats(**stats.to_dict())
    assert again == stats
