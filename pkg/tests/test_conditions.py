import numpy as np
import pytest

from gestream.conditions import (ConditionStep, JsonlConditionSource,
                                 LiveSyntheticSource, SyntheticConditionSource,
                                 level_pool, null_condition,
                                 synth_condition_stream,
                                 write_condition_records)
from gestream.config import FPS, FRAMES_PER_STEP
from gestream.errors import ShapeError


def test_step_count_matches_duration():
    src = SyntheticConditionSource(0, 0, 10.0, d=32)
    steps = list(src)
    # 10 s at 12.5 steps/s
    assert len(steps) == 125


def test_steps_are_deterministic():
    a = [s for s in SyntheticConditionSource(3, 1, 4.0, d=32)]
    b = [s for s in SyntheticConditionSource(3, 1, 4.0, d=32)]
    assert len(a) == len(b)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.f_speech, sb.f_speech)
        np.testing.assert_array_equal(sa.f_text, sb.f_text)
        assert sa.va == sb.va and sa.beat == sb.beat


def test_step_shapes_and_validation():
    src = SyntheticConditionSource(0, 0, 2.0, d=16, k_speech=4, k_text=2)
    step = src.next()
    assert step.f_speech.shape == (4, 16)
    assert step.f_text.shape == (2, 16)
    step.validate()
    bad = ConditionStep(f_speech=np.zeros((4, 16)), f_text=np.zeros((2, 15)),
                        va=0, beat=0, identity=0, step_index=0)
    with pytest.raises(ShapeError):
        bad.validate()


def test_va_feature_separability():
    # speech features while speaking differ measurably from listening
    steps = list(SyntheticConditionSource(0, 0, 30.0, d=32))
    on = np.stack([s.f_speech.mean(0) for s in steps if s.va == 1])
    off = np.stack([s.f_speech.mean(0) for s in steps if s.va == 0])
    assert len(on) > 5 and len(off) > 5
    gap = np.linalg.norm(on.mean(0) - off.mean(0))
    spread = max(on.std(), off.std())
    assert gap > spread


def test_level_pool_sums_levels():
    step = SyntheticConditionSource(0, 0, 2.0, d=8, k_speech=3).next()
    sp, tx = level_pool(step)
    np.testing.assert_allclose(sp, step.f_speech.sum(0))
    np.testing.assert_allclose(tx, step.f_text.sum(0))


def test_null_condition_uses_given_embeddings():
    ns = np.ones((2, 8))
    nt = np.full((1, 8), 2.0)
    step = null_condition(ns, nt, step_index=7)
    np.testing.assert_array_equal(step.f_speech, ns)
    np.testing.assert_array_equal(step.f_text, nt)
    assert step.step_index == 7


def test_live_source_va_override_changes_features():
    src = LiveSyntheticSource(0, d=16)
    src.va = 1
    on = [src.next() for _ in range(25)]
    src.va = 0
    off = [src.next() for _ in range(25)]
    assert all(s.va == 1 for s in on)
    assert all(s.va == 0 for s in off)
    # endless stream: indices keep counting across the toggle
    assert off[-1].step_index == 49


def test_live_source_identity_switch():
    src = LiveSyntheticSource(0, d=16)
    src.identity = 3
    assert src.next().identity == 3


def test_condition_record_round_trip(tmp_path):
    steps = list(SyntheticConditionSource(2, 1, 3.0, d=16))
    path = tmp_path / "c.jsonl"
    write_condition_records(steps, path)
    back = list(JsonlConditionSource(path))
    assert len(back) == len(steps)
    for a, b in zip(steps, back):
        np.testing.assert_allclose(b.f_speech, a.f_speech, atol=1e-12)
        assert b.va == a.va and b.identity == a.identity


def test_stream_helper_matches_source():
    a = list(synth_condition_stream(1, 0, 2.0, d=16))
    b = list(SyntheticConditionSource(1, 0, 2.0, d=16))
    assert len(a) == len(b)
    np.testing.assert_array_equal(a[0].f_speech, b[0].f_speech)
