import numpy as np
import pytest

from gestream import autodiff as ad
from gestream.autodiff import Tensor
from gestream.codec import RegionCodec
from gestream.conditions import SyntheticConditionSource, level_pool
from gestream.config import PRESETS, GeneratorConfig, codec_config
from gestream.errors import NonFiniteValue, SessionClosed
from gestream.generator import (ZERO_INIT, GenerationSession,
                                KinematicDecoder, TemporalState, cfg_mix,
                                embed_step_input, init_generator,
                                kinematic_level_logits, kinematic_masks,
                                load_generator, sample_top_p, save_generator,
                                step_rng, temporal_forward_train,
                                temporal_step)
from gestream.motion import region_widths
from gestream.pipeline import skeleton_for

TINY = PRESETS["tiny"]()
CFG = TINY.generator


def _params(cfg=CFG, seed=0):
    return init_generator(cfg, seed=seed)


def _cond_rows(cfg, t, seed=0):
    src = SyntheticConditionSource(seed, 0, t / 12.5 + 1.0, d=cfg.d_model,
                                   k_speech=cfg.k_speech, k_text=cfg.k_text)
    steps = [src.next() for _ in range(t)]
    speech = np.stack([s.f_speech for s in steps])
    text = np.stack([s.f_text for s in steps])
    return steps, speech, text


def _untrained_codecs(preset=TINY):
    spec = skeleton_for(preset)
    wu, wl, wf = region_widths(spec)
    widths = {"upper": wu, "lower": wl, "face": wf}
    return {r: RegionCodec(codec_config(preset, r, widths[r]),
                           rng=np.random.default_rng(50 + i))
            for i, r in enumerate(("upper", "lower", "face"))}, spec


# -- temporal axis -----------------------------------------------------------

def test_temporal_incremental_matches_full():
    t = 60
    params = _params()
    rng = np.random.default_rng(1)
    rows = rng.integers(0, CFG.v_codes, size=(t, CFG.k_total))
    steps, speech, text = _cond_rows(CFG, t)
    pooled_s = Tensor(speech.sum(axis=1)[None])
    pooled_t = Tensor(text.sum(axis=1)[None])
    with ad.no_grad():
        h_full, logits_full = temporal_forward_train(
            params, CFG, Tensor(rows[None]).data.astype(np.int64),
            pooled_s, pooled_t, np.array([0]))
    state = TemporalState(CFG)
    max_err = 0.0
    for i in range(t):
        prev = ZERO_INIT if i == 0 else rows[i - 1]
        x_in = embed_step_input(params, CFG, prev, 0)
        sp, tx = level_pool(steps[i])
        h_t, lg = temporal_step(params, CFG, state, x_in, sp, tx)
        max_err = max(max_err,
                      np.abs(h_t - h_full.data[0, i]).max(),
                      np.abs(lg - logits_full.data[0, i]).max())
    assert max_err <= 1e-4


def test_self_window_limits_token_influence():
    # with a single layer, a token stops influencing logits once it falls
    # out of the 25-step attention window
    cfg = GeneratorConfig(d_model=16, v_codes=8, d_cond=16, n_identities=2,
                          temporal_layers=1, temporal_heads=1,
                          kinematic_layers=1, kinematic_heads=1)
    params = _params(cfg, seed=2)
    t = cfg.self_window + 10
    rng = np.random.default_rng(3)
    rows = rng.integers(0, cfg.v_codes, size=(t, cfg.k_total))
    rows2 = rows.copy()
    rows2[0] = (rows2[0] + 1) % cfg.v_codes

    def run(r):
        _, speech, text = _cond_rows(cfg, t)
        with ad.no_grad():
            _, lg = temporal_forward_train(
                params, cfg, r[None], Tensor(speech.sum(1)[None]),
                Tensor(text.sum(1)[None]), np.array([0]))
        return lg.data[0]

    a, b = run(rows), run(rows2)
    # row 0 is input at step 1; it leaves the window of step t for
    # t - 1 >= self_window
    assert np.abs(a[1] - b[1]).max() > 0.0
    inside = np.abs(a[1:cfg.self_window + 1] - b[1:cfg.self_window + 1])
    assert inside.max() > 0.0
    np.testing.assert_array_equal(a[cfg.self_window + 1:],
                                  b[cfg.self_window + 1:])


def test_condition_causality_in_training_forward():
    # perturbing the condition at step t leaves logits for steps < t intact
    t = 20
    params = _params()
    rng = np.random.default_rng(4)
    rows = rng.integers(0, CFG.v_codes, size=(1, t, CFG.k_total))
    _, speech, text = _cond_rows(CFG, t)
    s1 = speech.sum(1)[None].copy()
    s2 = s1.copy()
    s2[0, 12] += 100.0
    with ad.no_grad():
        _, a = temporal_forward_train(params, CFG, rows, Tensor(s1),
                                      Tensor(text.sum(1)[None]), np.array([0]))
        _, b = temporal_forward_train(params, CFG, rows, Tensor(s2),
                                      Tensor(text.sum(1)[None]), np.array([0]))
    np.testing.assert_array_equal(a.data[0, :12], b.data[0, :12])
    assert np.abs(a.data[0, 12:] - b.data[0, 12:]).max() > 0.0


# -- kinematic axis ----------------------------------------------------------

def test_kinematic_masks_shape_and_gate():
    mask, gate, lower = kinematic_masks(CFG)
    n = CFG.k_total - 1
    assert mask.shape == (n, n) and gate.shape == (n, 1)
    # positions predicting lower levels have their cross-attention off
    for p in range(n):
        is_lower = CFG.level_region(p + 1) == "lower"
        assert (gate[p, 0] == 0.0) == is_lower
        assert lower[p] == is_lower


def test_kinematic_decoder_matches_full_recompute():
    params = _params()
    rng = np.random.default_rng(5)
    h_t = rng.normal(size=CFG.d_model)
    ident = params["ident"].data[1]
    step = SyntheticConditionSource(0, 1, 2.0, d=CFG.d_model,
                                    k_speech=CFG.k_speech,
                                    k_text=CFG.k_text).next()
    masks = kinematic_masks(CFG)
    dec = KinematicDecoder(params, CFG, h_t, ident, step.f_speech,
                           step.f_text, masks)
    prefix = []
    for lvl in range(CFG.k_total - 1):
        tok = int(rng.integers(0, CFG.v_codes))
        prefix.append(tok)
        fast = dec.feed(tok)
        slow = kinematic_level_logits(params, CFG, h_t, ident, prefix,
                                      step.f_speech, step.f_text, masks)
        assert np.abs(fast - slow).max() <= 1e-10


def test_lower_levels_ignore_speech_and_text():
    params = _params()
    rng = np.random.default_rng(6)
    h_t = rng.normal(size=CFG.d_model)
    ident = params["ident"].data[0]
    step = SyntheticConditionSource(0, 0, 2.0, d=CFG.d_model,
                                    k_speech=CFG.k_speech,
                                    k_text=CFG.k_text).next()
    masks = kinematic_masks(CFG)
    tokens = rng.integers(0, CFG.v_codes, size=CFG.k_total - 1)
    dec_a = KinematicDecoder(params, CFG, h_t, ident, step.f_speech,
                             step.f_text, masks)
    dec_b = KinematicDecoder(params, CFG, h_t, ident,
                             step.f_speech + 100.0, step.f_text - 50.0,
                             masks)
    saw_lower = saw_diff = False
    for p, tok in enumerate(tokens):
        a = dec_a.feed(int(tok))
        b = dec_b.feed(int(tok))
        if CFG.level_region(p + 1) == "lower":
            np.testing.assert_array_equal(a, b)  # bit-identical
            saw_lower = True
        elif np.abs(a - b).max() > 0.0:
            saw_diff = True
    assert saw_lower and saw_diff


# -- sampling ----------------------------------------------------------------

def test_top_p_limits():
    logits = np.log(np.array([0.5, 0.3, 0.15, 0.05]))
    rng = np.random.default_rng(7)
    # p -> 0 keeps only the argmax
    assert all(sample_top_p(logits, 1e-9, 1.0, rng) == 0 for _ in range(20))
    # p = 1 keeps everything: all four tokens show up
    draws = {sample_top_p(logits, 1.0, 1.0, rng) for _ in range(400)}
    assert draws == {0, 1, 2, 3}


def test_top_p_exact_mass_prefix():
    # nucleus {0.5, 0.3} has exact mass 0.8; token 2 must stay excluded
    logits = np.log(np.array([0.5, 0.3, 0.15, 0.05]))
    rng = np.random.default_rng(8)
    draws = {sample_top_p(logits, 0.8, 1.0, rng) for _ in range(500)}
    assert draws == {0, 1}


def test_top_p_validation():
    rng = np.random.default_rng(9)
    with pytest.raises(NonFiniteValue):
        sample_top_p(np.array([0.0, np.nan]), 0.9, 1.0, rng)
    with pytest.raises(ValueError):
        sample_top_p(np.zeros(4), 0.0, 1.0, rng)
    with pytest.raises(ValueError):
        sample_top_p(np.zeros(4), 1.5, 1.0, rng)
    with pytest.raises(ValueError):
        sample_top_p(np.zeros(4), 0.9, 0.0, rng)


def test_cfg_mix_endpoints():
    c = np.array([1.0, 2.0])
    u = np.array([0.0, -2.0])
    np.testing.assert_array_equal(cfg_mix(c, u, 1.0), c)
    np.testing.assert_array_equal(cfg_mix(c, u, 0.0), u)
    np.testing.assert_array_equal(cfg_mix(c, u, 2.0), 2 * c - u)


def test_step_rng_keyed_by_step():
    a = step_rng(0, 1).random(4)
    b = step_rng(0, 1).random(4)
    c = step_rng(0, 2).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- session -----------------------------------------------------------------

def test_session_deterministic_and_two_frames_per_step():
    codecs, _ = _untrained_codecs()
    params = _params()

    def run():
        src = SyntheticConditionSource(1, 0, 3.0, d=CFG.d_model,
                                       k_speech=CFG.k_speech,
                                       k_text=CFG.k_text)
        sess = GenerationSession(params, CFG, codecs=codecs, seed=4)
        out = []
        for _ in range(12):
            row, frames, va, _ = sess.generate_step(src.next())
            assert all(frames[r].shape[0] == 2 for r in frames)
            out.append((row, frames, va))
        return out

    a, b = run(), run()
    for (ra, fa, va), (rb, fb, vb) in zip(a, b):
        np.testing.assert_array_equal(ra, rb)
        assert va == vb
        for r in fa:
            np.testing.assert_array_equal(fa[r], fb[r])


def test_session_replay_causality():
    # perturbing the condition at step 6 leaves steps 0-5 bit-identical
    codecs, _ = _untrained_codecs()
    params = _params()

    def run(perturb):
        src = SyntheticConditionSource(2, 1, 3.0, d=CFG.d_model,
                                       k_speech=CFG.k_speech,
                                       k_text=CFG.k_text)
        sess = GenerationSession(params, CFG, codecs=codecs, seed=5)
        out = []
        for i in range(12):
            cond = src.next()
            if perturb and i == 6:
                cond.f_speech = cond.f_speech + 10.0
            out.append(sess.generate_step(cond))
        return out

    base, pert = run(False), run(True)
    for i in range(6):
        np.testing.assert_array_equal(base[i][0], pert[i][0])
        assert base[i][2] == pert[i][2]
        for r in base[i][1]:
            np.testing.assert_array_equal(base[i][1][r], pert[i][1][r])
    assert any(not np.array_equal(base[i][0], pert[i][0])
               or base[i][2] != pert[i][2] for i in range(6, 12))


def test_session_cfg_scale_changes_mid_stream():
    codecs, _ = _untrained_codecs()
    params = _params()
    src = SyntheticConditionSource(3, 0, 3.0, d=CFG.d_model,
                                   k_speech=CFG.k_speech, k_text=CFG.k_text)
    sess = GenerationSession(params, CFG, codecs=codecs, seed=6)
    for _ in range(3):
        sess.generate_step(src.next())
    sess.cfg_scale = 3.0  # must not desync the unconditional caches
    for _ in range(3):
        sess.generate_step(src.next())
    assert sess.step == 6


def test_session_close_rejects_steps():
    codecs, _ = _untrained_codecs()
    sess = GenerationSession(_params(), CFG, codecs=codecs, seed=0)
    src = SyntheticConditionSource(0, 0, 2.0, d=CFG.d_model,
                                   k_speech=CFG.k_speech, k_text=CFG.k_text)
    sess.close()
    with pytest.raises(SessionClosed):
        sess.step_tokens(src.next())


def test_generator_checkpoint_round_trip(tmp_path):
    params = _params()
    path = tmp_path / "g.ckpt"
    save_generator(path, params, CFG)
    loaded, cfg2 = load_generator(path)
    assert cfg2 == CFG
    for k in params:
        np.testing.assert_array_equal(loaded[k].data, params[k].data)
