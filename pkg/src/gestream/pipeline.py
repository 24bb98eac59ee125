"""End-to-end plumbing: checkpoint bundles, stream generation and the
evaluation suite shared by the CLI, the service and the test harness.

A checkpoint bundle directory holds preset.json, codec_{region}.ckpt,
generator.ckpt and training_log.csv.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .codec import load_codec_file, save_codec
from .conditions import SyntheticConditionSource
from .config import (FPS, FRAMES_PER_STEP, Preset, codec_config,
                     preset_from_json, preset_to_json)
from .errors import CheckpointMissing
from .generator import GenerationSession, load_generator, save_generator
from .geometry import SkeletonSpec, default_skeleton
from .metrics import (beat_align, facial_mse, fgd, fit_extractor_on_corpus,
                      l1_div, latency_report, mpjpe)
from .motion import (MotionSequence, corpus_from_config, region_widths,
                     split_regions)
from .training import (REGIONS, encode_sample_tokens, train_codec,
                       train_generator, write_training_log)

REGION_SPLIT = REGIONS


def skeleton_for(preset: Preset) -> SkeletonSpec:
    return default_skeleton(expr_dim=preset.corpus.expr_dim)


# -- training orchestration ----------------------------------------------

def train_codecs(preset: Preset, corpus, spec: SkeletonSpec,
                 log_hook=None) -> dict:
    wu, wl, wf = region_widths(spec)
    widths = {"upper": wu, "lower": wl, "face": wf}
    codecs = {}
    for region in REGIONS:
        cfg = codec_config(preset, region, widths[region])
        hook = (lambda s, l, c, _r=region: log_hook(_r, s, l, c)) \
            if log_hook else None
        codecs[region] = train_codec(corpus, region, cfg, preset.training,
                                     spec, log_hook=hook)
    return codecs


def train_bundle(preset: Preset, out_dir, log_hook=None) -> Path:
    """Full pipeline: corpus, codecs then generator; writes a bundle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = skeleton_for(preset)
    corpus = corpus_from_config(preset.corpus, spec)
    codecs = train_codecs(preset, corpus, spec, log_hook=log_hook)
    save_codecs(codecs, out, preset)
    params, log = train_generator(corpus, codecs, preset.generator,
                                  preset.training, preset.corpus.seed,
                                  log_hook=log_hook)
    save_generator(out / "generator.ckpt", params, preset.generator)
    write_training_log(log, out / "training_log.csv")
    return out


def save_codecs(codecs: dict, out_dir, preset: Preset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "preset.json").write_text(preset_to_json(preset))
    for region, codec in codecs.items():
        save_codec(out / f"codec_{region}.ckpt", codec)


def load_bundle(checkpoint_dir):
    """Returns (preset, spec, codecs, generator params, generator cfg)."""
    root = Path(checkpoint_dir)
    preset_path = root / "preset.json"
    if not preset_path.exists():
        raise CheckpointMissing(f"no preset.json under {root}")
    preset = preset_from_json(preset_path.read_text())
    spec = skeleton_for(preset)
    codecs = {r: load_codec_file(root / f"codec_{r}.ckpt") for r in REGIONS}
    params, gen_cfg = load_generator(root / "generator.ckpt")
    return preset, spec, codecs, params, gen_cfg


# -- stream generation ---------------------------------------------------

def generate_stream(params, gen_cfg, codecs, spec: SkeletonSpec,
                    source, n_steps: int, seed: int = 0):
    """Runs a session over a condition source; returns (motion, va_probs,
    token rows, latency samples in ms)."""
    session = GenerationSession(params, gen_cfg, codecs=codecs, seed=seed)
    frames, va_probs, rows = [], [], []
    for _ in range(n_steps):
        cond = source.next()
        row, f, va, _ = session.generate_step(cond)
        frames.append(np.concatenate([f["upper"], f["lower"], f["face"]],
                                     axis=1))
        va_probs.append(va)
        rows.append(row)
    motion = split_regions(np.concatenate(frames, axis=0), spec)
    return motion, np.asarray(va_probs), np.asarray(rows), \
        list(session.latency_log)


def _crop(motion: MotionSequence, a: int, b: int) -> MotionSequence:
    m = copy.copy(motion)
    m.upper = motion.upper[a:b]
    m.lower = motion.lower[a:b]
    m.face = motion.face[a:b]
    return m


def speaking_span_beat_align(motion: MotionSequence, script, spec,
                             rng: np.random.Generator | None = None):
    """Mean BeatAlign over speaking spans; with an rng, also returns the
    shuffled-beat control score."""
    aligned, shuffled = [], []
    for t0, t1, speaking in script.spans:
        if not speaking or t1 - t0 < 2.0:
            continue
        a, b = int(t0 * FPS), int(t1 * FPS)
        b = min(b, motion.n_frames)
        if b - a < FPS:
            continue
        beats = script.beats[(script.beats >= t0) & (script.beats < t1)] - t0
        if beats.size == 0:
            continue
        m = _crop(motion, a, b)
        try:
            aligned.append(beat_align(m, beats, spec))
            if rng is not None:
                fake = np.sort(rng.uniform(0, t1 - t0, size=beats.size))
                shuffled.append(beat_align(m, fake, spec))
        except Exception:
            continue
    al = float(np.mean(aligned)) if aligned else float("nan")
    if rng is None:
        return al
    sh = float(np.mean(shuffled)) if shuffled else float("nan")
    return al, sh


def frozen_mean_pose(motion: MotionSequence) -> MotionSequence:
    m = copy.copy(motion)
    n = motion.n_frames
    m.upper = np.tile(motion.upper.mean(0), (n, 1))
    m.lower = np.tile(motion.lower.mean(0), (n, 1))
    m.face = np.tile(motion.face.mean(0), (n, 1))
    return m


def evaluate_bundle(preset: Preset, spec, codecs, params, gen_cfg,
                    eval_seed: int = 123, minutes: float = 1.0,
                    seed: int = 0) -> tuple:
    """Metric suite on held-out synthetic streams; returns (report dict,
    per-stream rows)."""
    from .motion import synth_corpus

    identities = preset.corpus.identities
    held_out = synth_corpus(eval_seed, identities, minutes, spec)
    extractor = fit_extractor_on_corpus(held_out, seed=seed, epochs=10)
    rng = np.random.default_rng(seed)
    rows = []
    feats_gt, feats_gen, feats_mean = [], [], []
    all_latency = []
    for sample in held_out:
        src = SyntheticConditionSource(eval_seed, sample.identity,
                                       sample.motion.n_frames / FPS,
                                       d=gen_cfg.d_model,
                                       k_speech=gen_cfg.k_speech,
                                       k_text=gen_cfg.k_text)
        n_steps = src.n_steps
        gen_motion, va_probs, _, lat = generate_stream(
            params, gen_cfg, codecs, spec, src, n_steps, seed=seed)
        va_acc = float((np.round(va_probs) ==
                        sample.script.va_steps[:len(va_probs)]).mean())
        al, sh = speaking_span_beat_align(gen_motion, sample.script, spec,
                                          rng=rng)
        # codec reconstruction quality on the GT motion
        tokens = encode_sample_tokens(codecs, sample.motion)
        rec = {}
        for r, tk in zip(REGIONS, np.split(
                tokens, np.cumsum([gen_cfg.k_upper, gen_cfg.k_lower]),
                axis=1)):
            rec[r] = codecs[r].decode_full(tk, trim_to=sample.motion.n_frames)
        recon = split_regions(np.concatenate(
            [rec["upper"], rec["lower"], rec["face"]], axis=1), spec)
        row = {
            "identity": sample.identity,
            "va_accuracy": va_acc,
            "beat_align": al,
            "beat_align_shuffled": sh,
            "l1_div_gen": l1_div(gen_motion.pose_vectors()),
            "l1_div_gt": l1_div(sample.motion.pose_vectors()),
            "mpjpe_recon": mpjpe(sample.motion, recon, spec),
            "facial_mse_recon": facial_mse(
                sample.motion.expressions(spec), recon.expressions(spec)),
            "latency_p50": latency_report(lat).p50,
            "latency_p95": latency_report(lat).p95,
        }
        rows.append(row)
        all_latency.extend(lat)
        feats_gt.append(extractor.extract(sample.motion.upper))
        feats_gen.append(extractor.extract(gen_motion.upper))
        feats_mean.append(extractor.extract(
            frozen_mean_pose(sample.motion).upper))
    f_gt = np.concatenate(feats_gt)
    f_gen = np.concatenate(feats_gen)
    f_mean = np.concatenate(feats_mean)
    report = {
        "fgd": fgd(f_gt, f_gen),
        "fgd_mean_pose_baseline": fgd(f_gt, f_mean),
        "beat_align": float(np.nanmean([r["beat_align"] for r in rows])),
        "beat_align_shuffled": float(np.nanmean(
            [r["beat_align_shuffled"] for r in rows])),
        "va_accuracy": float(np.mean([r["va_accuracy"] for r in rows])),
        "l1_div": float(np.mean([r["l1_div_gen"] for r in rows])),
        "l1_div_gt": float(np.mean([r["l1_div_gt"] for r in rows])),
        "mpjpe": float(np.mean([r["mpjpe_recon"] for r in rows])),
        "facial_mse": float(np.mean([r["facial_mse_recon"] for r in rows])),
        "latency": latency_report(all_latency).to_dict(),
    }
    return report, rows


def corpus_digest(manifest_path) -> str:
    """Stable content hash of a written corpus directory."""
    import hashlib

    root = Path(manifest_path).parent
    h = hashlib.sha256()
    manifest = json.loads(Path(manifest_path).read_text())
    h.update(json.dumps(manifest, sort_keys=True).encode())
    for entry in manifest["samples"]:
        for key in ("motion", "conditions"):
            f = root / entry[key]
            if f.exists():
                h.update(f.read_bytes())
    return h.hexdigest()
