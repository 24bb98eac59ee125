"""Deterministic conversational scripts for the synthetic corpus.

A script fixes everything both the motion generator and the condition
simulator must agree on: speaking/listening spans, beat times, the
speech-energy envelope and per-token voice-activity / beat flags.  Both
sides derive it from the same (seed, identity) key so conditions and
motion stay time-aligned by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import FPS, FRAMES_PER_STEP


@dataclass
class Script:
    identity: int
    duration_s: float
    n_frames: int
    spans: list                 # (start_s, end_s, speaking: bool)
    beats: np.ndarray           # beat times in seconds (speaking spans only)
    envelope: np.ndarray        # per-frame speech energy in [0, 1]
    va_steps: np.ndarray        # per-token-step {0,1}
    beat_steps: np.ndarray      # per-token-step {0,1}
    stroke_phase: np.ndarray    # per-frame phase in [0,1) within the beat gap
    stroke_len: np.ndarray      # per-frame gap length in seconds (0 outside)

    @property
    def n_steps(self) -> int:
        return int(np.ceil(self.n_frames / FRAMES_PER_STEP))


def script_rng(seed: int, identity: int, salt: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, identity, salt])))


def make_script(seed: int, identity: int, duration_s: float) -> Script:
    rng = script_rng(seed, identity)
    n_frames = int(round(duration_s * FPS))
    t_frames = np.arange(n_frames) / FPS

    spans = []
    t, speaking = 0.0, bool(rng.integers(0, 2))
    while t < duration_s:
        length = float(rng.uniform(2.0, 8.0))
        spans.append((t, min(t + length, duration_s), speaking))
        t += length
        speaking = not speaking

    beats = []
    for s0, s1, speak in spans:
        if not speak:
            continue
        bt = s0
        while bt < s1 - 0.4:
            beats.append(bt)
            bt += float(rng.uniform(0.4, 0.8))
        beats.append(bt)
    beats = np.asarray(beats, dtype=np.float64)

    speaking_mask = np.zeros(n_frames, dtype=bool)
    for s0, s1, speak in spans:
        if speak:
            speaking_mask |= (t_frames >= s0) & (t_frames < s1)

    # smooth positive energy while speaking, zero while listening
    raw = 0.65 + 0.35 * np.sin(2 * np.pi * 0.9 * t_frames + rng.uniform(0, 2 * np.pi))
    envelope = np.where(speaking_mask, raw, 0.0)

    # per-frame stroke phase within the enclosing beat gap
    stroke_phase = np.zeros(n_frames)
    stroke_len = np.zeros(n_frames)
    for b0, b1 in zip(beats[:-1], beats[1:]):
        if b1 - b0 > 0.81:       # gap spans a listening break
            continue
        sel = (t_frames >= b0) & (t_frames < b1)
        stroke_phase[sel] = (t_frames[sel] - b0) / (b1 - b0)
        stroke_len[sel] = b1 - b0

    n_steps = int(np.ceil(n_frames / FRAMES_PER_STEP))
    step_mid = (np.arange(n_steps) + 0.5) * FRAMES_PER_STEP / FPS
    va_steps = np.zeros(n_steps, dtype=np.int64)
    for s0, s1, speak in spans:
        if speak:
            va_steps |= ((step_mid >= s0) & (step_mid < s1)).astype(np.int64)
    step_edges = np.arange(n_steps + 1) * FRAMES_PER_STEP / FPS
    beat_steps = np.zeros(n_steps, dtype=np.int64)
    for b in beats:
        idx = int(np.searchsorted(step_edges, b, side="right")) - 1
        if 0 <= idx < n_steps:
            beat_steps[idx] = 1

    return Script(identity=identity, duration_s=duration_s, n_frames=n_frames,
                  spans=spans, beats=beats, envelope=envelope,
                  va_steps=va_steps, beat_steps=beat_steps,
                  stroke_phase=stroke_phase, stroke_len=stroke_len)
