"""Speech/text condition simulator and the condition record format.

Stands in for the speech-text foundation model: emits one ConditionStep
per 80 ms with per-level speech/text embedding stacks, a voice-activity
flag and a beat flag.  Speaking steps are drawn from identity- and
beat-phase-conditioned mixture components; listening steps form a
distinct low-energy cluster, so the downstream generator has learnable
signal for every auxiliary objective.

A future adapter for a real foundation model is a ConditionSource that
reads the same JSON-lines schema from a socket; only the synthetic and
file-backed sources are implemented here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import FPS, FRAMES_PER_STEP
from .errors import ShapeError
from .script import Script, make_script, script_rng

_PROJECTION_KEY = 9001      # fixed key: projections are shared across streams
_FEATURE_DIM = 24
_MAX_IDENTITIES = 16


@dataclass
class ConditionStep:
    f_speech: np.ndarray        # (K_speech, d)
    f_text: np.ndarray          # (K_text, d)
    va: int
    beat: int
    identity: int
    step_index: int

    def validate(self):
        if self.f_speech.ndim != 2 or self.f_text.ndim != 2:
            raise ShapeError("embedding stacks must be 2-d")
        if self.f_speech.shape[1] != self.f_text.shape[1]:
            raise ShapeError("speech/text embedding widths differ")


def level_pool(step: ConditionStep):
    """Sum each embedding stack across its levels -> (speech_vec, text_vec)."""
    return step.f_speech.sum(axis=0), step.f_text.sum(axis=0)


def null_condition(null_speech: np.ndarray, null_text: np.ndarray,
                   step_index: int = 0) -> ConditionStep:
    """Unconditional-branch step built from learned null embeddings."""
    return ConditionStep(f_speech=np.array(null_speech, dtype=np.float64),
                         f_text=np.array(null_text, dtype=np.float64),
                         va=0, beat=0, identity=0, step_index=step_index)


class ConditionSource:
    """Ordered stream of ConditionSteps.

    next() raises StopIteration once a finite stream is exhausted.
    """

    realtime = False
    finite = True

    def next(self) -> ConditionStep:
        raise NotImplementedError

    def __iter__(self):
        while True:
            try:
                yield self.next()
            except StopIteration:
                return


def _level_projections(k_levels: int, d: int) -> np.ndarray:
    """Fixed random maps from script features to embedding space, (K, F, d)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([_PROJECTION_KEY, k_levels, d])))
    return rng.standard_normal((k_levels, _FEATURE_DIM, d)) / np.sqrt(_FEATURE_DIM)


def _step_features(va: int, beat: int, phase: float, envelope: float,
                   stroke_len: float, identity: int) -> np.ndarray:
    f = np.zeros(_FEATURE_DIM)
    f[0] = float(va)
    f[1] = float(beat)
    f[2] = np.sin(2 * np.pi * phase)
    f[3] = np.cos(2 * np.pi * phase)
    f[4] = envelope
    f[5] = stroke_len
    f[6] = 1.0
    f[7 + (identity % _MAX_IDENTITIES)] = 1.0
    return f


class SyntheticConditionSource(ConditionSource):
    """Finite stream derived from the same script as the synthetic corpus."""

    def __init__(self, seed: int, identity: int, duration_s: float,
                 d: int = 256, k_speech: int = 8, k_text: int = 1,
                 noise: float = 0.05):
        if duration_s <= 0:
            raise ShapeError("duration must be positive")
        self.script = make_script(seed, identity, duration_s)
        self.identity = identity
        self.d = d
        self.k_speech = k_speech
        self.k_text = k_text
        self.noise = noise
        self._speech_proj = _level_projections(k_speech, d)
        self._text_proj = _level_projections(k_text, d) * 0.5
        self._rng = script_rng(seed, identity, salt=2)
        self._t = 0

    @property
    def n_steps(self) -> int:
        return self.script.n_steps

    def next(self) -> ConditionStep:
        if self._t >= self.script.n_steps:
            raise StopIteration
        step = step_from_script(self.script, self._t, self._speech_proj,
                                self._text_proj, self.noise, self._rng)
        self._t += 1
        return step


def step_from_script(script: Script, t: int, speech_proj, text_proj,
                     noise: float, rng: np.random.Generator) -> ConditionStep:
    frame = min(t * FRAMES_PER_STEP, script.n_frames - 1)
    va = int(script.va_steps[t])
    beat = int(script.beat_steps[t])
    phase = float(script.stroke_phase[frame])
    env = float(script.envelope[frame])
    slen = float(script.stroke_len[frame])
    feats = _step_features(va, beat, phase, env, slen, script.identity)
    scale = 1.0 if va else 0.2
    speech = scale * (feats @ speech_proj) + noise * rng.standard_normal(
        (speech_proj.shape[0], speech_proj.shape[2]))
    text = scale * (feats @ text_proj) + noise * rng.standard_normal(
        (text_proj.shape[0], text_proj.shape[2]))
    return ConditionStep(f_speech=speech, f_text=text, va=va, beat=beat,
                         identity=script.identity, step_index=t)


def synth_condition_stream(seed: int, identity: int, duration_s: float,
                           d: int = 256, k_speech: int = 8,
                           k_text: int = 1) -> SyntheticConditionSource:
    return SyntheticConditionSource(seed, identity, duration_s, d=d,
                                    k_speech=k_speech, k_text=k_text)


class LiveSyntheticSource(ConditionSource):
    """Endless synthetic stream whose voice-activity and identity can be
    steered at runtime; used by the streaming service as the stand-in for
    a live foundation model."""

    realtime = True
    finite = False

    def __init__(self, seed: int, identity: int = 0, d: int = 256,
                 k_speech: int = 8, k_text: int = 1, noise: float = 0.05):
        self.identity = identity
        self.va = 1
        self.d = d
        self.noise = noise
        self._speech_proj = _level_projections(k_speech, d)
        self._text_proj = _level_projections(k_text, d) * 0.5
        self._rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 777])))
        self._t = 0
        self._next_beat = 0.0
        self._prev_beat = 0.0
        self._gap = 0.6

    def next(self) -> ConditionStep:
        now = self._t * FRAMES_PER_STEP / FPS
        beat = 0
        if self.va and now >= self._next_beat:
            beat = 1
            self._prev_beat = self._next_beat
            self._gap = float(self._rng.uniform(0.4, 0.8))
            self._next_beat = now + self._gap
        if self.va:
            phase = min((now - self._prev_beat) / self._gap, 1.0)
            env = 0.65 + 0.35 * np.sin(2 * np.pi * 0.9 * now)
            slen = self._gap
        else:
            phase, env, slen = 0.0, 0.0, 0.0
            self._next_beat = now   # resume beats immediately on unmute
        feats = _step_features(self.va, beat, phase, env, slen, self.identity)
        scale = 1.0 if self.va else 0.2
        speech = scale * (feats @ self._speech_proj) + self.noise * \
            self._rng.standard_normal((self._speech_proj.shape[0], self.d))
        text = scale * (feats @ self._text_proj) + self.noise * \
            self._rng.standard_normal((self._text_proj.shape[0], self.d))
        step = ConditionStep(f_speech=speech, f_text=text, va=self.va,
                             beat=beat, identity=self.identity,
                             step_index=self._t)
        self._t += 1
        return step


# -- condition record files --------------------------------------------------

def write_condition_records(steps, path) -> None:
    with open(path, "w") as fh:
        for s in steps:
            fh.write(json.dumps({"t": s.step_index, "va": s.va, "beat": s.beat,
                                 "identity": s.identity,
                                 "speech": s.f_speech.tolist(),
                                 "text": s.f_text.tolist()}) + "\n")


class JsonlConditionSource(ConditionSource):
    """Replays a recorded condition file (the bench / adapter schema)."""

    def __init__(self, path):
        self._steps = []
        with open(path) as fh:
            for line in fh:
                raw = json.loads(line)
                self._steps.append(ConditionStep(
                    f_speech=np.asarray(raw["speech"], dtype=np.float64),
                    f_text=np.asarray(raw["text"], dtype=np.float64),
                    va=int(raw["va"]), beat=int(raw["beat"]),
                    identity=int(raw["identity"]), step_index=int(raw["t"])))
        self._i = 0

    def next(self) -> ConditionStep:
        if self._i >= len(self._steps):
            raise StopIteration
        s = self._steps[self._i]
        self._i += 1
        return s
