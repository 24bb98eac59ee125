"""Evaluation metrics: FGD, BeatAlign, L1 divergence, MPJPE, facial MSE,
and latency statistics.

FGD features come from a small convolutional autoencoder fitted on
held-out ground-truth upper-body windows and then frozen, so absolute
FGD values are internal to this repository; only orderings and the
zero/identity cases are meaningful across runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor
from .errors import InsufficientSamples, NoBeats, ShapeError
from .geometry import SkeletonSpec
from .motion import MotionSequence

FEATURE_DIM = 64
WINDOW_FRAMES = 64


# -- gesture feature extractor ---------------------------------------------

class GestureFeatureExtractor:
    """Causal conv autoencoder over 64-frame upper-body windows.

    The 4-layer strided encoder maps a window to one 64-dim feature
    vector; a mirrored decoder exists only for the reconstruction
    objective during fitting.  Frozen after fit().
    """

    def __init__(self, in_width: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_width = in_width
        self.mu = np.zeros(in_width)
        self.sd = np.ones(in_width)
        p: dict = {}
        # channels double: normalized pose plus per-frame velocity
        widths = [2 * in_width, 64, 64, 64, 64]
        for i in range(4):
            p[f"enc{i}.w"] = _param(rng, (4, widths[i], widths[i + 1]))
            p[f"enc{i}.b"] = _param_zeros(widths[i + 1])
        p["proj.w"] = _param(rng, (64, FEATURE_DIM))
        p["proj.b"] = _param_zeros(FEATURE_DIM)
        p["dproj.w"] = _param(rng, (FEATURE_DIM, 4 * 64))
        p["dproj.b"] = _param_zeros(4 * 64)
        for i in range(4):
            w_out = widths[3 - i]
            p[f"dec{i}.w"] = _param(rng, (4, 64, w_out))
            p[f"dec{i}.b"] = _param_zeros(w_out)
        self.params = p
        self.frozen = False

    def _augment(self, wins: np.ndarray) -> np.ndarray:
        """Normalizes (B, 64, C) windows and appends velocity channels."""
        z = (wins - self.mu) / self.sd
        vel = np.diff(z, axis=1, prepend=z[:, :1])
        return np.concatenate([z, vel], axis=-1)

    def _encode(self, x):
        """(B, 64, C) windows -> (B, FEATURE_DIM)."""
        h = x
        for i in range(4):
            h = ad.gelu(ad.conv1d_causal(h, self.params[f"enc{i}.w"],
                                         self.params[f"enc{i}.b"], stride=2))
        h = ad.tmean(h, axis=1)
        return ad.matmul(h, self.params["proj.w"]) + self.params["proj.b"]

    def _decode(self, z, b):
        h = ad.matmul(z, self.params["dproj.w"]) + self.params["dproj.b"]
        h = ad.reshape(h, (b, 4, 64))
        for i in range(4):
            h = ad.conv_transpose1d_causal(h, self.params[f"dec{i}.w"],
                                           self.params[f"dec{i}.b"], stride=2)
            if i < 3:
                h = ad.gelu(h)
        return h

    def fit(self, windows: np.ndarray, epochs: int = 30, batch: int = 16,
            lr: float = 1e-3, seed: int = 0):
        """Reconstruction fit on (N, 64, C) held-out GT windows."""
        if windows.shape[0] < 2:
            raise InsufficientSamples("need at least 2 windows to fit")
        flat = windows.reshape(-1, windows.shape[-1])
        self.mu = flat.mean(axis=0)
        self.sd = flat.std(axis=0) + 1e-6
        windows = self._augment(windows)
        rng = np.random.default_rng(seed)
        opt = AdamW(self.params, lr=lr, weight_decay=0.0)
        for _ in range(epochs):
            order = rng.permutation(windows.shape[0])
            for s in range(0, len(order), batch):
                x = windows[order[s:s + batch]]
                xt = Tensor(x)
                z = self._encode(xt)
                recon = self._decode(z, x.shape[0])
                diff = recon - xt
                loss = ad.tmean(diff * diff)
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.frozen = True
        return self

    def extract(self, upper: np.ndarray, stride: int = 32) -> np.ndarray:
        """(N, C) upper-body frames -> (n_windows, FEATURE_DIM) features."""
        wins = sliding_windows(upper, WINDOW_FRAMES, stride)
        if wins.shape[0] == 0:
            raise InsufficientSamples("sequence shorter than one window")
        with ad.no_grad():
            return self._encode(Tensor(self._augment(wins))).data


def _param(rng, shape):
    t = Tensor(rng.standard_normal(shape) / np.sqrt(np.prod(shape[:-1])))
    t.requires_grad = True
    return t


def _param_zeros(n):
    t = Tensor(np.zeros(n))
    t.requires_grad = True
    return t


def sliding_windows(frames: np.ndarray, length: int, stride: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    starts = range(0, max(n - length + 1, 0), stride)
    return np.stack([frames[s:s + length] for s in starts]) if n >= length \
        else np.zeros((0, length) + frames.shape[1:])


def fit_extractor_on_corpus(corpus, seed: int = 0,
                            epochs: int = 20) -> GestureFeatureExtractor:
    """Fits the FGD extractor on a corpus of ground-truth samples."""
    wins = np.concatenate([sliding_windows(s.motion.upper, WINDOW_FRAMES, 32)
                           for s in corpus], axis=0)
    ex = GestureFeatureExtractor(wins.shape[-1], seed=seed)
    return ex.fit(wins, epochs=epochs, seed=seed)


# -- distribution metrics ----------------------------------------------------

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.where(vals < -1e-8, 0.0, np.maximum(vals, 0.0))
    return (vecs * np.sqrt(vals)) @ vecs.T


def fgd(features_real: np.ndarray, features_gen: np.ndarray) -> float:
    """Frechet distance between two feature sets:
    ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))."""
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_gen, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InsufficientSamples("need >= 2 feature vectors per side")
    mu1, mu2 = a.mean(0), b.mean(0)
    s1 = np.cov(a, rowvar=False)
    s2 = np.cov(b, rowvar=False)
    s1h = _psd_sqrt(s1)
    cross = _psd_sqrt(s1h @ s2 @ s1h)    # Tr((S1 S2)^(1/2)) = Tr(cross)
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2)
                 - 2.0 * np.trace(cross))


# -- motion metrics -----------------------------------------------------------

def gesture_beats(motion: MotionSequence, spec: SkeletonSpec,
                  percentile: float = 30.0) -> np.ndarray:
    """Beat times (s): local minima of mean wrist speed below its
    `percentile`-th percentile."""
    pos = motion.joint_positions(spec)
    wrists = spec.joints_named("wrist")
    if not wrists:
        raise ShapeError("skeleton has no wrist joints")
    v = np.diff(pos[:, wrists], axis=0) * motion.fps       # (N-1, W, 3)
    speed = np.linalg.norm(v, axis=-1).mean(axis=-1)       # (N-1,)
    if speed.size < 3:
        raise NoBeats("sequence too short for beat detection")
    thresh = np.percentile(speed, percentile)
    idx = [i for i in range(1, speed.size - 1)
           if speed[i] <= speed[i - 1] and speed[i] <= speed[i + 1]
           and speed[i] <= thresh]
    if not idx:
        raise NoBeats("no wrist-speed minima below threshold")
    return (np.asarray(idx, dtype=np.float64) + 0.5) / motion.fps


def beat_align(motion: MotionSequence, beat_times: np.ndarray,
               spec: SkeletonSpec, sigma: float = 0.1) -> float:
    """Mean Gaussian kernel score of gesture beats against audio beats."""
    beat_times = np.asarray(beat_times, dtype=np.float64)
    if beat_times.size == 0:
        raise NoBeats("no audio beats")
    gb = gesture_beats(motion, spec)
    deltas = np.abs(gb[:, None] - beat_times[None, :]).min(axis=1)
    return float(np.exp(-deltas ** 2 / (2.0 * sigma ** 2)).mean())


def l1_div(pose_vectors: np.ndarray) -> float:
    """Mean L1 distance of each pose to the sequence-mean pose."""
    x = np.asarray(pose_vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("pose vectors must be (N, D)")
    return float(np.abs(x - x.mean(axis=0)).sum(axis=1).mean())


def mpjpe(gt: MotionSequence, pred: MotionSequence,
          spec: SkeletonSpec) -> float:
    """Mean per-joint position error (meters) of FK joint locations."""
    a = gt.joint_positions(spec)
    b = pred.joint_positions(spec)
    n = min(a.shape[0], b.shape[0])
    if n == 0:
        raise InsufficientSamples("empty sequences")
    return float(np.linalg.norm(a[:n] - b[:n], axis=-1).mean())


def facial_mse(gt_expr: np.ndarray, pred_expr: np.ndarray) -> float:
    a = np.asarray(gt_expr, dtype=np.float64)
    b = np.asarray(pred_expr, dtype=np.float64)
    n = min(a.shape[0], b.shape[0])
    if n == 0:
        raise InsufficientSamples("empty expression tracks")
    return float(((a[:n] - b[:n]) ** 2).mean())


# -- latency ----------------------------------------------------------------

@dataclass
class LatencyStats:
    p50: float
    p95: float
    mean: float
    std: float
    n: int

    def to_dict(self) -> dict:
        return {"p50": self.p50, "p95": self.p95, "mean": self.mean,
                "std": self.std, "n": self.n}


def latency_report(samples, warmup: int = 10) -> LatencyStats:
    """Order statistics of per-step wall-clock samples (ms), with the
    first `warmup` steps excluded and linear-interpolation percentiles."""
    x = np.asarray(list(samples), dtype=np.float64)[warmup:]
    if x.size == 0:
        raise InsufficientSamples("no latency samples after warmup")
    return LatencyStats(p50=float(np.percentile(x, 50)),
                        p95=float(np.percentile(x, 95)),
                        mean=float(x.mean()), std=float(x.std()),
                        n=int(x.size))


# -- reports ------------------------------------------------------------------

def write_report(path, *, fgd_value=None, beat_align_value=None,
                 l1_div_value=None, facial_mse_value=None, mpjpe_value=None,
                 latency: LatencyStats | None = None, extra: dict | None = None):
    doc = {"fgd": fgd_value, "beat_align": beat_align_value,
           "l1_div": l1_div_value, "facial_mse": facial_mse_value,
           "mpjpe": mpjpe_value,
           "latency": latency.to_dict() if latency else None}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
    return doc


def write_breakdown(path, rows: list, fields: list) -> None:
    """CSV per-sequence breakdown; rows are dicts keyed by `fields`."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
