"""Motion containers, region splitting, synthetic corpus and the .mbm format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .config import FPS, CorpusConfig
from .errors import FormatError, ShapeError
from .geometry import SkeletonSpec, default_skeleton
from .script import Script, make_script, script_rng

IDENTITY_6D = np.array([1.0, 0, 0, 0, 1, 0])

MBM_MAGIC = b"MBM1"


@dataclass
class MotionSequence:
    """Region-blocked motion at a fixed 25 fps.

    upper: (N, 6*J_u); lower: (N, 6*J_l + 3 + 4) laid out as rotations,
    root translation xyz, 4 foot-contact values in [0,1];
    face: (N, expr_dim + 6*J_f).
    """

    upper: np.ndarray
    lower: np.ndarray
    face: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.face = np.asarray(self.face, dtype=np.float64)
        if not (self.upper.shape[0] == self.lower.shape[0] == self.face.shape[0]):
            raise ShapeError("region blocks disagree on frame count")
        if self.fps != FPS:
            raise ShapeError(f"fps must be {FPS}")

    @property
    def n_frames(self) -> int:
        return int(self.upper.shape[0])

    def validate_against(self, spec: SkeletonSpec) -> None:
        wu, wl, wf = region_widths(spec)
        if self.upper.shape[1] != wu or self.lower.shape[1] != wl or self.face.shape[1] != wf:
            raise ShapeError(
                f"block widths {self.upper.shape[1]}/{self.lower.shape[1]}/"
                f"{self.face.shape[1]} do not match skeleton {wu}/{wl}/{wf}")
        contacts = self.lower[:, -4:]
        if contacts.min() < -1e-9 or contacts.max() > 1 + 1e-9:
            raise ShapeError("contact channels outside [0,1]")

    # -- derived views ----------------------------------------------------

    def root_translation(self, spec: SkeletonSpec) -> np.ndarray:
        jl = spec.j_lower
        return self.lower[:, 6 * jl:6 * jl + 3]

    def foot_contacts(self) -> np.ndarray:
        return self.lower[:, -4:]

    def expressions(self, spec: SkeletonSpec) -> np.ndarray:
        return self.face[:, :spec.expr_dim]

    def rotations_6d(self, spec: SkeletonSpec) -> np.ndarray:
        """Per-joint 6D rotations, (N, J, 6), in global joint index order."""
        n = self.n_frames
        out = np.tile(IDENTITY_6D, (n, spec.joint_count, 1))
        for region, block, rot_offset in (
                ("upper", self.upper, 0),
                ("lower", self.lower, 0),
                ("face", self.face, spec.expr_dim)):
            idx = spec.region_indices(region)
            rots = block[:, rot_offset:rot_offset + 6 * len(idx)]
            out[:, idx, :] = rots.reshape(n, len(idx), 6)
        return out

    def joint_positions(self, spec: SkeletonSpec) -> np.ndarray:
        """(N, J, 3) FK positions."""
        rot = geometry.rot6d_to_matrix(self.rotations_6d(spec))
        return geometry.forward_kinematics(spec, rot, self.root_translation(spec))

    def pose_vectors(self) -> np.ndarray:
        """Full-width per-frame channel vectors (N, W)."""
        return concat_regions(self)


def region_widths(spec: SkeletonSpec):
    return (6 * spec.j_upper,
            6 * spec.j_lower + 3 + 4,
            spec.expr_dim + 6 * spec.j_face)


def concat_regions(m: MotionSequence) -> np.ndarray:
    return np.concatenate([m.upper, m.lower, m.face], axis=1)


def split_regions(frames: np.ndarray, spec: SkeletonSpec) -> MotionSequence:
    """Inverse of concat_regions; raises ShapeError on width mismatch."""
    frames = np.asarray(frames, dtype=np.float64)
    wu, wl, wf = region_widths(spec)
    if frames.ndim != 2 or frames.shape[1] != wu + wl + wf:
        raise ShapeError(f"expected width {wu + wl + wf}, got {frames.shape}")
    return MotionSequence(upper=frames[:, :wu],
                          lower=frames[:, wu:wu + wl],
                          face=frames[:, wu + wl:])


# -- on-disk format --------------------------------------------------------

def write_motion(m: MotionSequence, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MBM_MAGIC)
        fh.write(struct.pack("<5I", m.fps, m.n_frames, m.upper.shape[1],
                             m.lower.shape[1], m.face.shape[1]))
        for block in (m.upper, m.lower, m.face):
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def read_motion(path) -> MotionSequence:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MBM_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        fps, n, wu, wl, wf = struct.unpack("<5I", fh.read(20))
        payload = fh.read()
    expected = 4 * n * (wu + wl + wf)
    if len(payload) != expected:
        raise ShapeError(f"payload {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    u = arr[:n * wu].reshape(n, wu)
    l = arr[n * wu:n * (wu + wl)].reshape(n, wl)
    f = arr[n * (wu + wl):].reshape(n, wf)
    return MotionSequence(upper=u, lower=l, face=f, fps=fps)


# -- synthetic corpus -------------------------------------------------------

@dataclass
class CorpusSample:
    motion: MotionSequence
    script: Script
    identity: int

    @property
    def va_labels(self) -> np.ndarray:
        return self.script.va_steps


def _axis_angle_batch(axis, angles: np.ndarray) -> np.ndarray:
    """Rodrigues on a fixed axis for a vector of angles -> (N, 3, 3)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    s = np.sin(angles)[:, None, None]
    c = (1.0 - np.cos(angles))[:, None, None]
    return np.eye(3) + s * k + c * (k @ k)


def _angles_to_6d(axis, angles: np.ndarray) -> np.ndarray:
    rot = _axis_angle_batch(axis, angles)
    return np.concatenate([rot[:, :, 0], rot[:, :, 1]], axis=1)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _stroke_track(script: Script) -> np.ndarray:
    """One-way half-cosine strokes chaining between consecutive beats.

    Each short beat gap moves the arm monotonically to the opposite
    level, so angular velocity vanishes exactly at beat instants and
    nowhere inside a gap; long gaps (span changes) decay back to rest.
    """
    n = script.n_frames
    t = np.arange(n) / FPS
    out = np.zeros(n)
    level = 0.0
    beats = script.beats
    for b0, b1 in zip(beats[:-1], beats[1:]):
        gap = b1 - b0
        sel = (t >= b0) & (t < b1)
        if gap <= 0.81:
            target = 1.0 - level
            tau = (t[sel] - b0) / gap
            out[sel] = level + (target - level) * 0.5 * (1 - np.cos(np.pi * tau))
            level = target
        else:
            ramp = min(0.4, gap)
            sel_r = sel & (t < b0 + ramp)
            tau = (t[sel_r] - b0) / ramp
            out[sel_r] = level * 0.5 * (1 + np.cos(np.pi * tau))
            level = 0.0
    if beats.size:
        sel = t >= beats[-1]
        tau = np.clip((t[sel] - beats[-1]) / 0.4, 0.0, 1.0)
        out[sel] = level * 0.5 * (1 + np.cos(np.pi * tau))
    return out


def synth_motion(script: Script, spec: SkeletonSpec, seed: int) -> MotionSequence:
    """Procedural motion realizing a script on the toy skeleton.

    Speaking spans drive raised-cosine arm strokes between consecutive
    beats (wrist velocity vanishes exactly at beat instants); listening
    spans produce low-amplitude sway; the lower body holds stance phases
    with clean foot contacts; the jaw tracks the speech envelope.
    """
    rng = script_rng(seed, script.identity, salt=1)
    n = script.n_frames
    t = np.arange(n) / FPS
    ident = script.identity
    amp_scale = 1.0 + 0.15 * ident
    freq_scale = 1.0 + 0.1 * ident

    stroke = _stroke_track(script)
    sway = np.sin(2 * np.pi * 0.3 * freq_scale * t)

    upper6 = np.tile(IDENTITY_6D, (n, spec.j_upper, 1))
    upper_idx = spec.region_indices("upper")
    upper_names = [spec.names[i] for i in upper_idx]

    def set_upper(name, axis, angles):
        local = upper_names.index(name)
        upper6[:, local, :] = _angles_to_6d(axis, angles)

    for side, sgn in (("left", 1.0), ("right", -1.0)):
        phase = 0.0 if side == "left" else np.pi / 3
        stroke_amp = 0.55 * amp_scale * sgn
        sway_amp = 0.04 * sgn
        sh = stroke_amp * stroke + sway_amp * np.sin(2 * np.pi * 0.3 * freq_scale * t + phase)
        el = 0.8 * stroke_amp * stroke + 0.5 * sway_amp * sway
        set_upper(f"{side}_shoulder", [0, 0, 1], sh)
        set_upper(f"{side}_elbow", [0, 1, 0], el)
        set_upper(f"{side}_wrist", [1, 0, 0], 0.3 * stroke_amp * stroke)
    set_upper("chest", [1, 0, 0], 0.05 * sway)
    set_upper("head", [0, 1, 0], 0.08 * np.sin(2 * np.pi * 0.2 * freq_scale * t))
    upper = upper6.reshape(n, 6 * spec.j_upper)

    # lower body: stance phases with smooth root shifts between them
    lower6 = np.tile(IDENTITY_6D, (n, spec.j_lower, 1))
    lower_idx = spec.region_indices("lower")
    lower_names = [spec.names[i] for i in lower_idx]
    spine_local = lower_names.index("lower_spine")
    lower6[:, spine_local, :] = _angles_to_6d([0, 0, 1], 0.04 * sway)

    trans = np.zeros((n, 3))
    contacts = np.ones((n, 4))
    phase_len = 4.0
    transition = 0.4
    n_phases = int(np.ceil(script.duration_s / phase_len)) + 1
    offsets = rng.uniform(-0.03, 0.03, size=(n_phases, 1)) * np.array([[1.0, 0.0, 0.0]])
    for p in range(n_phases):
        p0 = p * phase_len
        sel = (t >= p0) & (t < p0 + phase_len)
        trans[sel] = offsets[p]
        if p + 1 < n_phases:
            tr = (t >= p0 + phase_len - transition) & (t < p0 + phase_len)
            if tr.any():
                w = _smoothstep((t[tr] - (p0 + phase_len - transition)) / transition)
                trans[tr] = (1 - w)[:, None] * offsets[p] + w[:, None] * offsets[p + 1]
                contacts[tr] = 0.0
    lower = np.concatenate([lower6.reshape(n, -1), trans, contacts], axis=1)

    env = script.envelope
    expr = np.zeros((n, spec.expr_dim))
    expr[:, 0] = env
    extra = min(spec.expr_dim - 1, 4)
    for i in range(extra):
        expr[:, 1 + i] = 0.3 * env * np.sin(2 * np.pi * (0.7 + 0.2 * i) * t + i)
    face6 = np.zeros((n, spec.j_face, 6))
    jaw_angle = 0.25 * env * (0.7 + 0.3 * np.sin(2 * np.pi * 2.0 * t))
    for j in range(spec.j_face):
        face6[:, j, :] = _angles_to_6d([1, 0, 0], jaw_angle)
    face = np.concatenate([expr, face6.reshape(n, -1)], axis=1)

    m = MotionSequence(upper=upper, lower=lower, face=face)
    m.validate_against(spec)
    return m


def synth_corpus(seed: int, identities: int, minutes_per_identity: float,
                 spec: SkeletonSpec | None = None) -> list:
    """Deterministic synthetic corpus; one sample per identity."""
    if identities < 1:
        raise ShapeError("identities must be >= 1")
    spec = spec or default_skeleton()
    duration = minutes_per_identity * 60.0
    samples = []
    for ident in range(identities):
        script = make_script(seed, ident, duration)
        motion = synth_motion(script, spec, seed)
        samples.append(CorpusSample(motion=motion, script=script, identity=ident))
    return samples


def corpus_from_config(cfg: CorpusConfig, spec: SkeletonSpec | None = None) -> list:
    spec = spec or default_skeleton(expr_dim=cfg.expr_dim)
    return synth_corpus(cfg.seed, cfg.identities, cfg.minutes_per_identity, spec)


def write_corpus(samples: list, out_dir, spec: SkeletonSpec) -> Path:
    """Write .mbm files plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"sample_{i:03d}"
        write_motion(s.motion, out_dir / f"{name}.mbm")
        cond_file = f"{name}.conditions.jsonl"
        entries.append({"motion": f"{name}.mbm", "identity": s.identity,
                        "conditions": cond_file,
                        "duration_s": s.script.duration_s})
    manifest = {"version": 1, "fps": FPS,
                "skeleton": {"j_upper": spec.j_upper, "j_lower": spec.j_lower,
                             "j_face": spec.j_face, "expr_dim": spec.expr_dim},
                "samples": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
