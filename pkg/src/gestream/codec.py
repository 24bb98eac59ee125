"""Body-part-wise residual VQ-VAE motion codecs.

Each region (upper / lower / face) gets its own codec: a causal encoder
(two 1-d convolutions with total temporal downsample x2 plus a windowed
causal transformer), a multi-level residual quantizer with EMA-learned
codebooks, and a mirrored causal decoder that also runs one token row at
a time for streaming.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry, layers
from .autodiff import Tensor
from .config import CodecConfig
from .errors import (DimensionMismatch, FormatError, IndexOutOfRange,
                     NonFiniteValue, OutOfOrderToken, ShapeError)
from .geometry import SkeletonSpec
from .layers import KVCache

MBT_MAGIC = b"MBT1"

COMMITMENT_WEIGHT = 0.25

LOSS_WEIGHTS = {
    "recon": 1.0,
    "geodesic": 0.5,
    "fk": 1.0,
    "velocity": 0.5,
    "acceleration": 0.25,
    "contact": 0.5,
}


# -- residual quantizer -----------------------------------------------------

def rvq_quantize(latent: np.ndarray, codebooks: list):
    """Residual vector quantization against a list of (V, d) codebooks.

    Returns (indices (..., K), quantized (..., d), residual_norms (K+1,)),
    where residual_norms[k] is the mean residual L2 norm after k levels.
    Nearest-neighbour ties break to the lowest code index.
    """
    latent = np.asarray(latent, dtype=np.float64)
    d = latent.shape[-1]
    for c in codebooks:
        if c.shape[1] != d:
            raise DimensionMismatch(f"codebook width {c.shape[1]} != latent {d}")
    flat = latent.reshape(-1, d)
    residual = flat.copy()
    quantized = np.zeros_like(flat)
    indices = np.zeros((flat.shape[0], len(codebooks)), dtype=np.int64)
    norms = [float(np.linalg.norm(residual, axis=1).mean())]
    for k, c in enumerate(codebooks):
        d2 = (residual ** 2).sum(1, keepdims=True) - 2 * residual @ c.T + (c ** 2).sum(1)
        idx = np.argmin(d2, axis=1)
        indices[:, k] = idx
        chosen = c[idx]
        quantized += chosen
        residual -= chosen
        norms.append(float(np.linalg.norm(residual, axis=1).mean()))
    lead = latent.shape[:-1]
    return (indices.reshape(lead + (len(codebooks),)),
            quantized.reshape(latent.shape), np.array(norms))


@dataclass
class RvqState:
    """Codebooks plus EMA statistics for one codec.

    Code index 0 of every level is pinned to the zero vector and excluded
    from EMA updates; since choosing it never grows the residual, the
    per-level residual norm is non-increasing for every input by
    construction.
    """

    codebooks: list                      # K arrays (V, d)
    usage: list = field(default_factory=list)       # EMA assignment counts
    ema_sum: list = field(default_factory=list)     # EMA residual sums

    def __post_init__(self):
        for c in self.codebooks:
            c[0] = 0.0
        if not self.usage:
            self.usage = [np.ones(c.shape[0]) for c in self.codebooks]
        if not self.ema_sum:
            self.ema_sum = [c.copy() for c in self.codebooks]

    @property
    def n_levels(self) -> int:
        return len(self.codebooks)

    def ema_update(self, residuals_per_level, indices, decay: float,
                   dead_threshold: float, rng: np.random.Generator,
                   encoder_outputs: np.ndarray):
        """EMA codebook update from one batch of assignments.

        residuals_per_level[k]: (M, d) residual inputs quantized at level k;
        indices: (M, K).  Dead codes are reset to random encoder outputs.
        """
        for k, c in enumerate(self.codebooks):
            v = c.shape[0]
            res = residuals_per_level[k]
            idx = indices[:, k]
            counts = np.bincount(idx, minlength=v).astype(np.float64)
            sums = np.zeros_like(c)
            np.add.at(sums, idx, res)
            self.usage[k] = decay * self.usage[k] + (1 - decay) * counts
            self.ema_sum[k] = decay * self.ema_sum[k] + (1 - decay) * sums
            n = self.usage[k].sum()
            smoothed = (self.usage[k] + 1e-5) / (n + v * 1e-5) * n
            self.codebooks[k] = self.ema_sum[k] / smoothed[:, None]
            dead = self.usage[k] < dead_threshold
            dead[0] = False
            if dead.any():
                picks = rng.integers(0, encoder_outputs.shape[0], size=int(dead.sum()))
                self.codebooks[k][dead] = encoder_outputs[picks]
                self.usage[k][dead] = 1.0
                self.ema_sum[k][dead] = encoder_outputs[picks]
            # code 0 stays the zero vector
            self.codebooks[k][0] = 0.0
            self.ema_sum[k][0] = 0.0


# -- codec model -------------------------------------------------------------

class RegionCodec:
    """Encoder, residual quantizer and decoder for one body region."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        d, c_in = cfg.d_latent, cfg.in_width
        p: dict = {}
        p["enc.conv1.w"] = layers.make_param(rng.standard_normal((3, c_in, d)) / np.sqrt(3 * c_in))
        p["enc.conv1.b"] = layers.make_param(np.zeros(d))
        p["enc.conv2.w"] = layers.make_param(rng.standard_normal((cfg.conv_kernel, d, d)) / np.sqrt(cfg.conv_kernel * d))
        p["enc.conv2.b"] = layers.make_param(np.zeros(d))
        for i in range(cfg.n_layers):
            layers.init_block(p, f"enc.b{i}", d, cfg.ff_width, cfg.n_heads,
                              cfg.window, rng)
        layers.init_layer_norm(p, "enc.ln_out", d)
        for i in range(cfg.n_layers):
            layers.init_block(p, f"dec.b{i}", d, cfg.ff_width, cfg.n_heads,
                              cfg.window, rng)
        layers.init_layer_norm(p, "dec.ln_out", d)
        p["dec.convt.w"] = layers.make_param(rng.standard_normal((cfg.conv_kernel, d, d)) / np.sqrt(cfg.conv_kernel * d))
        p["dec.convt.b"] = layers.make_param(np.zeros(d))
        p["dec.conv2.w"] = layers.make_param(rng.standard_normal((3, d, c_in)) / np.sqrt(3 * d))
        p["dec.conv2.b"] = layers.make_param(np.zeros(c_in))
        self.params = p
        scale = 1.0 / np.sqrt(d)
        self.rvq = RvqState([rng.standard_normal((cfg.v_codes, d)) * scale
                             for _ in range(cfg.n_levels)])

    # -- encoder ------------------------------------------------------------

    def encode_latent(self, x) -> Tensor:
        """(B, N, C) frames -> (B, T=N/2, d) pre-quantization latents."""
        if x.shape[-1] != self.cfg.in_width:
            raise ShapeError(f"expected width {self.cfg.in_width}, got {x.shape}")
        h = ad.gelu(ad.conv1d_causal(x, self.params["enc.conv1.w"],
                                     self.params["enc.conv1.b"], stride=1))
        h = ad.conv1d_causal(h, self.params["enc.conv2.w"],
                             self.params["enc.conv2.b"], stride=2)
        t = h.shape[1]
        mask = layers.window_mask(t, t, self.cfg.window)
        for i in range(self.cfg.n_layers):
            h = self._block_full("enc", i, h, mask)
        return layers.layer_norm(self.params, "enc.ln_out", h)

    def _block_full(self, side: str, i: int, h, mask):
        name = f"{side}.b{i}"
        hn = layers.layer_norm(self.params, f"{name}.ln1", h)
        h = h + layers.attention_full(self.params, f"{name}.self", hn, hn,
                                      self.cfg.n_heads, self.cfg.window, mask)
        hn = layers.layer_norm(self.params, f"{name}.ln2", h)
        return h + layers.ffn(self.params, f"{name}.ffn", hn)

    def encode(self, block: np.ndarray) -> np.ndarray:
        """Region frames (N, C) -> token grid columns (T, K_b) for this region.

        Odd N is padded by repeating the last frame; T = ceil(N / 2).
        """
        block = np.asarray(block, dtype=np.float64)
        n = block.shape[0]
        if n % 2 == 1:
            block = np.concatenate([block, block[-1:]], axis=0)
        with ad.no_grad():
            latent = self.encode_latent(Tensor(block[None])).data[0]
        indices, _, _ = rvq_quantize(latent, self.rvq.codebooks)
        return indices

    # -- decoder ------------------------------------------------------------

    def tokens_to_latent(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.min() < 0 or tokens.max() >= self.cfg.v_codes:
            raise IndexOutOfRange("token index outside codebook")
        if tokens.shape[-1] != self.rvq.n_levels:
            raise ShapeError(f"expected {self.rvq.n_levels} levels, got {tokens.shape}")
        out = np.zeros(tokens.shape[:-1] + (self.cfg.d_latent,))
        for k in range(self.rvq.n_levels):
            out += self.rvq.codebooks[k][tokens[..., k]]
        return out

    def decode_latent(self, z) -> Tensor:
        """(B, T, d) quantized latents -> (B, 2T, C) frames."""
        t = z.shape[1]
        mask = layers.window_mask(t, t, self.cfg.window)
        h = z
        for i in range(self.cfg.n_layers):
            h = self._block_full("dec", i, h, mask)
        h = layers.layer_norm(self.params, "dec.ln_out", h)
        h = ad.gelu(ad.conv_transpose1d_causal(h, self.params["dec.convt.w"],
                                               self.params["dec.convt.b"], stride=2))
        return ad.conv1d_causal(h, self.params["dec.conv2.w"],
                                self.params["dec.conv2.b"], stride=1)

    def decode_full(self, tokens: np.ndarray, trim_to: int | None = None) -> np.ndarray:
        """Token rows (T, K_b) -> frames (2T, C) (or trimmed to `trim_to`)."""
        z = self.tokens_to_latent(tokens)
        with ad.no_grad():
            frames = self.decode_latent(Tensor(z[None])).data[0]
        frames = self._postprocess(frames)
        return frames[:trim_to] if trim_to is not None else frames

    def _postprocess(self, frames: np.ndarray) -> np.ndarray:
        if self.cfg.region == "lower":
            frames = frames.copy()
            frames[..., -4:] = 1.0 / (1.0 + np.exp(-frames[..., -4:]))
        return frames

    def open_stream(self) -> "DecoderStream":
        return DecoderStream(self)


class DecoderStream:
    """Streaming decoder state: sliding attention caches plus the
    transposed-convolution overlap tail.  Feed rows in order; each feed
    yields exactly 2 frames equal to the decode_full output."""

    def __init__(self, codec: RegionCodec):
        self.codec = codec
        cfg = codec.cfg
        self.caches = [KVCache(cfg.window) for _ in range(cfg.n_layers)]
        self.next_row = 0
        self._pending = np.zeros((cfg.conv_kernel, cfg.d_latent))  # partial convT sums
        self._tail = np.zeros((2, cfg.d_latent))      # last conv2 inputs
        self._frames_emitted = 0

    def feed(self, token_row: np.ndarray, row_index: int | None = None) -> np.ndarray:
        cfg = self.codec.cfg
        if row_index is None:
            row_index = self.next_row
        if row_index != self.next_row:
            raise OutOfOrderToken(f"expected row {self.next_row}, got {row_index}")
        z = self.codec.tokens_to_latent(np.asarray(token_row).reshape(1, -1))
        with ad.no_grad():
            h = Tensor(z[None])     # (1, 1, d)
            p = self.codec.params
            for i, cache in enumerate(self.caches):
                name = f"dec.b{i}"
                hn = layers.layer_norm(p, f"{name}.ln1", h)
                att = layers.attention_step(p, f"{name}.self", hn, cfg.n_heads,
                                            cfg.window, cache, row_index,
                                            x_kv_new=hn)
                h = h + att
                hn = layers.layer_norm(p, f"{name}.ln2", h)
                h = h + layers.ffn(p, f"{name}.ffn", hn)
            h = layers.layer_norm(p, "dec.ln_out", h).data[0, 0]
        # transposed conv: token t contributes w[i] @ h to output 2t + i
        w = self.codec.params["dec.convt.w"].data
        b = self.codec.params["dec.convt.b"].data
        k = cfg.conv_kernel
        contrib = np.einsum("c,kcd->kd", h, w)
        self._pending[:k] += contrib
        ready = self._pending[:2] + b   # bias applied once, at emission
        self._pending = np.concatenate([self._pending[2:], np.zeros((2, cfg.d_latent))])
        up = _gelu_np(ready)
        # final causal conv, kernel 3 stride 1, over upsampled frames
        w2 = self.codec.params["dec.conv2.w"].data
        b2 = self.codec.params["dec.conv2.b"].data
        buf = np.concatenate([self._tail, up], axis=0)
        out = np.stack([
            np.einsum("kc,kcd->d", buf[i:i + 3], w2) + b2 for i in range(2)])
        self._tail = up.copy()
        self.next_row += 1
        self._frames_emitted += 2
        return self.codec._postprocess(out)


def _gelu_np(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


# -- losses -------------------------------------------------------------------

def _rot6d_to_matrix_t(a6: Tensor) -> Tensor:
    """Differentiable Gram-Schmidt, (..., 6) -> (..., 3, 3)."""
    c1 = a6[..., 0:3]
    c2 = a6[..., 3:6]
    n1 = ad.sqrt(ad.tsum(c1 * c1, axis=-1, keepdims=True) + 1e-12)
    b1 = c1 / n1
    proj = ad.tsum(b1 * c2, axis=-1, keepdims=True)
    r2 = c2 - proj * b1
    n2 = ad.sqrt(ad.tsum(r2 * r2, axis=-1, keepdims=True) + 1e-12)
    b2 = r2 / n2
    b3 = _cross_t(b1, b2)
    cols = [b1, b2, b3]
    rows = []
    for r in range(3):
        rows.append(ad.concat([c[..., r:r + 1] for c in cols], axis=-1))
    stacked = ad.concat([rw.reshape(rw.shape + (1,)).swapaxes(-1, -2)
                         for rw in rows], axis=-2)
    return stacked


def _cross_t(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ad.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx],
                     axis=-1)


def geodesic_loss_t(pred6: Tensor, gt6: np.ndarray) -> Tensor:
    """Mean geodesic angle between predicted and GT rotations (6D inputs)."""
    mp = _rot6d_to_matrix_t(pred6)
    mg = geometry.rot6d_to_matrix(gt6)
    tr = ad.tsum(ad.tsum(mp * mg, axis=-1), axis=-1)
    cosang = ad.clip((tr - 1.0) * 0.5, -1.0 + 1e-7, 1.0 - 1e-7)
    return ad.tmean(ad.arccos(cosang))


def fk_positions_t(spec: SkeletonSpec, rot_mats: Tensor, root_trans: Tensor) -> Tensor:
    """Differentiable FK.  rot_mats: (B, N, J, 3, 3); root_trans: (B, N, 3)."""
    order = geometry._topo_order(spec)
    glob: dict = {}
    pos: dict = {}
    for j in order:
        par = int(spec.parent[j])
        rj = rot_mats[:, :, j]
        if par < 0:
            glob[j] = rj
            pos[j] = root_trans
        else:
            off = Tensor(spec.offset[j].reshape(3, 1))
            pos[j] = pos[par] + ad.matmul(glob[par], off)[..., 0]
            glob[j] = ad.matmul(glob[par], rj)
    cols = [pos[j].reshape(pos[j].shape[:2] + (1, 3)) for j in range(spec.joint_count)]
    return ad.concat(cols, axis=2)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    # log(1 + exp(-|x|)) + max(x, 0) - x * t
    x = logits
    relu_x = ad.relu(x)
    abs_x = ad.relu(x) + ad.relu(-x)
    softplus = ad.log(ad.exp(-abs_x) + 1.0)
    return ad.tmean(softplus + relu_x - x * targets)


def codec_loss(codec: RegionCodec, x_gt: np.ndarray, x_pred: Tensor,
               commitment_terms, spec: SkeletonSpec,
               full_gt: "object" = None) -> tuple:
    """Weighted codec training loss.

    x_gt: (B, N, C) GT region frames; x_pred: matching prediction (raw
    decoder output, contacts still logits); commitment_terms: list of
    (residual Tensor, chosen_code np.ndarray) per level; full_gt: GT
    MotionSequence list for FK splicing (one per batch row).
    """
    cfg = codec.cfg
    region = cfg.region
    b, n, c = x_gt.shape
    comp = {}

    if region == "lower":
        rot_width = c - 7
        pred_rot = x_pred[:, :, :rot_width]
        pred_trans = x_pred[:, :, rot_width:rot_width + 3]
        pred_contact_logits = x_pred[:, :, rot_width + 3:]
        raw_pred = ad.concat([pred_rot, pred_trans], axis=-1)
        raw_gt = x_gt[:, :, :rot_width + 3]
        comp["contact"] = bce_with_logits(pred_contact_logits, x_gt[:, :, rot_width + 3:])
    elif region == "face":
        rot_width = 6 * spec.j_face
        raw_pred, raw_gt = x_pred, x_gt
        pred_rot = x_pred[:, :, spec.expr_dim:]
    else:
        rot_width = c
        raw_pred, raw_gt = x_pred, x_gt
        pred_rot = x_pred

    diff = raw_pred - raw_gt
    comp["recon"] = ad.tmean(diff * diff)

    if region == "face":
        gt_rot = x_gt[:, :, spec.expr_dim:]
        n_joints = spec.j_face
    elif region == "lower":
        gt_rot = x_gt[:, :, :rot_width]
        n_joints = spec.j_lower
    else:
        gt_rot = x_gt
        n_joints = spec.j_upper
    pred_rot6 = pred_rot.reshape(b, n, n_joints, 6)
    comp["geodesic"] = geodesic_loss_t(pred_rot6, gt_rot.reshape(b, n, n_joints, 6))

    comp["fk"] = _fk_loss(codec, spec, x_gt, x_pred, pred_rot6, full_gt)

    vel_p = x_pred[:, 1:, :] - x_pred[:, :-1, :]
    vel_g = x_gt[:, 1:, :] - x_gt[:, :-1, :]
    if n >= 2:
        dv = vel_p - vel_g
        comp["velocity"] = ad.tmean(dv * dv)
    else:
        comp["velocity"] = Tensor(0.0)
    if n >= 3:
        acc_p = vel_p[:, 1:, :] - vel_p[:, :-1, :]
        acc_g = vel_g[:, 1:, :] - vel_g[:, :-1, :]
        da = acc_p - acc_g
        comp["acceleration"] = ad.tmean(da * da)
    else:
        comp["acceleration"] = Tensor(0.0)

    commit = Tensor(0.0)
    for residual, code in commitment_terms:
        delta_codebook = float(((residual.data - code) ** 2).mean())
        delta_commit = residual - code
        commit = commit + delta_codebook + COMMITMENT_WEIGHT * ad.tmean(delta_commit * delta_commit)
    comp["commitment"] = commit

    total = comp["commitment"]
    for name, weight in LOSS_WEIGHTS.items():
        if name in comp:
            total = total + weight * comp[name]
    if not np.isfinite(total.data):
        raise NonFiniteValue("codec loss is not finite")
    return total, {k: float(v.data) for k, v in comp.items()}


def _fk_loss(codec: RegionCodec, spec: SkeletonSpec, x_gt, x_pred,
             pred_rot6: Tensor, full_gt) -> Tensor:
    """MSE on FK positions of this region's joints, GT elsewhere.

    For the face codec only the jaw chain is scored.  full_gt supplies
    (rot6d (B,N,J,6), trans (B,N,3)) GT context arrays.
    """
    region = codec.cfg.region
    b, n = x_gt.shape[0], x_gt.shape[1]
    gt_rot_all, gt_trans = full_gt
    region_idx = spec.region_indices(region)
    # assemble rotation tensor: GT everywhere, prediction in this region
    mats_gt = geometry.rot6d_to_matrix(gt_rot_all)      # (B,N,J,3,3) numpy
    pred_mats = _rot6d_to_matrix_t(pred_rot6)           # (B,N,Jr,3,3) tensor
    cols = []
    ri = {int(j): k for k, j in enumerate(region_idx)}
    for j in range(spec.joint_count):
        if j in ri:
            cols.append(pred_mats[:, :, ri[j]].reshape(b, n, 1, 3, 3))
        else:
            cols.append(Tensor(mats_gt[:, :, j].reshape(b, n, 1, 3, 3)))
    mats = ad.concat(cols, axis=2)
    if region == "lower":
        rot_width = 6 * spec.j_lower
        trans = x_pred[:, :, rot_width:rot_width + 3]
    else:
        trans = Tensor(gt_trans)
    pos = fk_positions_t(spec, mats, trans)
    gt_pos = geometry.forward_kinematics(spec, mats_gt, gt_trans)
    score_idx = region_idx
    dp = pos[:, :, score_idx] - gt_pos[:, :, score_idx]
    return ad.tmean(dp * dp)


# -- token files --------------------------------------------------------------

def write_tokens(tokens: np.ndarray, path) -> None:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError("token grid must be 2-d")
    with open(path, "wb") as fh:
        fh.write(MBT_MAGIC)
        fh.write(struct.pack("<2I", tokens.shape[0], tokens.shape[1]))
        fh.write(np.ascontiguousarray(tokens, dtype="<u2").tobytes())


def read_tokens(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MBT_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        t, k = struct.unpack("<2I", fh.read(8))
        payload = fh.read()
    if len(payload) != 2 * t * k:
        raise ShapeError("token payload size mismatch")
    return np.frombuffer(payload, dtype="<u2").reshape(t, k).astype(np.int64)


# -- checkpointing -------------------------------------------------------------

def codec_state_dict(codec: RegionCodec) -> dict:
    out = dict(codec.params)
    for k in range(codec.rvq.n_levels):
        out[f"rvq.codebook{k}"] = Tensor(codec.rvq.codebooks[k])
        out[f"rvq.usage{k}"] = Tensor(codec.rvq.usage[k])
        out[f"rvq.ema_sum{k}"] = Tensor(codec.rvq.ema_sum[k])
    return out


def save_codec(path, codec: RegionCodec) -> None:
    ad.save_checkpoint(path, codec_state_dict(codec),
                       meta={"kind": "codec", "config": asdict(codec.cfg)})


def load_codec_file(path) -> RegionCodec:
    state, meta = ad.load_checkpoint(path)
    return load_codec(CodecConfig(**meta["config"]), state)


def load_codec(cfg: CodecConfig, state: dict) -> RegionCodec:
    codec = RegionCodec(cfg)
    for name in codec.params:
        codec.params[name].data[...] = state[name].data
    for k in range(cfg.n_levels):
        codec.rvq.codebooks[k] = state[f"rvq.codebook{k}"].data.copy()
        codec.rvq.usage[k] = state[f"rvq.usage{k}"].data.copy()
        codec.rvq.ema_sum[k] = state[f"rvq.ema_sum{k}"].data.copy()
    return codec
