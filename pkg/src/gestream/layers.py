"""Transformer building blocks on the autodiff substrate.

Every block runs in two modes from the same parameters: full-sequence
(training, batched over time) and incremental (inference, one query with
a sliding KV cache).  Attention uses a learned relative position bias
over the bounded window; masked scores get -inf so out-of-window keys
contribute exactly zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CacheDesync

NEG_INF = -np.inf


def init_linear(params: dict, name: str, d_in: int, d_out: int,
                rng: np.random.Generator, scale: float | None = None):
    s = scale if scale is not None else 1.0 / np.sqrt(d_in)
    params[f"{name}.w"] = make_param(rng.standard_normal((d_in, d_out)) * s)
    params[f"{name}.b"] = make_param(np.zeros(d_out))


def make_param(arr) -> Tensor:
    t = Tensor(arr)
    t.requires_grad = True
    return t


def linear(params: dict, name: str, x):
    return ad.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def init_layer_norm(params: dict, name: str, d: int):
    params[f"{name}.g"] = make_param(np.ones(d))
    params[f"{name}.b"] = make_param(np.zeros(d))


def layer_norm(params: dict, name: str, x):
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_attention(params: dict, name: str, d: int, heads: int, window: int,
                   rng: np.random.Generator):
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(params, f"{name}.{proj}", d, d, rng)
    params[f"{name}.bias"] = make_param(np.zeros((heads, window)))


def _split_heads(x, heads: int):
    b, t, d = x.shape
    return ad.swapaxes(x.reshape(b, t, heads, d // heads), 1, 2)  # (B,H,T,dh)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return ad.swapaxes(x, 1, 2).reshape(b, t, h * dh)


def window_mask(t_q: int, t_k: int, window: int, offset: int = 0) -> np.ndarray:
    """(t_q, t_k) additive mask; query i attends key j iff 0 <= i+offset-j < window."""
    qi = np.arange(t_q)[:, None] + offset
    kj = np.arange(t_k)[None, :]
    delta = qi - kj
    mask = np.zeros((t_q, t_k))
    mask[(delta < 0) | (delta >= window)] = NEG_INF
    return mask


def bias_matrix(params: dict, name: str, t_q: int, t_k: int, window: int,
                offset: int = 0):
    """Relative position bias gathered into (H, t_q, t_k)."""
    delta = np.clip(np.arange(t_q)[:, None] + offset - np.arange(t_k)[None, :],
                    0, window - 1)
    return ad.take(params[f"{name}.bias"], delta.reshape(-1), axis=1
                   ).reshape(params[f"{name}.bias"].shape[0], t_q, t_k)


def attention_full(params: dict, name: str, x_q, x_kv, heads: int,
                   window: int, mask: np.ndarray):
    """Windowed attention over full sequences.

    x_q: (B, Tq, d); x_kv: (B, Tk, d); mask: (Tq, Tk) additive numpy mask.
    Relative bias is indexed by query_index - key_index (offset 0: aligned
    timelines).
    """
    q = _split_heads(linear(params, f"{name}.wq", x_q), heads)
    k = _split_heads(linear(params, f"{name}.wk", x_kv), heads)
    v = _split_heads(linear(params, f"{name}.wv", x_kv), heads)
    dh = q.shape[-1]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    scores = scores + bias_matrix(params, name, x_q.shape[1], x_kv.shape[1], window)
    scores = scores + mask[None, None, :, :]
    att = ad.softmax(scores, axis=-1)
    out = _merge_heads(ad.matmul(att, v))
    return linear(params, f"{name}.wo", out)


class KVCache:
    """Sliding key/value cache for one attention block (inference only)."""

    def __init__(self, window: int):
        self.window = window
        self.k = None            # (B, H, L, dh)
        self.v = None
        self.next_index = 0      # absolute index of the next expected entry

    def append(self, k_new: np.ndarray, v_new: np.ndarray, index: int):
        if index != self.next_index:
            raise CacheDesync(f"expected step {self.next_index}, got {index}")
        if self.k is None:
            self.k, self.v = k_new, v_new
        else:
            self.k = np.concatenate([self.k, k_new], axis=2)[:, :, -self.window:]
            self.v = np.concatenate([self.v, v_new], axis=2)[:, :, -self.window:]
        self.next_index += 1


def attention_step(params: dict, name: str, x_q, heads: int, window: int,
                   cache: KVCache, index: int, x_kv_new=None):
    """One incremental attention step.

    x_q: (B, 1, d) query at absolute position `index`.  For self-attention
    pass x_kv_new=x_q; for cross-attention pass the new memory entry (or
    None when the memory did not advance).
    """
    if x_kv_new is not None:
        k_new = _split_heads(linear(params, f"{name}.wk", x_kv_new), heads).data
        v_new = _split_heads(linear(params, f"{name}.wv", x_kv_new), heads).data
        cache.append(k_new, v_new, index)
    q = _split_heads(linear(params, f"{name}.wq", x_q), heads)
    dh = q.shape[-1]
    n_keys = cache.k.shape[2]
    scores = np.matmul(q.data, np.swapaxes(cache.k, -1, -2)) / np.sqrt(dh)
    # keys are the last n_keys absolute positions ending at cache.next_index-1
    first_key = cache.next_index - n_keys
    delta = np.clip(index - (first_key + np.arange(n_keys)), 0, window - 1)
    scores = scores + params[f"{name}.bias"].data[:, delta][None, :, None, :]
    valid = (index - (first_key + np.arange(n_keys)) >= 0) & \
            (index - (first_key + np.arange(n_keys)) < window)
    scores[:, :, :, ~valid] = NEG_INF
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    att = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(att, cache.v)
    b, h, _, dh2 = out.shape
    out = Tensor(np.swapaxes(out, 1, 2).reshape(b, 1, h * dh2))
    return linear(params, f"{name}.wo", out)


def init_ffn(params: dict, name: str, d: int, d_ff: int, rng):
    init_linear(params, f"{name}.w1", d, d_ff, rng)
    init_linear(params, f"{name}.w2", d_ff, d, rng)


def ffn(params: dict, name: str, x):
    return linear(params, f"{name}.w2", ad.gelu(linear(params, f"{name}.w1", x)))


def init_block(params: dict, name: str, d: int, d_ff: int, heads: int,
               window: int, rng, cross: int = 0, cross_window: int | None = None):
    """One pre-LN decoder block: self-attn [+ `cross` cross-attn sublayers] + FFN."""
    init_layer_norm(params, f"{name}.ln1", d)
    init_attention(params, f"{name}.self", d, heads, window, rng)
    for c in range(cross):
        init_layer_norm(params, f"{name}.lnx{c}", d)
        init_attention(params, f"{name}.cross{c}", d, heads,
                       cross_window if cross_window is not None else window, rng)
    init_layer_norm(params, f"{name}.ln2", d)
    init_ffn(params, f"{name}.ffn", d, d_ff, rng)


def params_subset(params: dict, prefix: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(prefix)}
