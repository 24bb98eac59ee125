"""Two-axis causal token generator.

A temporal transformer runs over 80 ms steps (self-attention window 25,
dual cross-attention over pooled speech/text with window 50) and emits
the level-1 token plus the step context h_t.  A kinematic transformer
then decodes the remaining levels of the step in order upper, lower,
face; lower-body positions carry no cross-attention and only attend to
other lower-body positions, so their logits are independent of the
step's speech and text given h_t and the token prefix.

Inference keeps sliding KV caches per attention sub-layer and, for
classifier-free guidance, a parallel cache fed with learned null
condition embeddings.  Sampling uses per-step counter-based RNG so
replays are bit-exact.
"""

from __future__ import annotations

import time
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .conditions import ConditionStep, level_pool
from .config import GeneratorConfig
from .errors import NonFiniteValue, SessionClosed
from .layers import KVCache

ZERO_INIT = None    # start-of-stream sentinel in place of a previous token row


# -- parameters ---------------------------------------------------------------

def init_generator(cfg: GeneratorConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    d, v = cfg.d_model, cfg.v_codes
    p: dict = {}
    for k in range(cfg.k_total):
        p[f"emb.{k}"] = layers.make_param(rng.standard_normal((v, d)) * 0.02)
        layers.init_linear(p, f"head.{k}", d, v, rng)
    p["start"] = layers.make_param(rng.standard_normal(d) * 0.02)
    p["ident"] = layers.make_param(rng.standard_normal((cfg.n_identities, d)) * 0.02)
    p["null_speech"] = layers.make_param(rng.standard_normal((cfg.k_speech, d)) * 0.02)
    p["null_text"] = layers.make_param(rng.standard_normal((cfg.k_text, d)) * 0.02)
    for i in range(cfg.temporal_layers):
        layers.init_block(p, f"t{i}", d, cfg.ff_width, cfg.temporal_heads,
                          cfg.self_window, rng, cross=2,
                          cross_window=cfg.cross_window)
    layers.init_layer_norm(p, "t.ln_out", d)
    for i in range(cfg.kinematic_layers):
        layers.init_block(p, f"k{i}", d, cfg.ff_width, cfg.kinematic_heads,
                          cfg.k_total - 1, rng, cross=2,
                          cross_window=cfg.k_total)
    layers.init_layer_norm(p, "k.ln_out", d)
    layers.init_linear(p, "va", d, 1, rng)
    return p


def save_generator(path, params: dict, cfg: GeneratorConfig) -> None:
    ad.save_checkpoint(path, params, meta={"kind": "generator",
                                           "config": asdict(cfg)})


def load_generator(path):
    params, meta = ad.load_checkpoint(path)
    return params, GeneratorConfig(**meta["config"])


# -- kinematic level layout ----------------------------------------------

def kinematic_masks(cfg: GeneratorConfig):
    """Self-attention mask and cross-attention gate over level positions.

    Position p consumes the token of level p and predicts level p+1
    (0-based).  Positions predicting lower-body levels have their
    cross-attention output gated to exactly zero and may only attend to
    other lower-predicting positions, keeping their logits free of any
    speech/text influence that entered upper positions via cross-attention.
    """
    n = cfg.k_total - 1
    lower = np.array([cfg.level_region(p + 1) == "lower" for p in range(n)])
    mask = np.zeros((n, n))
    cols = np.arange(n)
    for p in range(n):
        bad = cols > p
        if lower[p]:
            bad = bad | ~lower
        mask[p, bad] = layers.NEG_INF
    gate = np.where(lower, 0.0, 1.0)[:, None]
    return mask, gate, lower


def _kin_blocks(params: dict, cfg: GeneratorConfig, x, mem_speech, mem_text,
                self_mask: np.ndarray, gate: np.ndarray):
    """Kinematic transformer trunk; x (B, P, d), memories (B, Kc, d)."""
    n = x.shape[1]
    zero_s = np.zeros((n, mem_speech.shape[1]))
    zero_t = np.zeros((n, mem_text.shape[1]))
    for i in range(cfg.kinematic_layers):
        name = f"k{i}"
        h = layers.layer_norm(params, f"{name}.ln1", x)
        x = x + layers.attention_full(params, f"{name}.self", h, h,
                                      cfg.kinematic_heads, cfg.k_total - 1,
                                      self_mask)
        h = layers.layer_norm(params, f"{name}.lnx0", x)
        x = x + layers.attention_full(params, f"{name}.cross0", h, mem_speech,
                                      cfg.kinematic_heads, cfg.k_total,
                                      zero_s) * gate
        h = layers.layer_norm(params, f"{name}.lnx1", x)
        x = x + layers.attention_full(params, f"{name}.cross1", h, mem_text,
                                      cfg.kinematic_heads, cfg.k_total,
                                      zero_t) * gate
        h = layers.layer_norm(params, f"{name}.ln2", x)
        x = x + layers.ffn(params, f"{name}.ffn", h)
    return layers.layer_norm(params, "k.ln_out", x)


# -- full-sequence (training) forwards ----------------------------------------

def embed_rows(params: dict, cfg: GeneratorConfig, tokens: np.ndarray,
               identities: np.ndarray):
    """Teacher-forced temporal inputs: step t sees row t-1, step 0 the
    learned start embedding; identity embedding added everywhere."""
    b, t, k = tokens.shape
    summed = None
    for lvl in range(k):
        e = ad.embedding(params[f"emb.{lvl}"], tokens[:, :t - 1, lvl])
        summed = e if summed is None else summed + e
    start = ad.reshape(params["start"], (1, 1, cfg.d_model)) + \
        Tensor(np.zeros((b, 1, cfg.d_model)))
    x = ad.concat([start, summed], axis=1) if t > 1 else start
    ident = ad.reshape(ad.embedding(params["ident"], identities),
                       (b, 1, cfg.d_model))
    return x + ident


def temporal_forward_train(params: dict, cfg: GeneratorConfig,
                           tokens: np.ndarray, pooled_speech, pooled_text,
                           identities: np.ndarray):
    """Returns (h (B,T,d), level-1 logits (B,T,V))."""
    b, t, _ = tokens.shape
    x = embed_rows(params, cfg, tokens, identities)
    self_mask = layers.window_mask(t, t, cfg.self_window)
    cross_mask = layers.window_mask(t, t, cfg.cross_window)
    for i in range(cfg.temporal_layers):
        name = f"t{i}"
        h = layers.layer_norm(params, f"{name}.ln1", x)
        x = x + layers.attention_full(params, f"{name}.self", h, h,
                                      cfg.temporal_heads, cfg.self_window,
                                      self_mask)
        h = layers.layer_norm(params, f"{name}.lnx0", x)
        x = x + layers.attention_full(params, f"{name}.cross0", h,
                                      pooled_speech, cfg.temporal_heads,
                                      cfg.cross_window, cross_mask)
        h = layers.layer_norm(params, f"{name}.lnx1", x)
        x = x + layers.attention_full(params, f"{name}.cross1", h,
                                      pooled_text, cfg.temporal_heads,
                                      cfg.cross_window, cross_mask)
        h = layers.layer_norm(params, f"{name}.ln2", x)
        x = x + layers.ffn(params, f"{name}.ffn", h)
    h = layers.layer_norm(params, "t.ln_out", x)
    return h, layers.linear(params, "head.0", h)


def kinematic_forward_train(params: dict, cfg: GeneratorConfig,
                            tokens: np.ndarray, h, speech_rows, text_rows,
                            identities: np.ndarray):
    """Teacher-forced level decoding; returns per-level logits, a list of
    (B,T,V) tensors for levels 1..K-1 (0-based)."""
    b, t, k = tokens.shape
    d = cfg.d_model
    n = k - 1
    parts = [ad.reshape(ad.embedding(params[f"emb.{p}"], tokens[:, :, p]),
                        (b, t, 1, d)) for p in range(n)]
    x = ad.concat(parts, axis=2)
    x = x + ad.reshape(h, (b, t, 1, d))
    x = x + ad.reshape(ad.embedding(params["ident"], identities), (b, 1, 1, d))
    x = ad.reshape(x, (b * t, n, d))
    mem_s = ad.reshape(speech_rows, (b * t, cfg.k_speech, d))
    mem_t = ad.reshape(text_rows, (b * t, cfg.k_text, d))
    mask, gate, _ = kinematic_masks(cfg)
    out = _kin_blocks(params, cfg, x, mem_s, mem_t, mask, gate)
    logits = []
    for p in range(n):
        lp = layers.linear(params, f"head.{p + 1}", out[:, p])
        logits.append(ad.reshape(lp, (b, t, cfg.v_codes)))
    return logits


def va_logits(params: dict, h):
    """Voice-activity head on the temporal context, (..., d) -> (..., 1)."""
    return layers.linear(params, "va", h)


# -- sampling ------------------------------------------------------------

def sample_top_p(logits: np.ndarray, p: float, temperature: float,
                 rng: np.random.Generator) -> int:
    """Nucleus sampling; ties in probability resolve to the lower index."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteValue("non-finite logits in sampler")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"top-p must be in (0, 1], got {p}")
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits / temperature
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    # tolerance so a prefix whose exact mass equals p survives float error
    cut = min(int(np.searchsorted(cum, p - 1e-9, side="left")), logits.size - 1)
    keep = order[:cut + 1]
    kept = probs[keep]
    kept /= kept.sum()
    r = rng.random()
    i = min(int(np.searchsorted(np.cumsum(kept), r, side="right")),
            keep.size - 1)
    return int(keep[i])


def cfg_mix(logits_cond: np.ndarray, logits_uncond: np.ndarray,
            scale: float) -> np.ndarray:
    return logits_uncond + scale * (logits_cond - logits_uncond)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, step])))


# -- incremental (inference) forwards -----------------------------------------

class TemporalState:
    """Per-branch sliding KV caches for the temporal transformer."""

    def __init__(self, cfg: GeneratorConfig):
        self.self_caches = [KVCache(cfg.self_window)
                            for _ in range(cfg.temporal_layers)]
        self.speech_caches = [KVCache(cfg.cross_window)
                              for _ in range(cfg.temporal_layers)]
        self.text_caches = [KVCache(cfg.cross_window)
                            for _ in range(cfg.temporal_layers)]
        self.index = 0


def temporal_step(params: dict, cfg: GeneratorConfig, state: TemporalState,
                  x_in: np.ndarray, speech_vec: np.ndarray,
                  text_vec: np.ndarray):
    """One cached temporal step; returns (h_t (d,), level-1 logits (V,))."""
    with ad.no_grad():
        x = Tensor(x_in[None, None, :])
        sp = Tensor(speech_vec[None, None, :])
        tx = Tensor(text_vec[None, None, :])
        for i in range(cfg.temporal_layers):
            name = f"t{i}"
            h = layers.layer_norm(params, f"{name}.ln1", x)
            x = x + layers.attention_step(params, f"{name}.self", h,
                                          cfg.temporal_heads, cfg.self_window,
                                          state.self_caches[i], state.index,
                                          x_kv_new=h)
            h = layers.layer_norm(params, f"{name}.lnx0", x)
            x = x + layers.attention_step(params, f"{name}.cross0", h,
                                          cfg.temporal_heads, cfg.cross_window,
                                          state.speech_caches[i], state.index,
                                          x_kv_new=sp)
            h = layers.layer_norm(params, f"{name}.lnx1", x)
            x = x + layers.attention_step(params, f"{name}.cross1", h,
                                          cfg.temporal_heads, cfg.cross_window,
                                          state.text_caches[i], state.index,
                                          x_kv_new=tx)
            h = layers.layer_norm(params, f"{name}.ln2", x)
            x = x + layers.ffn(params, f"{name}.ffn", h)
        h_t = layers.layer_norm(params, "t.ln_out", x)
        logits = layers.linear(params, "head.0", h_t)
    state.index += 1
    return h_t.data[0, 0], logits.data[0, 0]


def embed_step_input(params: dict, cfg: GeneratorConfig, prev_row,
                     identity: int) -> np.ndarray:
    """Summed token embeddings of the previous row plus identity; the
    ZERO_INIT sentinel substitutes the learned start embedding."""
    if prev_row is ZERO_INIT:
        base = params["start"].data.copy()
    else:
        row = np.asarray(prev_row, dtype=np.int64)
        base = np.zeros(cfg.d_model)
        for k in range(cfg.k_total):
            base += params[f"emb.{k}"].data[row[k]]
    return base + params["ident"].data[identity]


def kinematic_level_logits(params: dict, cfg: GeneratorConfig,
                           h_t: np.ndarray, ident_vec: np.ndarray,
                           prefix, f_speech: np.ndarray, f_text: np.ndarray,
                           masks=None) -> np.ndarray:
    """Logits for level len(prefix) given the tokens decoded so far."""
    if masks is None:
        masks = kinematic_masks(cfg)
    mask, gate, _ = masks
    n = len(prefix)
    x = np.stack([params[f"emb.{p}"].data[prefix[p]] for p in range(n)])
    x = x + h_t + ident_vec
    with ad.no_grad():
        out = _kin_blocks(params, cfg, Tensor(x[None]), Tensor(f_speech[None]),
                          Tensor(f_text[None]), mask[:n, :n], gate[:n])
        logits = layers.linear(params, f"head.{n}", out[:, n - 1])
    return logits.data[0]


def _np_linear(params: dict, name: str, x: np.ndarray) -> np.ndarray:
    return x @ params[f"{name}.w"].data + params[f"{name}.b"].data


def _np_layer_norm(params: dict, name: str, x: np.ndarray,
                   eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * params[f"{name}.g"].data + \
        params[f"{name}.b"].data


def _np_gelu(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


class KinematicDecoder:
    """Incremental within-step level decoder (inference fast path).

    Processes level positions once each, caching self-attention keys and
    values, so decoding a full row costs O(K^2) instead of the O(K^3) of
    per-level prefix recomputation.  Matches the full-sequence forward of
    _kin_blocks exactly.
    """

    def __init__(self, params: dict, cfg: GeneratorConfig, h_t: np.ndarray,
                 ident_vec: np.ndarray, f_speech: np.ndarray,
                 f_text: np.ndarray, masks):
        self.params = params
        self.cfg = cfg
        self.base = h_t + ident_vec
        _, self.gate, self.lower = masks
        d, heads = cfg.d_model, cfg.kinematic_heads
        self.dh = d // heads
        n = cfg.k_total - 1
        self._k = [np.empty((n, heads, self.dh))
                   for _ in range(cfg.kinematic_layers)]
        self._v = [np.empty((n, heads, self.dh))
                   for _ in range(cfg.kinematic_layers)]
        self.pos = 0
        # cross keys/values and relative bias are fixed for the whole step
        self._cross = []
        for i in range(cfg.kinematic_layers):
            per_layer = []
            for c, mem in (("cross0", f_speech), ("cross1", f_text)):
                name = f"k{i}.{c}"
                kc = _np_linear(params, f"{name}.wk", mem).reshape(
                    -1, heads, self.dh)
                vc = _np_linear(params, f"{name}.wv", mem).reshape(
                    -1, heads, self.dh)
                per_layer.append((name, kc, vc, mem.shape[0]))
            self._cross.append(per_layer)

    def _self_attn(self, i: int, x: np.ndarray) -> np.ndarray:
        p, cfg, pos = self.params, self.cfg, self.pos
        name = f"k{i}.self"
        h = _np_layer_norm(p, f"k{i}.ln1", x)
        q = _np_linear(p, f"{name}.wq", h).reshape(-1, self.dh)
        self._k[i][pos] = _np_linear(p, f"{name}.wk", h).reshape(-1, self.dh)
        self._v[i][pos] = _np_linear(p, f"{name}.wv", h).reshape(-1, self.dh)
        if self.lower[pos]:
            keys = np.flatnonzero(self.lower[:pos + 1])
        else:
            keys = np.arange(pos + 1)
        kk = self._k[i][keys]                       # (L, H, dh)
        vv = self._v[i][keys]
        delta = np.clip(pos - keys, 0, cfg.k_total - 2)
        bias = p[f"{name}.bias"].data[:, delta]     # (H, L)
        scores = np.einsum("hd,lhd->hl", q, kk) / np.sqrt(self.dh) + bias
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        out = np.einsum("hl,lhd->hd", att, vv).reshape(-1)
        return x + _np_linear(p, f"{name}.wo", out)

    def _cross_attn(self, i: int, x: np.ndarray) -> np.ndarray:
        p, cfg, pos = self.params, self.cfg, self.pos
        if self.gate[pos, 0] == 0.0:
            return x
        for c, (name, kc, vc, n_mem) in enumerate(self._cross[i]):
            h = _np_layer_norm(p, f"k{i}.lnx{c}", x)
            q = _np_linear(p, f"{name}.wq", h).reshape(-1, self.dh)
            delta = np.clip(pos - np.arange(n_mem), 0, cfg.k_total - 1)
            bias = p[f"{name}.bias"].data[:, delta]
            scores = np.einsum("hd,lhd->hl", q, kc) / np.sqrt(self.dh) + bias
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            att = e / e.sum(axis=-1, keepdims=True)
            out = np.einsum("hl,lhd->hd", att, vc).reshape(-1)
            x = x + _np_linear(p, f"{name}.wo", out)
        return x

    def feed(self, token: int) -> np.ndarray:
        """Consume the token at the current position; returns logits for
        the next level."""
        p, cfg = self.params, self.cfg
        x = p[f"emb.{self.pos}"].data[token] + self.base
        for i in range(cfg.kinematic_layers):
            x = self._self_attn(i, x)
            x = self._cross_attn(i, x)
            h = _np_layer_norm(p, f"k{i}.ln2", x)
            x = x + _np_linear(p, f"k{i}.ffn.w2",
                               _np_gelu(_np_linear(p, f"k{i}.ffn.w1", h)))
        out = _np_layer_norm(p, "k.ln_out", x)
        logits = _np_linear(p, f"head.{self.pos + 1}", out)
        self.pos += 1
        return logits


# -- generation session --------------------------------------------------

class GenerationSession:
    """Full causal inference state for one stream.

    Holds conditional and unconditional temporal caches (the latter fed
    with the learned null embeddings for classifier-free guidance), one
    streaming decoder per body region, sampling settings that may change
    between steps, and the per-step latency log.  Deterministic given the
    seed: each step draws from a counter-based RNG keyed by (seed, step).
    """

    def __init__(self, params: dict, cfg: GeneratorConfig, codecs=None,
                 seed: int = 0):
        self.params = params
        self.cfg = cfg
        self.seed = seed
        self.top_p_temporal = cfg.top_p_temporal
        self.top_p_kinematic = cfg.top_p_kinematic
        self.temperature = cfg.temperature
        self.cfg_scale = cfg.cfg_scale
        self.cond_state = TemporalState(cfg)
        self.uncond_state = TemporalState(cfg)
        self.streams = ({r: c.open_stream() for r, c in codecs.items()}
                        if codecs else None)
        self.step = 0
        self.last_row = ZERO_INIT
        self.latency_log: list[float] = []
        self.closed = False
        self._masks = kinematic_masks(cfg)
        _, _, lower = self._masks
        self._conditioned = ~lower      # positions eligible for guidance

    def close(self):
        self.closed = True

    def _null_rows(self):
        return self.params["null_speech"].data, self.params["null_text"].data

    def step_tokens(self, condition: ConditionStep):
        """Advance one step without decoding; returns (row, va_prob, h_t)."""
        if self.closed:
            raise SessionClosed("session is closed")
        rng = step_rng(self.seed, self.step)
        p, cfg = self.params, self.cfg
        x_in = embed_step_input(p, cfg, self.last_row, condition.identity)
        sp_vec, tx_vec = level_pool(condition)
        null_sp, null_tx = self._null_rows()
        # the unconditional cache advances every step so guidance can be
        # turned on or off mid-stream without desyncing
        h_c, l0_c = temporal_step(p, cfg, self.cond_state, x_in, sp_vec, tx_vec)
        h_u, l0_u = temporal_step(p, cfg, self.uncond_state, x_in,
                                  null_sp.sum(axis=0), null_tx.sum(axis=0))
        first = sample_top_p(cfg_mix(l0_c, l0_u, self.cfg_scale),
                             self.top_p_temporal, self.temperature, rng)
        ident_vec = p["ident"].data[condition.identity]
        dec_c = KinematicDecoder(p, cfg, h_c, ident_vec, condition.f_speech,
                                 condition.f_text, self._masks)
        dec_u = KinematicDecoder(p, cfg, h_u, ident_vec, null_sp, null_tx,
                                 self._masks)
        prefix = [first]
        for lvl in range(1, cfg.k_total):
            lc = dec_c.feed(prefix[-1])
            lu = dec_u.feed(prefix[-1])
            lg = (cfg_mix(lc, lu, self.cfg_scale)
                  if self._conditioned[lvl - 1] else lc)
            prefix.append(sample_top_p(lg, self.top_p_kinematic,
                                       self.temperature, rng))
        row = np.asarray(prefix, dtype=np.int64)
        va_prob = float(1.0 / (1.0 + np.exp(-va_logits(p, Tensor(h_c)).data[0])))
        self.last_row = row
        self.step += 1
        return row, va_prob, h_c

    def generate_step(self, condition: ConditionStep):
        """One full step: tokens, two decoded frames per region, the
        voice-activity probability and the wall-clock latency."""
        t0 = time.perf_counter()
        row, va_prob, _ = self.step_tokens(condition)
        frames = None
        if self.streams is not None:
            cfg = self.cfg
            ku, kl = cfg.k_upper, cfg.k_lower
            frames = {
                "upper": self.streams["upper"].feed(row[:ku], self.step - 1),
                "lower": self.streams["lower"].feed(row[ku:ku + kl],
                                                    self.step - 1),
                "face": self.streams["face"].feed(row[ku + kl:], self.step - 1),
            }
        latency_ms = (time.perf_counter() - t0) * 1000.0
        self.latency_log.append(latency_ms)
        return row, frames, va_prob, latency_ms
