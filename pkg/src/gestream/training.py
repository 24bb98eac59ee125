"""Training loops for codecs and the token generator.

The generator trains teacher-forced with L = L_CE + alpha*L_con +
beta*L_va: cross-entropy over every (step, level) position, an InfoNCE
contrastive term between ground-truth and Gumbel-Softmax-reconstructed
latent segments, and binary cross-entropy on the voice-activity head.
Condition dropout replaces a sequence's speech/text embeddings with the
learned null embeddings so classifier-free guidance has a trained
unconditional branch.

With alpha = beta = 0 the auxiliary forward passes (and their RNG draws)
are skipped entirely, so a run reduces bit-for-bit to plain CE training.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from . import autodiff as ad
from . import generator as gen
from .autodiff import AdamW, Tensor, cosine_lr
from .codec import RegionCodec, bce_with_logits, codec_loss, rvq_quantize
from .conditions import SyntheticConditionSource, level_pool
from .config import (FPS, CodecConfig, GeneratorConfig, TrainingConfig)
from .errors import DegenerateInput, NonFiniteValue, ShapeError
from .geometry import SkeletonSpec

REGIONS = ("upper", "lower", "face")


# -- objectives ----------------------------------------------------------

def ce_loss(logits_levels, targets: np.ndarray):
    """Mean cross-entropy over all (t, k) positions.

    logits_levels: K tensors of shape (B, T, V); targets: (B, T, K) ints.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if len(logits_levels) != targets.shape[-1]:
        raise ShapeError("level count mismatch between logits and targets")
    b, t = targets.shape[:2]
    bi = np.repeat(np.arange(b), t)
    ti = np.tile(np.arange(t), b)
    total = None
    for k, lg in enumerate(logits_levels):
        lp = ad.log_softmax(lg, axis=-1)
        picked = lp[(bi, ti, targets[..., k].reshape(-1))]
        term = -ad.tmean(picked)
        total = term if total is None else total + term
    return total * (1.0 / len(logits_levels))


def gumbel_latent(logits_levels, codebooks, temperature: float,
                  rng: np.random.Generator, hard: bool = True):
    """Differentiable latent reconstruction for one region.

    Sums, over the region's levels, a (straight-through) Gumbel-Softmax
    one-hot sample times that level's codebook; (B, T, V) logits per
    level -> (B, T, d) latents with gradient through the soft relaxation.
    """
    if temperature <= 0:
        raise ShapeError("gumbel temperature must be positive")
    if len(logits_levels) != len(codebooks):
        raise ShapeError("one codebook per level required")
    z = None
    for lg, cb in zip(logits_levels, codebooks):
        if lg.shape[-1] != cb.shape[0]:
            raise ShapeError("logit width differs from codebook size")
        u = rng.random(lg.shape)
        g = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
        soft = ad.softmax((lg + g) * (1.0 / temperature), axis=-1)
        if hard:
            arg = soft.data.argmax(axis=-1)
            onehot = np.zeros_like(soft.data)
            np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
            sample = ad.straight_through(onehot, soft)
        else:
            sample = soft
        zk = ad.matmul(sample, Tensor(cb))
        z = zk if z is None else z + zk
    return z


def _pool_segments(z, segment_len: int):
    """(B, T, d) -> (B*S, d) mean-pooled non-overlapping segments."""
    b, t, d = z.shape
    s = t // segment_len
    if s < 1:
        raise ShapeError(f"sequence of {t} tokens shorter than one segment")
    z = z[:, :s * segment_len]
    z = ad.reshape(z, (b, s, segment_len, d))
    return ad.reshape(ad.tmean(z, axis=2), (b * s, d))


def infonce(z_pred, z_gt, tau: float, segment_len: int):
    """Segment-level InfoNCE with cosine similarity.

    Matching GT/predicted segments are positives; every mismatched pair
    across the pooled batch-of-segments is a negative.
    """
    p = _pool_segments(z_pred, segment_len)
    g = _pool_segments(z_gt, segment_len)
    for v in (p, g):
        if np.any(np.linalg.norm(v.data, axis=-1) < 1e-12):
            raise DegenerateInput("zero pooled latent segment")
    pn = p * ad.power(ad.tsum(p * p, axis=-1, keepdims=True), -0.5)
    gn = g * ad.power(ad.tsum(g * g, axis=-1, keepdims=True), -0.5)
    sim = ad.matmul(gn, ad.swapaxes(pn, 0, 1)) * (1.0 / tau)
    lsm = ad.log_softmax(sim, axis=-1)
    n = sim.shape[0]
    diag = lsm[(np.arange(n), np.arange(n))]
    return -ad.tmean(diag)


def va_loss(logits, labels: np.ndarray):
    """Mean BCE of per-step voice-activity logits against 0/1 labels."""
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    return bce_with_logits(logits, labels)


# -- codec training ------------------------------------------------------

def train_codec(corpus, region: str, cfg: CodecConfig,
                train_cfg: TrainingConfig, spec: SkeletonSpec,
                log_hook=None) -> RegionCodec:
    """Trains one region codec on random crops of length 2..250 frames."""
    rng = np.random.default_rng(train_cfg.seed + 1000 * REGIONS.index(region))
    codec = RegionCodec(cfg, rng=np.random.default_rng(train_cfg.seed))
    blocks = [np.asarray(getattr(s.motion, region), dtype=np.float64)
              for s in corpus]
    rots = [s.motion.rotations_6d(spec) for s in corpus]
    trans = [s.motion.root_translation(spec) for s in corpus]
    per_epoch = sum(max(1, b.shape[0] // 250) for b in blocks)
    total_steps = train_cfg.codec_epochs * per_epoch
    opt = AdamW(codec.params, lr=train_cfg.lr_max,
                weight_decay=train_cfg.weight_decay)
    for step in range(total_steps):
        i = int(rng.integers(len(blocks)))
        n_total = blocks[i].shape[0]
        length = int(rng.integers(2, min(250, n_total) + 1))
        start = int(rng.integers(0, n_total - length + 1))
        x = blocks[i][start:start + length]
        if x.shape[0] % 2 == 1:
            x = np.concatenate([x, x[-1:]], axis=0)
        n = x.shape[0]
        r_all = rots[i][start:start + n]
        t_all = trans[i][start:start + n]
        if r_all.shape[0] < n:      # crop ran past the end after padding
            r_all = np.concatenate([r_all, r_all[-1:]], axis=0)
            t_all = np.concatenate([t_all, t_all[-1:]], axis=0)

        opt.lr = cosine_lr(step, total_steps, train_cfg.lr_max,
                           train_cfg.lr_min)
        z_e = codec.encode_latent(Tensor(x[None]))
        flat = z_e.data[0]
        indices, quantized, _ = rvq_quantize(flat, codec.rvq.codebooks)
        commitment, residuals = [], []
        partial = np.zeros_like(flat)
        for k in range(cfg.n_levels):
            residuals.append(flat - partial)
            chosen = codec.rvq.codebooks[k][indices[:, k]]
            commitment.append((z_e - Tensor(partial[None]), chosen[None]))
            partial = partial + chosen
        z_q = ad.straight_through(quantized[None], z_e)
        x_pred = codec.decode_latent(z_q)
        loss, comps = codec_loss(codec, x[None], x_pred, commitment, spec,
                                 full_gt=(r_all[None], t_all[None]))
        opt.zero_grad()
        loss.backward()
        opt.step()
        codec.rvq.ema_update(residuals, indices, cfg.ema_decay,
                             cfg.dead_code_threshold, rng,
                             encoder_outputs=flat)
        if log_hook is not None:
            log_hook(step, float(loss.data), comps)
    return codec


# -- generator training --------------------------------------------------

def encode_sample_tokens(codecs: dict, motion) -> np.ndarray:
    """Full token grid (T, K) for one motion sample, regions concatenated
    in level order upper, lower, face."""
    cols = [codecs[r].encode(getattr(motion, r)) for r in REGIONS]
    t = min(c.shape[0] for c in cols)
    return np.concatenate([c[:t] for c in cols], axis=1)


def prepare_sequences(corpus, codecs: dict, gen_cfg: GeneratorConfig,
                      train_cfg: TrainingConfig, corpus_seed: int) -> list:
    """Windows every corpus sample into fixed-length training sequences
    with aligned tokens, condition embeddings and VA labels."""
    ks, kt = gen_cfg.k_speech, gen_cfg.k_text
    splits = np.cumsum([gen_cfg.k_upper, gen_cfg.k_lower])
    seqs = []
    for sample in corpus:
        tokens = encode_sample_tokens(codecs, sample.motion)
        t_full = tokens.shape[0]
        src = SyntheticConditionSource(corpus_seed, sample.identity,
                                       sample.motion.n_frames / FPS,
                                       d=gen_cfg.d_model, k_speech=ks,
                                       k_text=kt)
        steps = [src.next() for _ in range(min(src.n_steps, t_full))]
        t_full = min(t_full, len(steps))
        speech = np.stack([s.f_speech for s in steps])
        text = np.stack([s.f_text for s in steps])
        va = np.array([s.va for s in steps], dtype=np.float64)
        z_gt = {}
        reg_tokens = np.split(tokens[:t_full], splits, axis=1)
        for r, tk in zip(REGIONS, reg_tokens):
            z_gt[r] = codecs[r].tokens_to_latent(tk)
        length = train_cfg.seq_len_tokens
        for start in range(0, t_full - length + 1, length):
            sl = slice(start, start + length)
            seqs.append({
                "tokens": tokens[sl],
                "speech": speech[sl],
                "text": text[sl],
                "va": va[sl],
                "identity": sample.identity,
                "z_gt": {r: z_gt[r][sl] for r in REGIONS},
            })
    if not seqs:
        raise ShapeError("corpus shorter than one training sequence")
    return seqs


def _region_slices(gen_cfg: GeneratorConfig):
    ku, kl, kf = gen_cfg.k_upper, gen_cfg.k_lower, gen_cfg.k_face
    return {"upper": slice(0, ku), "lower": slice(ku, ku + kl),
            "face": slice(ku + kl, ku + kl + kf)}


def generator_train_step(params: dict, gen_cfg: GeneratorConfig,
                         train_cfg: TrainingConfig, codecs: dict,
                         batch: list, rng: np.random.Generator,
                         gumbel_hard: bool = True):
    """One teacher-forced batch; returns the total loss tensor plus the
    component floats (ce, con, va).

    gumbel_hard=False keeps the soft relaxation in the forward pass so
    the whole objective is smooth; finite-difference checks use it.
    """
    b = len(batch)
    t = batch[0]["tokens"].shape[0]
    d = gen_cfg.d_model
    tokens = np.stack([s["tokens"] for s in batch])
    identities = np.array([s["identity"] for s in batch])
    speech = np.stack([s["speech"] for s in batch])       # (B,T,ks,d)
    text = np.stack([s["text"] for s in batch])

    drop = rng.random(b) < train_cfg.cond_dropout
    sp_rows, tx_rows = speech.copy(), text.copy()
    sp_rows[drop] = 0.0
    tx_rows[drop] = 0.0
    m_rows = Tensor(drop.astype(np.float64)[:, None, None, None])
    speech_t = Tensor(sp_rows) + ad.reshape(params["null_speech"],
                                            (1, 1, gen_cfg.k_speech, d)) * m_rows
    text_t = Tensor(tx_rows) + ad.reshape(params["null_text"],
                                          (1, 1, gen_cfg.k_text, d)) * m_rows
    pooled_sp = ad.tsum(speech_t, axis=2)
    pooled_tx = ad.tsum(text_t, axis=2)

    h, logits0 = gen.temporal_forward_train(params, gen_cfg, tokens,
                                            pooled_sp, pooled_tx, identities)
    kin = gen.kinematic_forward_train(params, gen_cfg, tokens, h,
                                      speech_t, text_t, identities)
    logits_levels = [logits0] + kin
    l_ce = ce_loss(logits_levels, tokens)
    total = l_ce
    con_f = va_f = 0.0

    if train_cfg.alpha > 0:
        slices = _region_slices(gen_cfg)
        con = None
        for r in REGIONS:
            sl = slices[r]
            z_pred = gumbel_latent(logits_levels[sl],
                                   codecs[r].rvq.codebooks,
                                   train_cfg.gumbel_temperature, rng,
                                   hard=gumbel_hard)
            z_gt = Tensor(np.stack([s["z_gt"][r] for s in batch]))
            term = infonce(z_pred, z_gt, train_cfg.infonce_temperature,
                           train_cfg.segment_len)
            con = term if con is None else con + term
        con = con * (1.0 / len(REGIONS))
        con_f = float(con.data)
        total = total + train_cfg.alpha * con

    if train_cfg.beta > 0:
        labels = np.stack([s["va"] for s in batch])[..., None]
        lva = va_loss(gen.va_logits(params, h), labels)
        va_f = float(lva.data)
        total = total + train_cfg.beta * lva

    if not np.isfinite(total.data):
        raise NonFiniteValue("generator loss is not finite")
    return total, float(l_ce.data), con_f, va_f


def train_generator(corpus, codecs: dict, gen_cfg: GeneratorConfig,
                    train_cfg: TrainingConfig, corpus_seed: int,
                    params: dict | None = None, log_hook=None):
    """Full training run; returns (params, log rows).

    Log rows are (epoch, L_CE, L_con, L_va, lr), epoch averages.
    """
    rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = gen.init_generator(gen_cfg, seed=train_cfg.seed)
    seqs = prepare_sequences(corpus, codecs, gen_cfg, train_cfg, corpus_seed)
    bs = train_cfg.batch_size
    steps_per_epoch = math.ceil(len(seqs) / bs)
    total_steps = train_cfg.epochs * steps_per_epoch
    opt = AdamW(params, lr=train_cfg.lr_max,
                weight_decay=train_cfg.weight_decay)
    log = []
    gstep = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(seqs))
        sums = np.zeros(3)
        for s0 in range(0, len(seqs), bs):
            batch = [seqs[i] for i in order[s0:s0 + bs]]
            opt.lr = cosine_lr(gstep, total_steps, train_cfg.lr_max,
                               train_cfg.lr_min)
            total, ce_f, con_f, va_f = generator_train_step(
                params, gen_cfg, train_cfg, codecs, batch, rng)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += (ce_f, con_f, va_f)
            gstep += 1
        row = (epoch, *(sums / steps_per_epoch), opt.lr)
        log.append(row)
        if log_hook is not None:
            log_hook(*row)
    return params, log


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "ce", "con", "va", "lr"])
        for r in rows:
            w.writerow(list(r))
