"""Configuration presets for codecs, generator and training runs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

FPS = 25
FRAMES_PER_STEP = 2          # token rate 12.5/s at 25 fps
SELF_WINDOW = 25             # self-attention context, in token rows
CROSS_WINDOW = 50            # cross-attention context, in token rows


@dataclass
class CodecConfig:
    region: str
    in_width: int = 0            # filled from skeleton at build time
    d_latent: int = 256
    v_codes: int = 256
    n_levels: int = 8
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 0                # 0 -> 4 * d_latent
    conv_kernel: int = 4
    window: int = SELF_WINDOW
    ema_decay: float = 0.99
    dead_code_threshold: float = 1e-3

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff else 4 * self.d_latent


@dataclass
class GeneratorConfig:
    d_model: int = 256
    v_codes: int = 256
    k_upper: int = 8
    k_lower: int = 8
    k_face: int = 4
    temporal_layers: int = 4
    temporal_heads: int = 2
    kinematic_layers: int = 2
    kinematic_heads: int = 1
    d_ff: int = 0
    self_window: int = SELF_WINDOW
    cross_window: int = CROSS_WINDOW
    n_identities: int = 8
    d_cond: int = 256
    k_speech: int = 8            # embedding rows per speech step
    k_text: int = 1
    top_p_temporal: float = 0.8
    top_p_kinematic: float = 0.95
    temperature: float = 0.9
    cfg_scale: float = 2.3

    @property
    def k_total(self) -> int:
        return self.k_upper + self.k_lower + self.k_face

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff else 4 * self.d_model

    def level_region(self, k: int) -> str:
        """Region of 0-based level index k; order upper -> lower -> face."""
        if k < self.k_upper:
            return "upper"
        if k < self.k_upper + self.k_lower:
            return "lower"
        return "face"


@dataclass
class TrainingConfig:
    alpha: float = 0.1           # contrastive weight
    beta: float = 0.01           # voice-activity weight
    gumbel_temperature: float = 0.4
    infonce_temperature: float = 0.07
    segment_len: int = 25        # tokens (2 s), non-overlapping
    cond_dropout: float = 0.1    # per-sequence null-condition probability
    batch_size: int = 8
    epochs: int = 60
    codec_epochs: int = 40
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    seed: int = 0
    seq_len_tokens: int = 125    # T during generator training


@dataclass
class CorpusConfig:
    seed: int = 7
    identities: int = 8
    minutes_per_identity: float = 6.0
    expr_dim: int = 100


@dataclass
class Preset:
    name: str
    corpus: CorpusConfig
    generator: GeneratorConfig
    training: TrainingConfig
    codec_d: int = 256
    codec_v: int = 256


def full_preset() -> Preset:
    """Full-size architecture; the corpus remains synthetic."""
    return Preset(name="full", corpus=CorpusConfig(),
                  generator=GeneratorConfig(), training=TrainingConfig())


def desk_preset() -> Preset:
    """Reduced widths so CPU training fits a desk budget.

    Layer counts, level counts, windows and sampling parameters match
    the full preset; only embedding widths, codebook sizes and the
    corpus scale shrink.
    """
    gen = GeneratorConfig(d_model=64, v_codes=8, d_cond=64, n_identities=16)
    train = TrainingConfig(batch_size=8, epochs=30, codec_epochs=32,
                           lr_max=3e-4, lr_min=3e-5)
    corpus = CorpusConfig(identities=16, minutes_per_identity=2.0, expr_dim=20)
    return Preset(name="desk", corpus=corpus, generator=gen, training=train,
                  codec_d=128, codec_v=8)


def tiny_preset() -> Preset:
    """Smoke-test scale: seconds of data, minimal widths."""
    gen = GeneratorConfig(d_model=32, v_codes=16, d_cond=32, n_identities=2)
    train = TrainingConfig(batch_size=2, epochs=2, codec_epochs=2,
                           segment_len=10, seq_len_tokens=50)
    corpus = CorpusConfig(identities=2, minutes_per_identity=0.25, expr_dim=8)
    return Preset(name="tiny", corpus=corpus, generator=gen, training=train,
                  codec_d=32, codec_v=16)


PRESETS = {"full": full_preset, "desk": desk_preset, "tiny": tiny_preset}


def codec_config(preset: Preset, region: str, in_width: int,
                 n_levels: int | None = None) -> CodecConfig:
    gen = preset.generator
    if region == "face":
        base = CodecConfig(region=region, n_layers=4, n_heads=2,
                           n_levels=gen.k_face)
    else:
        base = CodecConfig(region=region, n_layers=8, n_heads=4,
                           n_levels=gen.k_upper if region == "upper" else gen.k_lower)
    return replace(base, in_width=in_width, d_latent=preset.codec_d,
                   v_codes=preset.codec_v,
                   n_levels=n_levels if n_levels is not None else base.n_levels)


def preset_to_json(preset: Preset) -> str:
    return json.dumps(asdict(preset), indent=2)


def preset_from_json(text: str) -> Preset:
    raw = json.loads(text)
    return Preset(name=raw["name"],
                  corpus=CorpusConfig(**raw["corpus"]),
                  generator=GeneratorConfig(**raw["generator"]),
                  training=TrainingConfig(**raw["training"]),
                  codec_d=raw.get("codec_d", 256),
                  codec_v=raw.get("codec_v", 256))
