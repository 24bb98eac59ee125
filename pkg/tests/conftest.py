"""Shared fixtures.

Desk-scale trained artifacts are expensive (~30 min total on CPU), so
they are trained once into tests/_cache/ and reused across runs; delete
that directory to force retraining.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from gestream.codec import load_codec_file, save_codec
from gestream.config import PRESETS, codec_config
from gestream.motion import corpus_from_config, region_widths
from gestream.pipeline import load_bundle, skeleton_for, train_bundle
from gestream.training import train_codec

CACHE = Path(os.environ.get("GESTREAM_TEST_CACHE",
                            Path(__file__).parent / "_cache"))


@pytest.fixture(scope="session")
def tiny_preset():
    return PRESETS["tiny"]()


@pytest.fixture(scope="session")
def desk_preset():
    return PRESETS["desk"]()


@pytest.fixture(scope="session")
def tiny_bundle(tiny_preset):
    """Small trained bundle for protocol/plumbing tests (seconds to train)."""
    out = CACHE / "tiny"
    if not (out / "generator.ckpt").exists():
        train_bundle(tiny_preset, out)
    return load_bundle(out)


@pytest.fixture(scope="session")
def desk_bundle(desk_preset):
    """Desk-scale trained bundle backing the end-to-end behavior tests."""
    out = CACHE / "desk"
    if not (out / "generator.ckpt").exists():
        train_bundle(desk_preset, out)
    return load_bundle(out)


@pytest.fixture(scope="session")
def ablation_codecs(desk_preset):
    """Upper-body codecs trained with 1, 2, 4 and 8 quantizer levels."""
    spec = skeleton_for(desk_preset)
    out = CACHE / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    wu, _, _ = region_widths(spec)
    corpus = None
    codecs = {}
    for k in (1, 2, 4, 8):
        path = out / f"codec_upper_k{k}.ckpt"
        if k == desk_preset.generator.k_upper:
            # The desk bundle's upper codec is this exact configuration.
            desk_path = CACHE / "desk" / "codec_upper.ckpt"
            if desk_path.exists():
                codecs[k] = load_codec_file(desk_path)
                continue
        if not path.exists():
            if corpus is None:
                corpus = corpus_from_config(desk_preset.corpus, spec)
            cfg = codec_config(desk_preset, "upper", wu, n_levels=k)
            save_codec(path, train_codec(corpus, "upper", cfg,
                                         desk_preset.training, spec))
        codecs[k] = load_codec_file(path)
    return codecs


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
