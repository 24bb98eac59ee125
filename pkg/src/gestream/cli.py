"""Command line entry points for data synthesis, training, evaluation,
latency benchmarking, the streaming service and token dumps.

Failures exit nonzero with a single machine-readable JSON object on
stderr; exit codes distinguish missing checkpoints (3), bad on-disk
formats (4) and busy ports (5) from other package errors (2).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .codec import write_tokens
from .conditions import (JsonlConditionSource, SyntheticConditionSource,
                         write_condition_records)
from .config import FPS, PRESETS, preset_from_json
from .errors import (CheckpointMissing, FormatError, GestreamError,
                     PortInUse)
from .metrics import LatencyStats, latency_report, write_breakdown, \
    write_report
from .motion import corpus_from_config, read_motion, write_corpus
from .pipeline import (corpus_digest, evaluate_bundle, load_bundle,
                       skeleton_for, train_bundle)
from .training import encode_sample_tokens

EXIT_CODES = ((CheckpointMissing, 3), (FormatError, 4), (PortInUse, 5),
              (GestreamError, 2))


def _fail(exc: BaseException) -> None:
    code = 1
    for cls, c in EXIT_CODES:
        if isinstance(exc, cls):
            code = c
            break
    payload = {"error": type(exc).__name__, "message": str(exc),
               "exit_code": code}
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.Abort, SystemExit):
            raise
        except BaseException as exc:  # noqa: BLE001 - single exit funnel
            _fail(exc)
    return wrapper


def resolve_preset(config: str):
    if config in PRESETS:
        return PRESETS[config]()
    path = Path(config)
    if not path.exists():
        raise FormatError(f"config {config!r} is neither a preset name "
                          f"({', '.join(PRESETS)}) nor a file")
    return preset_from_json(path.read_text())


@click.group()
@click.option("--config", default="desk", show_default=True,
              help="Preset name or path to a preset JSON file.")
@click.option("--checkpoint-dir", default="checkpoints", show_default=True,
              type=click.Path())
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.pass_context
def main(ctx, config, checkpoint_dir, port, seed):
    """Streaming gesture synthesis toolkit."""
    ctx.ensure_object(dict)
    ctx.obj.update(config=config, checkpoint_dir=checkpoint_dir,
                   port=port, seed=seed)


@main.command("synth-data")
@click.option("--out", default="corpus", show_default=True,
              type=click.Path())
@click.pass_obj
@guarded
def synth_data(obj, out):
    """Generate the synthetic corpus and print its content hash."""
    preset = resolve_preset(obj["config"])
    cfg = preset.corpus
    if obj["seed"]:
        cfg = type(cfg)(**{**cfg.__dict__, "seed": obj["seed"]})
    spec = skeleton_for(preset)
    samples = corpus_from_config(cfg, spec)
    manifest = write_corpus(samples, out, spec)
    for i, s in enumerate(samples):
        source = SyntheticConditionSource(
            cfg.seed, s.identity, s.motion.n_frames / FPS,
            d=preset.generator.d_model,
            k_speech=preset.generator.k_speech,
            k_text=preset.generator.k_text)
        write_condition_records(
            iter(source), Path(out) / f"sample_{i:03d}.conditions.jsonl")
    click.echo(json.dumps({"manifest": str(manifest),
                           "samples": len(samples),
                           "sha256": corpus_digest(manifest)}))


@main.command("codec-train")
@click.pass_obj
@guarded
def codec_train(obj):
    """Train the three region codecs and write their checkpoints."""
    from .motion import region_widths
    from .pipeline import save_codecs, train_codecs

    preset = resolve_preset(obj["config"])
    spec = skeleton_for(preset)
    corpus = corpus_from_config(preset.corpus, spec)
    codecs = train_codecs(preset, corpus, spec, log_hook=_train_echo)
    save_codecs(codecs, obj["checkpoint_dir"], preset)
    click.echo(json.dumps({"checkpoint_dir": obj["checkpoint_dir"],
                           "regions": sorted(codecs)}))


@main.command("gen-train")
@click.pass_obj
@guarded
def gen_train(obj):
    """Train the token generator (trains codecs first if absent)."""
    out = Path(obj["checkpoint_dir"])
    preset = resolve_preset(obj["config"])
    if not (out / "codec_upper.ckpt").exists():
        train_bundle(preset, out, log_hook=_train_echo)
    else:
        from .codec import load_codec_file
        from .generator import save_generator
        from .training import train_generator, write_training_log

        spec = skeleton_for(preset)
        codecs = {r: load_codec_file(out / f"codec_{r}.ckpt")
                  for r in ("upper", "lower", "face")}
        corpus = corpus_from_config(preset.corpus, spec)
        params, log = train_generator(corpus, codecs, preset.generator,
                                      preset.training, preset.corpus.seed,
                                      log_hook=_train_echo)
        save_generator(out / "generator.ckpt", params, preset.generator)
        write_training_log(log, out / "training_log.csv")
    click.echo(json.dumps({"checkpoint_dir": str(out)}))


def _train_echo(*args):
    click.echo(" ".join(str(a) for a in args), err=True)


@main.command("evaluate")
@click.option("--out", default="report.json", show_default=True,
              type=click.Path())
@click.option("--minutes", default=1.0, show_default=True, type=float)
@click.pass_obj
@guarded
def evaluate(obj, out, minutes):
    """Run the metric suite; writes the JSON report and a CSV breakdown."""
    preset, spec, codecs, params, gen_cfg = load_bundle(obj["checkpoint_dir"])
    report, rows = evaluate_bundle(preset, spec, codecs, params, gen_cfg,
                                   minutes=minutes, seed=obj["seed"])
    lat = LatencyStats(**report["latency"])
    extra = {k: v for k, v in report.items()
             if k not in ("fgd", "beat_align", "l1_div", "facial_mse",
                          "mpjpe", "latency")}
    write_report(out, fgd_value=report["fgd"],
                 beat_align_value=report["beat_align"],
                 l1_div_value=report["l1_div"],
                 facial_mse_value=report["facial_mse"],
                 mpjpe_value=report["mpjpe"], latency=lat, extra=extra)
    write_breakdown(Path(out).with_suffix(".csv"), rows,
                    fields=list(rows[0]) if rows else [])
    click.echo(json.dumps(report, indent=2))


@main.command("bench-latency")
@click.option("--conditions", required=True, type=click.Path(exists=True),
              help="Recorded condition JSONL file to replay.")
@click.option("--steps", default=0, type=int,
              help="Cap on replayed steps (0 = whole file).")
@click.pass_obj
@guarded
def bench_latency(obj, conditions, steps):
    """Replay recorded conditions through generate_step; print latency."""
    from .generator import GenerationSession

    preset, spec, codecs, params, gen_cfg = load_bundle(obj["checkpoint_dir"])
    source = JsonlConditionSource(conditions)
    session = GenerationSession(params, gen_cfg, codecs=codecs,
                                seed=obj["seed"])
    n = 0
    for cond in source:
        session.generate_step(cond)
        n += 1
        if steps and n >= steps:
            break
    stats = latency_report(session.latency_log)
    click.echo(json.dumps({"steps": n, **stats.to_dict()}, indent=2))


@main.command("stream")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.pass_obj
@guarded
def stream(obj, host):
    """Serve the websocket streaming endpoint."""
    from .service import serve

    click.echo(f"serving on ws://{host}:{obj['port']}/session", err=True)
    serve(obj["checkpoint_dir"], port=obj["port"], host=host,
          seed=obj["seed"])


@main.command("dump-tokens")
@click.argument("motion_file", type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path())
@click.pass_obj
@guarded
def dump_tokens(obj, motion_file, out):
    """Encode a .mbm motion file to a .mbt token file."""
    _, spec, codecs, _, _ = load_bundle(obj["checkpoint_dir"])
    motion = read_motion(motion_file)
    motion.validate_against(spec)
    tokens = encode_sample_tokens(codecs, motion)
    path = Path(out) if out else Path(motion_file).with_suffix(".mbt")
    write_tokens(tokens, path)
    click.echo(json.dumps({"tokens": str(path),
                           "steps": int(tokens.shape[0]),
                           "levels": int(tokens.shape[1])}))


if __name__ == "__main__":
    main()
