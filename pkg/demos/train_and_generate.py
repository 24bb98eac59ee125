"""Train the tiny preset from scratch, then stream a few seconds of
motion and print what comes out.

Takes a couple of minutes on a laptop CPU.  Checkpoints land in
./demo_checkpoints so the second run skips straight to generation.
"""

from pathlib import Path

import numpy as np

from gestream.config import PRESETS
from gestream.conditions import SyntheticConditionSource
from gestream.generator import GenerationSession
from gestream.pipeline import load_bundle, train_bundle

OUT = Path("demo_checkpoints")

if not (OUT / "generator.ckpt").exists():
    print("training tiny bundle into", OUT)
    train_bundle(PRESETS["tiny"](), OUT,
                 log_hook=lambda *a: print(" ", *a))

preset, spec, codecs, params, gen_cfg = load_bundle(OUT)
src = SyntheticConditionSource(seed=7, identity=0, duration_s=4.0,
                               d=gen_cfg.d_model,
                               k_speech=gen_cfg.k_speech,
                               k_text=gen_cfg.k_text)
session = GenerationSession(params, gen_cfg, codecs=codecs, seed=0)

print(f"\n{'step':>4}  {'va':>5}  {'ms':>6}  wrist height")
wrists = spec.joints_named("wrist")
for t in range(40):
    row, frames, va, ms = session.generate_step(src.next())
    body = np.concatenate([frames["upper"], frames["lower"], frames["face"]],
                          axis=1)
    from gestream.motion import split_regions
    m = split_regions(body, spec)
    z = m.joint_positions(spec)[:, wrists, 2].mean()
    print(f"{t:4d}  {va:5.2f}  {ms:6.1f}  {z:+.3f} m")
