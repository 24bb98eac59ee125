"""What each evaluation metric reports on known inputs.

Everything here has a hand-checkable answer: identical distributions,
a constant pose, beats read straight off the motion.
"""

import numpy as np

from gestream.config import PRESETS
from gestream.metrics import (beat_align, fgd, gesture_beats, l1_div,
                              latency_report, mpjpe)
from gestream.motion import synth_corpus
from gestream.pipeline import skeleton_for

spec = skeleton_for(PRESETS["tiny"]())
motion = synth_corpus(3, 1, 0.5, spec)[0].motion
rng = np.random.default_rng(0)

# FGD of a distribution against itself is zero
x = rng.normal(size=(500, 16))
print("fgd(X, X)             ", fgd(x, x.copy()))
print("fgd(X, X + 1)         ", fgd(x, x + 1.0))   # k * 1^2 = 16

# beat alignment: perfect when scored against its own detected beats,
# exp(-dt^2 / 2 sigma^2) when every beat is off by dt
beats = gesture_beats(motion, spec)
print("beat_align, self      ", beat_align(motion, beats, spec))
print("beat_align, +100 ms   ", beat_align(motion, beats + 0.1, spec),
      "(= exp(-1/2) =", np.exp(-0.5), ")")

# diversity: mean pairwise L1 distance between pose vectors
poses = np.array([[0.0, 0.0], [1.0, 0.0]])
print("l1_div two poses      ", l1_div(poses))
print("l1_div constant       ", l1_div(np.ones((10, 4))))

# mpjpe: shift the root 3 cm and every joint moves 3 cm
import copy
shifted = copy.copy(motion)
lower = motion.lower.copy()
lower[:, -7:-4] += np.array([0.03, 0.0, 0.0])
shifted.lower = lower
print("mpjpe, 3 cm root shift", mpjpe(motion, shifted, spec))

stats = latency_report(list(rng.uniform(10, 30, size=200)), warmup=10)
print("latency p50/p95       ", stats.p50, stats.p95)
