"""Streaming co-speech gesture synthesis: residual-VQ motion codecs, a
two-axis autoregressive token generator, evaluation metrics and a
real-time websocket service."""

__version__ = "0.1.0"

from .config import FPS, FRAMES_PER_STEP, PRESETS, Preset  # noqa: F401
from .errors import GestreamError  # noqa: F401
from .generator import GenerationSession  # noqa: F401
from .geometry import SkeletonSpec, default_skeleton  # noqa: F401
from .motion import MotionSequence, synth_corpus  # noqa: F401
