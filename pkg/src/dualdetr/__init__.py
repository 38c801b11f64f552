"""Dual-level query-based temporal action detection."""
from .config import RunConfig
from .data import ActionInstance, VideoRecord, Window, make_windows, synth_generate
from .decoder import DetectionSet
from .errors import ConfigError, DualDetrError, EmptyInputError, FormatError, MatchingError
from .evaluation import EvalReport, det_map, seg_map
from .matching import hungarian, tiou
from .model import DualDETR
from .trainer import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ActionInstance", "ConfigError", "DetectionSet", "DualDETR", "DualDetrError",
    "EmptyInputError", "EvalReport", "FormatError", "MatchingError", "RunConfig",
    "VideoRecord", "Window", "det_map", "evaluate", "hungarian", "make_windows",
    "seg_map", "synth_generate", "tiou", "train",
]
