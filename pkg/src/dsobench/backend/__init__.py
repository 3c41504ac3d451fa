"""Keyframe management, depth initialisation, window optimisation and map export."""

from .ba import BAReport, bundle_adjust_window
from .config import MODES, PipelineConfig
from .keyframes import create_keyframe, evict_keyframe, export_map, keyframe_decision
from .mono_init import initialize_mono
from .pipeline import PipelineResult, run_pipeline, write_results
from .stereo import initialize_stereo, match_stereo
from .window import (
    BackendError,
    BundleAdjustmentError,
    InitializationFailed,
    Keyframe,
    KeyframeCreationFailed,
    SlidingWindowState,
)

__all__ = [
    "BAReport", "BackendError", "BundleAdjustmentError", "InitializationFailed", "Keyframe",
    "KeyframeCreationFailed", "MODES", "PipelineConfig", "PipelineResult", "SlidingWindowState",
    "bundle_adjust_window", "create_keyframe", "evict_keyframe", "export_map", "initialize_mono",
    "initialize_stereo", "keyframe_decision", "match_stereo", "run_pipeline", "write_results",
]
