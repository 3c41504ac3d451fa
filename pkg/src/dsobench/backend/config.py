"""Pipeline configuration and the three presets (mono, stereo, lite)."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from ..keyvalue import ConfigError, as_bool, parse_keyvalue
from ..photometric import HUBER_GAMMA

MODES = ("mono", "stereo", "lite")


@dataclass
class PipelineConfig:
    mode: str = "stereo"
    window_size: int = 7
    points_per_keyframe: int = 2000
    kf_flow_threshold: float = 30.0       # mean pixel flow since the reference keyframe
    kf_brightness_threshold: float = 0.1  # |a_j - a_ref|
    kf_min_valid_fraction: float = 0.6
    kf_flow_only: bool = False
    tracking_mode: str = "forward"
    pyramid_levels: int = 4
    tracking_iterations: int = 50
    tracking_affine_prior: float = 10.0   # per point; the data term is O(1) per point
    huber_gamma: float = HUBER_GAMMA
    ba_iterations: int = 10
    ba_tolerance: float = 1e-6
    stereo_weight: float = 1.0
    affine_prior: float = 1e4             # per keyframe, pulls (a, b) towards zero in the window optimisation
    outlier_threshold: float = 3.0        # mean |r| in units of gamma
    sad_window: int = 9
    min_disparity: float = 1.0
    max_disparity: float = 128.0
    ratio_test: float = 0.9
    export_max_rel_std: float = 0.003
    export_min_observations: int = 2
    noise_sigma: float = 2.0 / 255.0      # photometric noise for depth variances
    init_max_attempts: int = 100
    init_levels: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.tracking_mode not in ("forward", "inverse"):
            raise ConfigError(f"unknown tracking mode {self.tracking_mode!r}")
        for name in ("window_size", "points_per_keyframe", "pyramid_levels", "tracking_iterations",
                     "ba_iterations", "sad_window", "export_min_observations", "init_max_attempts",
                     "init_levels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        for name in ("kf_flow_threshold", "kf_brightness_threshold", "huber_gamma", "tracking_affine_prior", "ba_tolerance",
                     "max_disparity", "ratio_test", "export_max_rel_std", "noise_sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.min_disparity < self.max_disparity:
            raise ConfigError("need 0 < min_disparity < max_disparity")
        if self.sad_window % 2 == 0:
            raise ConfigError("sad_window must be odd")

    @property
    def stereo(self) -> bool:
        return self.mode in ("stereo", "lite")

    @classmethod
    def preset(cls, mode: str, **overrides) -> "PipelineConfig":
        if mode == "mono":
            base = cls(mode="mono")
        elif mode == "stereo":
            base = cls(mode="stereo")
        elif mode == "lite":
            base = cls(mode="lite", tracking_mode="inverse", kf_flow_only=True, kf_flow_threshold=120.0,
                       points_per_keyframe=800, window_size=5, ba_iterations=4)
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, kv: dict[str, str], mode: str | None = None) -> "PipelineConfig":
        kv = dict(kv)
        mode = mode or kv.pop("mode", "stereo")
        kv.pop("mode", None)
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown pipeline key {key!r}")
            t = types[key]
            try:
                if t == "bool":
                    args[key] = as_bool(raw)
                elif t == "int":
                    args[key] = int(raw)
                elif t == "float":
                    args[key] = float(raw)
                else:
                    args[key] = raw
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        return cls.preset(mode, **args)

    @classmethod
    def from_text(cls, text: str, mode: str | None = None) -> "PipelineConfig":
        return cls.from_dict(parse_keyvalue(text, "pipeline config"), mode)
