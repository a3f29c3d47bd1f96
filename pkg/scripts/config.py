"""
JSON experiment and simulation configs, validated into frozen dataclasses.

Example experiment config::

    {
      "paths": {"sessions": "run/sessions", "features": "run/features",
                "masks": "run/masks", "out": "run/out"},
      "grids": {"2x": "10x10", "4x": "20x20", "10x": "50x50", "20x": "60x60"},
      "magnifications": ["10x"],
      "attention_model": {"dim": 384, "depth": 12, "n_heads": 8},
      "expertise_model": {"channels": 16, "grid": "20x"},
      "hyper": {"batch_size": 8, "lr": 1e-4, "weight_decay": 1e-4, "epochs": 50},
      "k": 5, "seed": 0, "cohort": "specialist", "task": "3way"
    }
"""

import os
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import ConfigError
from .heatmap import DEFAULT_GRIDS, DEFAULT_MAG_BINS, GridSpec, MagBin, check_bins
from .io import read_json
from .models import ExpertiseNetConfig, ProstAttFormerConfig
from .synth import DEFAULT_PROFILES, load_profiles
from .telemetry import DEFAULT_FEATURE_DIM, DEFAULT_GRADE_DOMAIN
from .training import COHORTS, HyperParams

TASKS = {"3way": 3, "2way": 2}
DEFAULT_OUT_DIR = "attnscope_out"


def _known_keys(section, data, allowed):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


def _hyper(data):
    _known_keys("hyper", data, HyperParams.__dataclass_fields__)
    try:
        return HyperParams(**data)
    except TypeError as e:
        raise ConfigError(f"hyper: {e}")


@dataclass(frozen=True)
class ExperimentConfig:
    sessions_dir: Optional[str] = None
    features_dir: Optional[str] = None
    masks_dir: Optional[str] = None
    out_dir: str = DEFAULT_OUT_DIR
    grids: dict = field(default_factory=lambda: dict(DEFAULT_GRIDS))
    mag_bins: tuple = DEFAULT_MAG_BINS
    magnifications: tuple = ("2x", "4x", "10x", "20x")
    attention_model: dict = field(default_factory=dict)
    expertise_model: dict = field(default_factory=dict)
    hyper: HyperParams = HyperParams()
    k: int = 5
    seed: int = 0
    cohort: str = "specialist"
    task: str = "3way"
    grade_domain: tuple = DEFAULT_GRADE_DOMAIN

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.cohort not in COHORTS:
            raise ConfigError(f"Unsupported cohort filter: {self.cohort}")
        if self.task not in TASKS:
            raise ConfigError(f"Unsupported task: {self.task}")
        labels = {b.label for b in self.mag_bins}
        for mag in self.magnifications:
            if mag not in self.grids or mag not in labels:
                raise ConfigError(f"magnification {mag} needs both a grid and a bin")

    def bin(self, label):
        for b in self.mag_bins:
            if b.label == label:
                return b
        raise ConfigError(f"no magnification bin labelled {label}")

    def attention_config(self, mag):
        try:
            return ProstAttFormerConfig(grid=self.grids[mag], **self.attention_model)
        except TypeError as e:
            raise ConfigError(f"attention_model: {e}")

    @property
    def expertise_grid_label(self):
        return self.expertise_model.get("grid", "20x")

    def expertise_config(self):
        opts = {k: v for k, v in self.expertise_model.items() if k != "grid"}
        opts.setdefault("dim", self.attention_model.get("dim", DEFAULT_FEATURE_DIM))
        try:
            return ExpertiseNetConfig(grid=self.grids[self.expertise_grid_label], n_classes=TASKS[self.task], **opts)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"expertise_model: {e}")

    def require(self, *names):
        """Check that the named path settings are configured and exist."""
        for name in names:
            path = getattr(self, name)
            if path is None:
                raise ConfigError(f"config has no '{name}' path")
            if not os.path.exists(path):
                raise FileNotFoundError(f"{name} not found: {path}")


def _grids(data):
    grids = dict(DEFAULT_GRIDS)
    for label, text in data.items():
        grids[label] = GridSpec.parse(text, label)
    return grids


def _mag_bins(data):
    try:
        bins = tuple(MagBin(d["label"], float(d["lo"]), float(d["hi"])) for d in data)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"mag_bins: {e}")
    return check_bins(bins)


def experiment_config_from_dict(data, seed=None):
    _known_keys("config", data, (
        "paths", "grids", "mag_bins", "magnifications", "attention_model",
        "expertise_model", "hyper", "k", "seed", "cohort", "task", "grade_domain", "simulate",
    ))
    paths = data.get("paths", {})
    _known_keys("paths", paths, ("sessions", "features", "masks", "out"))

    kwargs = {
        "sessions_dir": paths.get("sessions"),
        "features_dir": paths.get("features"),
        "masks_dir": paths.get("masks"),
        "out_dir": paths.get("out", DEFAULT_OUT_DIR),
        "grids": _grids(data.get("grids", {})),
        "attention_model": dict(data.get("attention_model", {})),
        "expertise_model": dict(data.get("expertise_model", {})),
        "hyper": _hyper(data.get("hyper", {})),
    }
    if "mag_bins" in data:
        kwargs["mag_bins"] = _mag_bins(data["mag_bins"])
    if "magnifications" in data:
        kwargs["magnifications"] = tuple(data["magnifications"])
    if "grade_domain" in data:
        kwargs["grade_domain"] = tuple(int(g) for g in data["grade_domain"])
    for key in ("k", "seed", "cohort", "task"):
        if key in data:
            kwargs[key] = data[key]

    try:
        cfg = ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid experiment config: {e}")
    if seed is not None:
        cfg = replace(cfg, seed=seed, hyper=replace(cfg.hyper, seed=seed))
    return cfg


def load_experiment_config(path, seed=None):
    return experiment_config_from_dict(read_json(path), seed)


@dataclass(frozen=True)
class SynthConfig:
    n_slides: int = 30
    readers_per_expertise: int = 4
    seed: int = 0
    roi_count: int = 2
    feature_dim: int = DEFAULT_FEATURE_DIM
    noise_sd: float = 0.1
    feature_grids: Optional[tuple] = None
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))

    def __post_init__(self):
        if self.n_slides < 0 or self.readers_per_expertise < 0 or self.feature_dim < 1:
            raise ConfigError(f"invalid simulation config: {self}")


def synth_config_from_dict(data, seed=None):
    data = dict(data)
    _known_keys("simulate", data, SynthConfig.__dataclass_fields__)
    if "profiles" in data:
        data["profiles"] = load_profiles(data["profiles"])
    if data.get("feature_grids") is not None:
        data["feature_grids"] = tuple(data["feature_grids"])
    if seed is not None:
        data["seed"] = seed
    try:
        return SynthConfig(**data)
    except TypeError as e:
        raise ConfigError(f"invalid simulation config: {e}")


def load_synth_config(path, seed=None):
    data = read_json(path)
    return synth_config_from_dict(data.get("simulate", data), seed)
