"""Colored-pointmap contrastive pretraining at desk scale (C++ core)."""

from ._upm import *  # noqa: F401,F403
from ._upm import (
    ConfigError,
    assign_splits,
    chamfer_distance,
    cosine_lr,
    evaluate,
    gen,
    generate_scene,
    inspect,
    linear_probe,
    load_scene,
    pretrain,
    render_depth_consistency_check,
    save_scene,
    soft_targets,
    validate_config,
)

__all__ = [
    "ConfigError",
    "assign_splits",
    "chamfer_distance",
    "cosine_lr",
    "evaluate",
    "gen",
    "generate_scene",
    "inspect",
    "linear_probe",
    "load_scene",
    "pretrain",
    "render_depth_consistency_check",
    "save_scene",
    "soft_targets",
    "validate_config",
]
