"""
Run Configuration
=================
Training profiles, user overrides and hyper-parameter grids.

This module provides:
- YAML config loading with a section/key accessor
- Named profiles (quickstart, full) as base values
- Merging of user overrides over a profile, then validation into TrainConfig
- The default hyper-parameter grid and grid-file expansion in
  lexicographic cell order
"""
import itertools
import logging
import os
from typing import Any, Dict, List, Mapping, Optional

import yaml
from pydantic import ValidationError as PydanticValidationError

from modules.data import SyntheticSpec
from modules.error_handler import ConfigError
from modules.features import FeatureConfig
from modules.train import GRID_FIELDS, TrainConfig

logger = logging.getLogger("config_enhanced")

DEFAULT_CONFIG_PATH = "./config/config.yaml"


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Load a YAML config; a missing file yields an empty config."""
    path = path or DEFAULT_CONFIG_PATH
    if not os.path.exists(path):
        logger.debug(f"No config file at {path}, using defaults")
        return {}
    with open(path, 'r', encoding='utf-8') as f:
        try:
            loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return loaded


def get_conf(config: Mapping[str, Any], section: str, key: str, default=None):
    """Get a configuration value."""
    return (config.get(section) or {}).get(key, default)


class TrainingProfiles:
    """
    Base hyper-parameter sets.

    - quickstart: small network, short patience, for desk-scale synthetic runs
    - full: the complete training budget (200 epochs, patience 15)
    """

    FULL = {
        'batch_size': 8,
        'dropout': 0.2,
        'h_size': 10,
        'f_size': 100,
        'l2_strength': 0.01,
        'max_epochs': 200,
        'patience': 15,
        'lambda_gamma': 10.0,
    }

    QUICKSTART = {
        **FULL,
        'f_size': 20,
        'max_epochs': 40,
        'patience': 8,
    }

    PROFILES = {'full': FULL, 'quickstart': QUICKSTART}

    @staticmethod
    def get_profile(name: str = "full") -> Dict[str, Any]:
        if name not in TrainingProfiles.PROFILES:
            raise ConfigError(
                f"unknown profile '{name}' (choose from {sorted(TrainingProfiles.PROFILES)})"
            )
        return dict(TrainingProfiles.PROFILES[name])

    @staticmethod
    def merge_with_user_config(base_config: Dict[str, Any], user_config: Mapping[str, Any]) -> Dict[str, Any]:
        """
        Merge user values over a base.

        Args:
            base_config: Profile values
            user_config: Overrides (may be nested under a 'train' key)

        Returns:
            Merged dictionary (not yet validated)

        Raises:
            ConfigError: key that TrainConfig does not know
        """
        # Handle nested structure (config.yaml format)
        user = user_config['train'] if 'train' in user_config else user_config
        merged = dict(base_config)
        known = set(TrainConfig.model_fields)
        for key, value in user.items():
            if key == 'profile':
                continue
            if key not in known:
                raise ConfigError(f"unknown train setting '{key}'")
            if merged.get(key) != value:
                logger.info(f"User override: {key} = {value}")
            merged[key] = value
        return merged

    @staticmethod
    def validate_config(config: Mapping[str, Any]) -> TrainConfig:
        """Validate merged values into a TrainConfig."""
        try:
            return TrainConfig.model_validate(dict(config))
        except PydanticValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(x) for x in first.get('loc', ())) or 'train'
            raise ConfigError(f"invalid train config ({where}): {first.get('msg')}") from e


def get_train_config(config: Optional[Mapping[str, Any]] = None, profile: Optional[str] = None,
                     overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """
    Build the TrainConfig for a run.

    Order: profile -> config file 'train' section -> explicit overrides (CLI).
    """
    config = config or {}
    train_section = dict(config.get('train') or {})
    profile = profile or train_section.get('profile', 'full')
    merged = TrainingProfiles.get_profile(profile)
    merged = TrainingProfiles.merge_with_user_config(merged, train_section)
    depth = get_conf(config, 'evaluation', 'depth')
    if depth is not None and 'eval_depth' not in train_section:
        merged['eval_depth'] = depth
    if overrides:
        merged = TrainingProfiles.merge_with_user_config(
            merged, {k: v for k, v in overrides.items() if v is not None}
        )
    train_config = TrainingProfiles.validate_config(merged)
    logger.info(f"Using '{profile}' training profile (mode {train_config.mode})")
    return train_config


def get_feature_config(config: Optional[Mapping[str, Any]] = None,
                       mode: Optional[str] = None) -> FeatureConfig:
    values = dict((config or {}).get('features') or {})
    if mode is not None:
        values['mode'] = mode
    try:
        return FeatureConfig.model_validate(values)
    except PydanticValidationError as e:
        raise ConfigError(f"invalid features config: {e.errors()[0].get('msg')}") from e


def load_synthetic_spec(path: Optional[str] = None, **overrides) -> SyntheticSpec:
    values: Dict[str, Any] = {}
    if path:
        loaded = load_config(path)
        values.update(loaded.get('synthetic', loaded))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SyntheticSpec.model_validate(values)
    except PydanticValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(x) for x in first.get('loc', ()))
        raise ConfigError(f"invalid synthetic spec ({where}): {first.get('msg')}") from e


# ============================================================================
# HYPER-PARAMETER GRIDS
# ============================================================================

DEFAULT_GRID = {
    'batch_size': [8, 12, 16],
    'dropout': [0.2, 0.3, 0.4, 0.5],
    'h_size': [10, 15, 20],
    'f_size': [75, 100, 125],
    'l2_strength': [0.01, 0.02, 0.03],
}


def load_grid(path: Optional[str]) -> Dict[str, List[Any]]:
    """Grid from a YAML mapping of field -> value list; the default grid when no path."""
    if not path:
        return {k: list(v) for k, v in DEFAULT_GRID.items()}
    loaded = load_config(path)
    grid = loaded.get('grid', loaded)
    if not grid:
        raise ConfigError(f"{path}: empty grid")
    return grid


def expand_grid(grid: Mapping[str, Any]) -> List[Dict[str, Any]]:
    """
    Cartesian product of the grid in lexicographic cell order.

    Fields are ordered batch_size, dropout, h_size, f_size, l2_strength,
    then any other TrainConfig field by name; values ascend within a field.
    """
    known = set(TrainConfig.model_fields)
    for key in grid:
        if key not in known:
            raise ConfigError(f"grid field '{key}' is not a train setting")
    fields = [f for f in GRID_FIELDS if f in grid] + sorted(f for f in grid if f not in GRID_FIELDS)
    values = []
    for f in fields:
        v = grid[f] if isinstance(grid[f], (list, tuple)) else [grid[f]]
        if not v:
            raise ConfigError(f"grid field '{f}' has no values")
        values.append(sorted(v))
    return [dict(zip(fields, combo)) for combo in itertools.product(*values)]


def format_cell_tuple(cell: Mapping[str, Any]) -> str:
    """'b, d, h, f, l2' for the fields present in a cell."""
    return ", ".join(str(cell[f]) for f in GRID_FIELDS if f in cell)
