"""
Configuration utility for spatialfusion.
Handles loading and validation of YAML/JSON experiment configuration files.
"""

import copy
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from ..errors import ConfigError
from ..models.config import PRESETS, ExperimentConfig, ModelConfig, TrainSettings

SCHEMA_VERSION = 1
SECTIONS = ("schema_version", "model", "train", "run", "numerics")


def _check_type(key: str, default: Any, value: Any) -> None:
    """Reject a value whose type does not match the default it replaces."""
    if default is None or key == "model.preset":
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key '{key}' expects {type(default).__name__}, got {value!r}")


class Config:
    """Configuration manager for spatialfusion experiments."""

    DEFAULT_CONFIG_PATH = "config.yaml"

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        """
        Initialize the configuration manager.

        Args:
            config_path: Optional path to a YAML or JSON config file. Without one,
                         config.yaml in the working directory is used if present.
        """
        self._config: Dict[str, Any] = self._get_default_config()
        self.source: Optional[Path] = None
        self.load_config(config_path)

    def load_config(self, config_path: Optional[Union[str, Path]] = None) -> None:
        """
        Load configuration from a file and merge it over the defaults.

        Args:
            config_path: Path to the config file. If not provided, the default
                         location is tried and defaults are kept when it is absent.

        Raises:
            ConfigError: The explicit file is missing, unparseable or fails the schema
        """
        explicit = config_path is not None
        path = Path(config_path if explicit else self.DEFAULT_CONFIG_PATH)

        if not path.exists():
            if explicit:
                raise ConfigError(f"config file '{path}' does not exist")
            return

        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot parse config file '{path}': {e}") from None

        self.update(data or {})
        self.source = path

    def update(self, data: Dict[str, Any]) -> None:
        """Merge a config mapping over the current values, rejecting unknown keys."""
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version} not supported (expected {SCHEMA_VERSION})")

        merged = copy.deepcopy(self._config)
        for section, values in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section '{section}'")
            if section == "schema_version":
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{section}' must be a mapping")
            if section == "model" and "preset" in values:
                preset = values["preset"]
                if preset not in PRESETS:
                    raise ConfigError(f"unknown preset 'model.preset={preset}' (known: {sorted(PRESETS)})")
                merged["model"] = {"preset": preset, **PRESETS[preset].to_dict()}
            for key, value in values.items():
                if key not in merged[section]:
                    raise ConfigError(f"unknown config key '{section}.{key}'")
                _check_type(f"{section}.{key}", merged[section][key], value)
                merged[section][key] = value

        previous, self._config = self._config, merged
        # Build the typed views once so range errors surface at load time.
        try:
            self.experiment
        except (TypeError, ValueError) as e:
            self._config = previous
            raise ConfigError(f"invalid config value: {e}") from None
        except ConfigError:
            self._config = previous
            raise

    def _get_default_config(self) -> Dict[str, Any]:
        """Get the default configuration settings."""
        return {
            "schema_version": SCHEMA_VERSION,
            "model": {"preset": "desk", **PRESETS["desk"].to_dict()},
            "train": TrainSettings().to_dict(),
            "run": {
                "seeds": [0, 1, 2],
                "out_dir": "runs",
                "ablation_axis": None,
                "ablation_values": None,
                "score_scenes": 32,
            },
            "numerics": {
                "checked": False,
            },
        }

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """
        Get a configuration value.

        Args:
            section: The configuration section (e.g., 'model', 'train')
            key: The configuration key within the section
            default: Default value to return if the key is not found

        Returns:
            The configuration value, or the default if not found
        """
        values = self._config.get(section)
        if not isinstance(values, dict) or key not in values:
            return default
        return values[key]

    def get_section(self, section: str) -> Dict[str, Any]:
        """
        Get an entire configuration section.

        Args:
            section: The configuration section name

        Returns:
            A copy of the section, or an empty dict if it doesn't exist
        """
        values = self._config.get(section, {})
        return copy.deepcopy(values) if isinstance(values, dict) else {}

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._config)

    @property
    def model_config(self) -> ModelConfig:
        """The model section as a ModelConfig."""
        values = self.get_section("model")
        values.pop("preset", None)
        return ModelConfig.from_dict(values)

    @property
    def train_settings(self) -> TrainSettings:
        """The train section as TrainSettings."""
        return TrainSettings.from_dict(self.get_section("train"))

    @property
    def experiment(self) -> ExperimentConfig:
        """Model, train, run and numerics sections as one ExperimentConfig."""
        run = self.get_section("run")
        values = run.get("ablation_values")
        return ExperimentConfig(
            model=self.model_config,
            train=self.train_settings,
            seeds=tuple(int(s) for s in run["seeds"]),
            out_dir=str(run["out_dir"]),
            ablation_axis=run["ablation_axis"],
            ablation_values=list(values) if values is not None else None,
            score_scenes=int(run["score_scenes"]),
            checked=bool(self.get("numerics", "checked", False)),
        )


def load_experiment(config_path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Shortcut for Config(config_path).experiment."""
    return Config(config_path).experiment
