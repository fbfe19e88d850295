import copy
from pathlib import Path
from typing import Dict, Any, Optional, Union

import yaml

from diarization.diarizer import PipelineConfig
from utils.exceptions import ConfigurationError
from utils.logger import get_logger

NESTED_SECTIONS = ("logging", "processing")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings:
    """Configuration settings manager for the diarization toolkit."""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        """
        Initialize settings with optional config file path.

        The file holds the pipeline knobs as flat top-level keys; ``logging``
        and ``processing`` may appear as nested sections.

        Args:
            config_path: Path to YAML configuration file

        Raises:
            ConfigurationError: Unreadable file, unknown key or bad value
        """
        self.config: Dict[str, Any] = {
            # Default settings
            "pipeline": PipelineConfig().to_dict(),
            "logging": {
                "level": "INFO",
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
                "file": None,
                "max_size": 10485760,  # 10MB
                "backup_count": 5,
            },
            "processing": {
                "parallel": True,
                "max_workers": 4,
            },
        }

        # Load from file if provided
        if config_path:
            self._load_from_file(config_path)

        self._validate()

    def _load_from_file(self, config_path: Union[str, Path]) -> None:
        """Load configuration from YAML file."""
        try:
            with open(config_path, "r") as f:
                file_config = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"Failed to load config from {config_path}: {str(e)}")
        if not file_config:
            get_logger(__name__).warning(f"Config file {config_path} is empty")
            return
        if not isinstance(file_config, dict):
            raise ConfigurationError(f"Config file {config_path} must hold a mapping")

        nested = {k: v for k, v in file_config.items() if k in NESTED_SECTIONS}
        flat = {k: v for k, v in file_config.items() if k not in NESTED_SECTIONS}
        if "pipeline" in flat and isinstance(flat["pipeline"], dict):
            flat.update(flat.pop("pipeline"))
        for section, values in nested.items():
            if not isinstance(values, dict):
                raise ConfigurationError(f"Config section '{section}' must be a mapping")
            unknown = sorted(set(values) - set(self.config[section]))
            if unknown:
                raise ConfigurationError(f"Unknown keys in section '{section}': {unknown}")
        self._deep_update(self.config, {"pipeline": flat, **nested})

    def _deep_update(self, d: Dict[str, Any], u: Dict[str, Any]) -> None:
        """Recursively update nested dictionaries."""
        for k, v in u.items():
            if isinstance(v, dict) and k in d and isinstance(d[k], dict):
                self._deep_update(d[k], v)
            else:
                d[k] = v

    def _validate(self) -> None:
        """Reject bad values early; the pipeline section is validated by PipelineConfig."""
        self.config["pipeline"] = PipelineConfig.from_dict(self.config["pipeline"]).to_dict()
        level = str(self.config["logging"]["level"]).upper()
        if level not in LOG_LEVELS:
            raise ConfigurationError(f"Unknown log level '{self.config['logging']['level']}'")
        self.config["logging"]["level"] = level
        max_workers = self.config["processing"]["max_workers"]
        if not isinstance(max_workers, int) or isinstance(max_workers, bool) or max_workers < 1:
            raise ConfigurationError(f"processing.max_workers must be a positive integer, got {max_workers!r}")

    def get(self, section: str, key: Optional[str] = None) -> Any:
        """
        Get configuration value.

        Args:
            section: Configuration section
            key: Optional key within section

        Returns:
            Configuration value
        """
        if section not in self.config:
            raise KeyError(f"Configuration section '{section}' not found")

        if key is None:
            return self.config[section]

        if key not in self.config[section]:
            raise KeyError(f"Configuration key '{key}' not found in section '{section}'")

        return self.config[section][key]

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig.from_dict(self.config["pipeline"])

    def set_pipeline_config(self, cfg: PipelineConfig) -> None:
        self.config["pipeline"] = cfg.to_dict()

    def dump(self, path: Union[str, Path]) -> Path:
        """Write the settings back in the flat layout they are read from."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        document = copy.deepcopy(self.config["pipeline"])
        for section in NESTED_SECTIONS:
            document[section] = copy.deepcopy(self.config[section])
        with open(path, "w") as f:
            yaml.safe_dump(document, f, sort_keys=False)
        return path
