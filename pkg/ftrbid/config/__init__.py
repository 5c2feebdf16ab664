"""
User configuration: log config location, default output directory and solver defaults.
"""

import logging
import os
import pathlib
from importlib import resources

import appdirs
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from ftrbid.exceptions import ConfigError


logger = logging.getLogger(__name__)
yaml = YAML(typ="safe")


class Config(dict):
    """
    Configuration loaded from `config.yml`. The user copy is created from the packaged defaults on first use.
    """

    CONFIG_FILE_NAME = "config.yml"
    USER_CONFIG_DIR = pathlib.Path(appdirs.user_config_dir("ftrbid"))

    # Fields which contain a file or directory path.
    PATH_FIELDS = ["LOG_CONFIG_PATH", "OUTPUT_DIR"]
    # Path fields which must already exist.
    REQUIRED_PATHS = ["LOG_CONFIG_PATH"]

    def __repr__(self):
        return f"Config({super().__repr__()})"

    @property
    def user_config_dir(self) -> pathlib.Path:
        cfg_dir = self.USER_CONFIG_DIR
        cfg_dir.mkdir(parents=True, exist_ok=True)
        return cfg_dir

    @property
    def user_path(self) -> pathlib.Path:
        """Returns the path to the user config file."""
        cfg_dir = self.user_config_dir

        # Create user copies of the default files if they don't exist.
        defaults = resources.files("ftrbid.config")
        for file_name in (self.CONFIG_FILE_NAME, "log_config.yml"):
            target = cfg_dir / file_name
            if not target.exists():
                target.write_bytes(defaults.joinpath(file_name).read_bytes())

        return cfg_dir / self.CONFIG_FILE_NAME

    @property
    def solver_defaults(self) -> dict:
        """Solver option overrides set in the configuration file."""
        return dict(self.get("SOLVER") or {})

    def load(self, file_path=None):
        """
        Loads configuration file.

        :param file_path: Path to configuration file. (defaults to `config.yml` in user config directory)
        """
        if not file_path:
            file_path = self.user_path
        file_path = pathlib.Path(file_path)

        try:
            with open(file_path, "r") as fp:
                config = yaml.load(fp) or {}
        except YAMLError as e:
            raise ConfigError(f"Error parsing config: {e}")
        except OSError as e:
            raise ConfigError(f"Unable to read config {file_path}: {e}")
        if not isinstance(config, dict):
            raise ConfigError(f"Config {file_path} must be a mapping, got {type(config).__name__}")

        # Relative paths are relative to the configuration file.
        for key in self.PATH_FIELDS:
            if config.get(key):
                path = pathlib.Path(os.path.expandvars(str(config[key]))).expanduser()
                config[key] = os.path.abspath(file_path.parent / path)
        self.update(config)
        self.validate()

    def validate(self):
        """
        Validates configuration.

        :raises ConfigError: If there is an issue with the configuration.
        """
        for key in self.REQUIRED_PATHS:
            value = self.get(key)
            if value and not pathlib.Path(value).exists():
                raise ConfigError(f"Invalid path for {key}: {value}")
        solver = self.get("SOLVER")
        if solver is not None and not isinstance(solver, dict):
            raise ConfigError(f"SOLVER must be a mapping, got {type(solver).__name__}")


_config = Config()
