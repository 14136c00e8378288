# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Application configuration
"""
import os
from os import R_OK, access
from os.path import isfile
from typing import Optional

from attrs import field, frozen

from kvformer.converter import CONVERTER
from kvformer.inference import DecodeOptions
from kvformer.training import TrainConfig

# We read this environment variable to find the configuration YAML file on disk
CONFIG_VAR = "KVFORMER_CONFIG_PATH"


@frozen
class ConfigError(Exception):
    """An error related to configuration."""

    message: str


@frozen
class KvformerConfig:
    """Defaults for training and decoding, overridden by command-line options."""

    training: TrainConfig = field(factory=TrainConfig)
    decoding: DecodeOptions = field(factory=DecodeOptions)
    logging: Optional[str] = None  # path to a logging configuration YAML file


_CONFIG: Optional[KvformerConfig] = None


def _replace_envvars(source: str) -> str:
    """Replace constructs like {VAR} with environment variables."""
    return source.format(**os.environ)


def _load_config(config_path: Optional[str] = None) -> KvformerConfig:
    """Load configuration from disk, substituting environment variables of the form {VAR}."""
    if not config_path:
        config_path = os.environ[CONFIG_VAR] if CONFIG_VAR in os.environ else None
        if not config_path:
            return KvformerConfig()
    if not (isfile(config_path) and access(config_path, R_OK)):
        raise ConfigError("Configuration is not readable: %s" % config_path)
    with open(config_path, "r", encoding="utf8") as fp:
        try:
            normalized = _replace_envvars(fp.read())
            return CONVERTER.from_yaml(normalized, KvformerConfig)
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError("Configuration is not valid: %s: %s" % (config_path, e)) from e


def reset() -> None:
    """Reset the config singleton, forcing it to be reloaded when next used."""
    global _CONFIG  # pylint: disable=global-statement
    _CONFIG = None


def config(config_path: Optional[str] = None) -> KvformerConfig:
    """Retrieve configuration, loading it from disk once and caching it."""
    global _CONFIG  # pylint: disable=global-statement
    if _CONFIG is None:
        _CONFIG = _load_config(config_path)
    return _CONFIG
