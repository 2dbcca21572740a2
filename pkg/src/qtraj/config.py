from configparser import ConfigParser
import pathlib
from typing import Optional

import platformdirs

from .const import APP_NAME


CONFIG_FILE = 'config.ini'

DEFAULT_CONFIG = {
    "integrator": {
        "diffusive_dt": "1e-4",
        "ode_dt": "1e-4",
        "repair_factor": "100",
    },
    "optimal": {
        "controls": "21",
        "grid_spacing": "0.0625",
    },
    "output": {
        "digits": "17",
    },
    "run": {
        "threads": "0",
    },
}


class ConfigException(Exception):
    pass


def get_config_dir() -> pathlib.Path:
    path = pathlib.Path(platformdirs.user_config_dir(APP_NAME))
    path.mkdir(parents=True, exist_ok=True)
    return path


def get_config_file() -> pathlib.Path:
    return get_config_dir() / CONFIG_FILE


_CONFIG: Optional[ConfigParser] = None


def _write_defaults(config: ConfigParser) -> None:
    try:
        with open(get_config_file(), 'w', encoding="utf-8") as fd:
            config.write(fd)
    except OSError:
        # Read-only home directory; the defaults are still usable.
        pass


def get_config() -> ConfigParser:
    global _CONFIG

    if _CONFIG is None:
        config = ConfigParser()
        config.read_dict(DEFAULT_CONFIG)
        try:
            with open(get_config_file(), encoding="utf-8") as fd:
                config.read_file(fd)
        except FileNotFoundError:
            _write_defaults(config)
        except OSError:
            pass
        _CONFIG = config

    return _CONFIG


def get_float(section: str, key: str) -> float:
    try:
        return get_config().getfloat(section, key)
    except ValueError as ex:
        raise ConfigException(f"Bad value for [{section}] {key} in {CONFIG_FILE}: {ex}") from None


def get_int(section: str, key: str) -> int:
    try:
        return get_config().getint(section, key)
    except ValueError as ex:
        raise ConfigException(f"Bad value for [{section}] {key} in {CONFIG_FILE}: {ex}") from None
