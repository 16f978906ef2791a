import configparser
import logging
import os
import re
from typing import List, Optional

logger = logging.getLogger(__name__)

ENV_PREFIX = "PREDPREY_"
OVERRIDE_FILE_ENV = "PREDPREY_OVERRIDE_FILE"
# Environment names read directly by the cli and the test suite, never copied into the config.
RESERVED_ENV = {"PREDPREY_OVERRIDE_FILE", "PREDPREY_OUT_DIR", "PREDPREY_RUN_SLOW"}

config = None


def load_properties(default_file: Optional[str] = None, override_file: Optional[str] = None) -> configparser.ConfigParser:
    """
    Loads experiment properties from a default file, an optional override file and
    PREDPREY_* environment variables, in that order of precedence (last wins).

    :param default_file: Path to the experiment properties file (optional).
    :param override_file: Path to an override file (can be passed as input or via PREDPREY_OVERRIDE_FILE).
    :return: Loaded configuration object.
    """
    global config
    config = configparser.ConfigParser()

    if default_file is not None:
        if not os.path.exists(default_file):
            logger.error(f"Properties file {default_file} not found")
            raise FileNotFoundError(f"Properties file {default_file} not found")
        config.read(default_file)
        logger.info(f"Properties loaded from {os.path.abspath(default_file)}")

    if override_file is None:
        override_file = os.getenv(OVERRIDE_FILE_ENV)

    if override_file and os.path.exists(override_file):
        config.read(override_file)
        logger.info(f"Override properties loaded from {override_file}")
    elif override_file:
        logger.warning(f"Override file {override_file} not found. Using default properties only.")

    # PREDPREY_<section>_dot_<key>=value sets [section].key; without _dot_ the key lands in DEFAULT
    for env_key, value in os.environ.items():
        if not env_key.startswith(ENV_PREFIX) or env_key in RESERVED_ENV:
            continue
        if "$" in value:
            continue
        name = env_key[len(ENV_PREFIX):].lower()
        if "_dot_" in name:
            section, key = name.split("_dot_", 1)
        else:
            section, key = "DEFAULT", name
        if section != "DEFAULT" and not config.has_section(section):
            config.add_section(section)
        config.set(section, key, value)
        logger.info(f"Set [{section}].{key} from environment variable {env_key}")

    print_properties("Loaded configuration")
    return config


def print_properties(debug_string: str):
    """
    Logs every explicitly defined key of each section.
    :param debug_string: A string to differentiate the output.
    """
    logger.debug(f"--- {debug_string} ---")
    if config.defaults():
        logger.debug(f"Keys in DEFAULT section: {list(config.defaults().keys())}")
    for section in config.sections():
        for key, value in config.items(section):
            logger.debug(f"[{section}].{key}={value}")


def explicit_keys(section: str) -> List[str]:
    """Keys written in the section itself, excluding those inherited from DEFAULT."""
    if not config.has_section(section):
        return []
    defaults = config.defaults().keys()
    return [key for key in config.options(section) if key not in defaults]


def find_key_line(path: Optional[str], key: str, section: Optional[str] = None) -> Optional[int]:
    """
    Returns the 1-based line on which key is defined, or None.

    :param path: Properties file path; None when the config did not come from a file.
    :param key: Key to look for (case insensitive, as configparser stores it).
    :param section: Restricts the search to one section when given.
    """
    if path is None or not os.path.exists(path):
        return None
    current = "DEFAULT"
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*[=:]", re.IGNORECASE)
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            header = re.match(r"^\s*\[([^\]]+)\]", line)
            if header:
                current = header.group(1).strip()
                continue
            if pattern.match(line) and (section is None or current == section):
                return number
    return None


def set_property(key: str, value: str, section: str = 'DEFAULT'):
    """
    Set a property value in the configuration object, creating the section if needed.
    """
    if section != 'DEFAULT' and not config.has_section(section):
        config.add_section(section)
    config.set(section, key, value)


def get_property(key: str, section: str = 'DEFAULT', fallback: any = None) -> str:
    """
    Get a property value as a string from a given section with an optional fallback.

    :param key: The property key to retrieve.
    :param section: The section in the configuration file. Defaults to 'DEFAULT'.
    :param fallback: Fallback value if the property is not found.
    :return: The property value as a string or fallback.
    """
    return config.get(section, key, fallback=fallback)


def get_int_property(key: str, section: str = 'DEFAULT', fallback: int = 0) -> int:
    return config.getint(section, key, fallback=fallback)


def get_bool_property(key: str, section: str = 'DEFAULT', fallback: bool = False) -> bool:
    return config.getboolean(section, key, fallback=fallback)


def get_float_property(key: str, section: str = 'DEFAULT', fallback: float = 0.0) -> float:
    """
    Get a property value as a float from a given section with an optional fallback.

    :param key: The property key to retrieve.
    :param section: The section in the configuration file. Defaults to 'DEFAULT'.
    :param fallback: Fallback value if the property is not found.
    :return: The property value as a float or fallback.
    """
    return config.getfloat(section, key, fallback=fallback)


def get_list_property(key: str, section: str = 'DEFAULT', fallback: Optional[list] = None) -> list:
    """
    Comma separated list property, e.g. ``n_values = 10, 100, 1000``.
    """
    raw = config.get(section, key, fallback=None)
    if raw is None:
        return list(fallback) if fallback is not None else []
    return [item.strip() for item in raw.split(",") if item.strip()]


def get_float_list_property(key: str, section: str = 'DEFAULT', fallback: Optional[list] = None) -> List[float]:
    return [float(item) for item in get_list_property(key, section, fallback)]


def get_int_list_property(key: str, section: str = 'DEFAULT', fallback: Optional[list] = None) -> List[int]:
    return [int(item) for item in get_list_property(key, section, fallback)]
