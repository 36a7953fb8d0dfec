"""
CliConfig: every tunable of the pipeline in one place.

Values come from three layers, later ones winning:

    dataclass defaults < key=value config file < command-line flags

Config files hold one `section.field = value` per line, `#` starts a comment:

    lm.target_mse = 0.0002
    icp.sample_fraction = 0.5
    siamese.layer_sizes = 256, 64, 16
    general.seed = 7

Every section field also gets a flag (`lm.target_mse` -> `--lm-target-mse`).
A general seed, from the file or `--seed`, replaces the seed of every section.
"""

import argparse
import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional

from .errors import ConfigError, DataError
from .lm_trainer import LmConfig
from .registration import IcpConfig
from .siamese import SiameseConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneralConfig:
    seed: Optional[int] = None
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise DataError("config: jobs must be >= 1")


SECTIONS: Dict[str, type] = {
    "lm": LmConfig,
    "icp": IcpConfig,
    "siamese": SiameseConfig,
    "general": GeneralConfig,
}


@dataclass(frozen=True)
class CliConfig:
    lm: LmConfig = field(default_factory=LmConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    siamese: SiameseConfig = field(default_factory=SiameseConfig)
    general: GeneralConfig = field(default_factory=GeneralConfig)

    @property
    def seed(self) -> int:
        return self.general.seed if self.general.seed is not None else self.lm.seed


def _converter(hint) -> Callable[[str], Any]:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union and type(None) in args:
        inner = _converter(next(a for a in args if a is not type(None)))

        def optional(text: str):
            return None if text.strip().lower() in ("", "none") else inner(text)
        return optional

    if origin is tuple:
        item = _converter(args[0]) if args else str

        def sequence(text: str):
            return tuple(item(part) for part in text.split(",") if part.strip())
        return sequence

    if hint is int:
        return lambda text: int(text.strip())
    if hint is float:
        return lambda text: float(text.strip())
    return lambda text: text.strip()


def _field_converters(section: str) -> Dict[str, Callable[[str], Any]]:
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return {f.name: _converter(hints[f.name]) for f in dataclasses.fields(cls)}


def config_keys():
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            yield section, f.name


def flag_name(section: str, name: str) -> str:
    if section == "general":
        return "--" + name.replace("_", "-")
    return f"--{section}-{name.replace('_', '-')}"


def read_config_file(path: str) -> Dict[str, str]:
    """Raw `section.field` -> text mapping; unknown keys are rejected here."""
    if not os.path.exists(path):
        raise ConfigError(f"config: file not found: {path}")

    known = set(f"{s}.{n}" for s, n in config_keys())
    values: Dict[str, str] = {}
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"config: {path}, line {line_number}: expected key = value")
            key, value = (part.strip() for part in stripped.split("=", 1))
            if key not in known:
                raise ConfigError(f"config: {path}, line {line_number}: unknown key {key!r}")
            values[key] = value
    return values


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One string flag per config field; unset flags stay out of the namespace."""
    group = parser.add_argument_group("configuration")
    group.add_argument("--config", metavar="FILE", help="key=value configuration file")
    for section, name in config_keys():
        group.add_argument(
            flag_name(section, name),
            dest=f"{section}.{name}",
            metavar="VALUE",
            default=argparse.SUPPRESS,
            help=f"override {section}.{name}",
        )


def flag_overrides(namespace: argparse.Namespace) -> Dict[str, str]:
    return {key: value for key, value in vars(namespace).items() if "." in key and value is not None}


def build_config(config_path: Optional[str] = None,
                 overrides: Optional[Mapping[str, str]] = None) -> CliConfig:
    raw: Dict[str, str] = {}
    if config_path:
        raw.update(read_config_file(config_path))
        logger.debug("Read %d config values from %s", len(raw), config_path)
    raw.update(overrides or {})

    sections: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, text in raw.items():
        section, _, name = key.partition(".")
        converters = _field_converters(section) if section in SECTIONS else {}
        if name not in converters:
            raise ConfigError(f"config: unknown key {key!r}")
        try:
            sections[section][name] = converters[name](str(text))
        except ValueError:
            raise ConfigError(f"config: bad value for {key}: {text!r}") from None

    seed = sections["general"].get("seed")
    if seed is not None:
        for section in ("lm", "icp", "siamese"):
            sections[section]["seed"] = seed

    try:
        return CliConfig(**{name: SECTIONS[name](**values) for name, values in sections.items()})
    except DataError as exc:
        raise ConfigError(str(exc)) from None


def config_from_args(namespace: argparse.Namespace) -> CliConfig:
    return build_config(getattr(namespace, "config", None), flag_overrides(namespace))
