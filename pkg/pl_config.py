"""
Configuration Management for PerfectLES

Centralized configuration for the DNS, closure extraction, network training and
LES stages. Run files are flat ``section.key = value`` text with ``#`` comments;
every value is read as a YAML scalar so numbers, booleans and lists type
themselves. ``.yaml``/``.yml`` files holding one mapping per section are accepted
as well. Environment variables with the ``PERFECTLES_`` prefix override file
values.

Author: PerfectLES Team
Version: 1.0.0
License: Apache 2.0
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml

from pl_errors import ConfigurationError
from pl_fluxes import RIEMANN_VARIANTS
from pl_logging import get_logger

logger = get_logger("config")

CLOSURE_MODES = ("none", "smagorinsky", "perfect", "ann-direct", "ann-eddy", "op-eddy")
NETWORK_TAGS = ("RNN0", "RNN1", "RNN2", "RNN4", "RNN8", "MLP100")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


# =============================================================================
# SECTIONS
# =============================================================================


@dataclass
class GasSettings:
    gamma: float = 1.4
    gas_constant: float = 1.0
    prandtl: float = 0.72
    mu0: float = 0.03


@dataclass
class InitSettings:
    s: int = 4
    u0_sq: float = 5.0
    kp: float = 4.0
    mach: float = 0.1
    spectral_resolution: int = 64
    seed: int = 1


@dataclass
class DNSSettings:
    elements_per_dir: int = 16
    degree: int = 3
    riemann: str = "roe-lowdiss"
    cfl: float = 0.2
    t_end: float = 2.0
    # closure archive window, stored at the LES step cadence
    archive_start: float = 1.0
    archive_end: float = 1.2
    archive_dt_scale: float = 1.0


@dataclass
class LESSettings:
    elements_per_dir: int = 4
    degree: int = 5
    riemann: str = "roe-lowdiss"
    cfl: float = 0.2
    t_start: float = 1.0
    t_end: float = 2.0
    mode: str = "none"
    cs: float = 0.17
    clip: bool = True
    clip_lo: float = -1.0
    clip_hi: float = 20.0
    output_interval: float = 0.1


@dataclass
class ExtractSettings:
    sample_start: float = 1.0
    sample_end: float = 2.0
    sample_interval: float = 0.1
    quadrature_extra: int = 2
    train_runs: List[str] = field(default_factory=list)
    validation_runs: List[str] = field(default_factory=list)
    test_runs: List[str] = field(default_factory=list)


@dataclass
class TrainSettings:
    network: str = "RNN4"
    nf1: int = 16
    nf2: int = 32
    batch_size: int = 32
    epochs: int = 50
    base_lr: float = 1.0e-3
    decay_rate: float = 0.95
    # 0 means one epoch worth of mini-batches
    decay_steps: int = 0
    seed: int = 0
    augment: bool = True
    feature_set: int = 1
    cost_normalization: str = "sum"


@dataclass
class ReportSettings:
    resample_factor: int = 2
    spectra_time: Optional[float] = None


@dataclass
class SystemSettings:
    log_level: str = "INFO"
    log_file: str = "logs/perfectles.log"
    max_log_size_mb: int = 10
    backup_log_count: int = 5
    enable_console: bool = True
    enable_json: bool = True
    storage_cap_gb: float = 10.0


@dataclass
class TestbedConfig:
    gas: GasSettings = None
    init: InitSettings = None
    dns: DNSSettings = None
    les: LESSettings = None
    extract: ExtractSettings = None
    train: TrainSettings = None
    report: ReportSettings = None
    system: SystemSettings = None

    def __post_init__(self):
        if self.gas is None:
            self.gas = GasSettings()
        if self.init is None:
            self.init = InitSettings()
        if self.dns is None:
            self.dns = DNSSettings()
        if self.les is None:
            self.les = LESSettings()
        if self.extract is None:
            self.extract = ExtractSettings()
        if self.train is None:
            self.train = TrainSettings()
        if self.report is None:
            self.report = ReportSettings()
        if self.system is None:
            self.system = SystemSettings()

    @property
    def coarsening_ratio(self) -> int:
        return self.dns.elements_per_dir // self.les.elements_per_dir


SECTION_TYPES = {
    "gas": GasSettings,
    "init": InitSettings,
    "dns": DNSSettings,
    "les": LESSettings,
    "extract": ExtractSettings,
    "train": TrainSettings,
    "report": ReportSettings,
    "system": SystemSettings,
}


# =============================================================================
# VALIDATION
# =============================================================================


class ConfigValidator:
    """Validates configuration sections; each validator returns a list of errors."""

    @staticmethod
    def validate_gas(config: GasSettings) -> List[str]:
        errors = []
        if not config.gamma > 1.0:
            errors.append("gas.gamma must be greater than 1")
        if config.mu0 < 0.0:
            errors.append("gas.mu0 must be non-negative")
        if not config.prandtl > 0.0:
            errors.append("gas.prandtl must be positive")
        if not config.gas_constant > 0.0:
            errors.append("gas.gas_constant must be positive")
        return errors

    @staticmethod
    def validate_init(config: InitSettings) -> List[str]:
        errors = []
        if config.s < 1:
            errors.append("init.s must be at least 1")
        if not config.u0_sq > 0.0:
            errors.append("init.u0_sq must be positive")
        if not config.kp > 0.0:
            errors.append("init.kp must be positive")
        if not config.mach > 0.0:
            errors.append("init.mach must be positive")
        if config.spectral_resolution % 2 != 0:
            errors.append("init.spectral_resolution must be even")
        if config.spectral_resolution < 2 * config.kp:
            errors.append("init.spectral_resolution must be at least 2*kp")
        return errors

    @staticmethod
    def validate_dns(config: DNSSettings) -> List[str]:
        errors = []
        if config.elements_per_dir < 1:
            errors.append("dns.elements_per_dir must be at least 1")
        if config.degree < 1:
            errors.append("dns.degree must be at least 1")
        if config.riemann not in RIEMANN_VARIANTS:
            errors.append(f"dns.riemann must be one of {RIEMANN_VARIANTS}")
        if not config.cfl > 0.0:
            errors.append("dns.cfl must be positive")
        if not config.t_end > 0.0:
            errors.append("dns.t_end must be positive")
        if not 0.0 <= config.archive_start <= config.archive_end <= config.t_end:
            errors.append("dns archive window must satisfy 0 <= archive_start <= archive_end <= t_end")
        if not config.archive_dt_scale > 0.0:
            errors.append("dns.archive_dt_scale must be positive")
        return errors

    @staticmethod
    def validate_les(config: LESSettings) -> List[str]:
        errors = []
        if config.elements_per_dir < 1:
            errors.append("les.elements_per_dir must be at least 1")
        if config.degree < 1:
            errors.append("les.degree must be at least 1")
        if config.riemann not in RIEMANN_VARIANTS:
            errors.append(f"les.riemann must be one of {RIEMANN_VARIANTS}")
        if config.mode not in CLOSURE_MODES:
            errors.append(f"les.mode must be one of {CLOSURE_MODES}")
        if not config.cfl > 0.0:
            errors.append("les.cfl must be positive")
        if config.cs < 0.0:
            errors.append("les.cs must be non-negative")
        if not config.clip_lo < config.clip_hi:
            errors.append("les.clip_lo must be below les.clip_hi")
        if not config.t_end > config.t_start:
            errors.append("les.t_end must be after les.t_start")
        if not config.output_interval > 0.0:
            errors.append("les.output_interval must be positive")
        return errors

    @staticmethod
    def validate_nesting(dns: DNSSettings, les: LESSettings) -> List[str]:
        errors = []
        if les.elements_per_dir >= 1 and dns.elements_per_dir % les.elements_per_dir != 0:
            errors.append("dns.elements_per_dir must be a multiple of les.elements_per_dir")
        elif les.elements_per_dir >= 1 and dns.elements_per_dir // les.elements_per_dir < 2:
            errors.append("coarsening ratio dns/les elements must be at least 2")
        if les.elements_per_dir >= 1 and les.degree + 1 > (dns.elements_per_dir // les.elements_per_dir) * (dns.degree + 1):
            errors.append("les.degree + 1 must not exceed the fine nodes per LES element")
        return errors

    @staticmethod
    def validate_extract(config: ExtractSettings) -> List[str]:
        errors = []
        if not config.sample_interval > 0.0:
            errors.append("extract.sample_interval must be positive")
        if config.sample_end < config.sample_start:
            errors.append("extract.sample_end must not precede sample_start")
        if config.quadrature_extra < 0:
            errors.append("extract.quadrature_extra must be non-negative")
        roles = [set(config.train_runs), set(config.validation_runs), set(config.test_runs)]
        if (roles[0] & roles[1]) or (roles[0] & roles[2]) or (roles[1] & roles[2]):
            errors.append("extract run split overlaps between train/validation/test")
        return errors

    @staticmethod
    def validate_train(config: TrainSettings) -> List[str]:
        errors = []
        if config.network not in NETWORK_TAGS:
            errors.append(f"train.network must be one of {NETWORK_TAGS}")
        if config.nf1 < 1 or config.nf2 < 1:
            errors.append("train.nf1 and train.nf2 must be positive")
        if config.batch_size < 1:
            errors.append("train.batch_size must be at least 1")
        if config.epochs < 0:
            errors.append("train.epochs must be non-negative")
        if not config.base_lr > 0.0:
            errors.append("train.base_lr must be positive")
        if not config.decay_rate > 0.0:
            errors.append("train.decay_rate must be positive")
        if config.decay_steps < 0:
            errors.append("train.decay_steps must be non-negative")
        if config.feature_set not in (1, 2, 3, 4, 5):
            errors.append("train.feature_set must be between 1 and 5")
        if config.cost_normalization not in ("sum", "mean"):
            errors.append("train.cost_normalization must be 'sum' or 'mean'")
        return errors

    @staticmethod
    def validate_report(config: ReportSettings) -> List[str]:
        errors = []
        if config.resample_factor < 1:
            errors.append("report.resample_factor must be at least 1")
        return errors

    @staticmethod
    def validate_system(config: SystemSettings) -> List[str]:
        errors = []
        if config.log_level.upper() not in LOG_LEVELS:
            errors.append(f"system.log_level must be one of {LOG_LEVELS}")
        if config.max_log_size_mb < 1:
            errors.append("system.max_log_size_mb must be at least 1")
        if not config.storage_cap_gb > 0.0:
            errors.append("system.storage_cap_gb must be positive")
        return errors

    @classmethod
    def validate(cls, config: TestbedConfig) -> List[str]:
        """Validate entire configuration."""
        all_errors = []

        all_errors.extend(cls.validate_gas(config.gas))
        all_errors.extend(cls.validate_init(config.init))
        all_errors.extend(cls.validate_dns(config.dns))
        all_errors.extend(cls.validate_les(config.les))
        all_errors.extend(cls.validate_nesting(config.dns, config.les))
        all_errors.extend(cls.validate_extract(config.extract))
        all_errors.extend(cls.validate_train(config.train))
        all_errors.extend(cls.validate_report(config.report))
        all_errors.extend(cls.validate_system(config.system))

        return all_errors


# =============================================================================
# PARSING
# =============================================================================


def _coerce(value: Any, type_name: str, key: str) -> Any:
    """Convert a parsed value to the declared field type."""
    optional = type_name.startswith("Optional[")
    if optional:
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        type_name = type_name[len("Optional["):-1]

    try:
        if type_name == "bool":
            if isinstance(value, bool):
                return value
            # "clip = none" switches a limiter off
            if value is None or (isinstance(value, str) and value.lower() == "none"):
                return False
            if isinstance(value, str) and value.lower() in ("true", "yes", "on", "1"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "no", "off", "0"):
                return False
            raise ValueError(value)
        if type_name == "int":
            if isinstance(value, bool):
                raise ValueError(value)
            number = float(value)
            if not number.is_integer():
                raise ValueError(value)
            return int(number)
        if type_name == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if type_name == "str":
            return str(value)
        if type_name.startswith("List["):
            if isinstance(value, str):
                value = [item.strip() for item in value.split(",") if item.strip()]
            return [str(item) for item in value]
    except (TypeError, ValueError):
        raise ConfigurationError(f"invalid value for {key}: {value!r} (expected {type_name})")
    return value


def parse_flat_text(text: str) -> Dict[str, Dict[str, Any]]:
    """Parse ``section.key = value`` lines into nested section dicts."""
    data: Dict[str, Dict[str, Any]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigurationError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        try:
            parsed = yaml.safe_load(value) if value else None
        except yaml.YAMLError:
            parsed = value
        data.setdefault(section, {})[name] = parsed
    return data


def config_from_dict(data: Mapping[str, Any]) -> TestbedConfig:
    """Convert nested section dicts to a TestbedConfig, rejecting unknown keys."""
    sections: Dict[str, Any] = {}
    for section, values in data.items():
        if section not in SECTION_TYPES:
            raise ConfigurationError(f"unknown configuration section: {section!r}")
        if values is None:
            continue
        if not isinstance(values, Mapping):
            raise ConfigurationError(f"section {section!r} must be a mapping")
        cls = SECTION_TYPES[section]
        declared = {f.name: str(f.type) for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in declared:
                raise ConfigurationError(f"unknown configuration key: {section}.{key}")
            kwargs[key] = _coerce(value, declared[key], f"{section}.{key}")
        sections[section] = cls(**kwargs)
    return TestbedConfig(**sections)


# =============================================================================
# MANAGER
# =============================================================================


class ConfigManager:
    """Loads, validates and hashes one testbed configuration."""

    ENV_PREFIX = "PERFECTLES_"
    ENV_MAPPINGS = {
        "LOG_LEVEL": ("system", "log_level"),
        "LOG_FILE": ("system", "log_file"),
        "STORAGE_CAP_GB": ("system", "storage_cap_gb"),
        "SEED": ("init", "seed"),
        "TRAIN_SEED": ("train", "seed"),
    }

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None):
        self.config_path = Path(config_path) if config_path else None
        self.overrides: Dict[str, Any] = dict(overrides or {})
        self._config: Optional[TestbedConfig] = None
        self._load_config(self.overrides)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ConfigManager":
        """A new manager on the same file with extra dotted overrides layered on top."""
        return ConfigManager(self.config_path, {**self.overrides, **overrides})

    def _get_env_var(self, key: str, default: Any = None) -> Any:
        """Get environment variable with PERFECTLES_ prefix."""
        value = os.getenv(f"{self.ENV_PREFIX}{key}")
        if value is None:
            return default
        if value.lower() in ("true", "yes"):
            return True
        if value.lower() in ("false", "no"):
            return False
        try:
            return int(value)
        except ValueError:
            try:
                return float(value)
            except ValueError:
                return value

    def _read_file(self) -> Dict[str, Any]:
        if self.config_path is None:
            return {}
        if not self.config_path.exists():
            raise ConfigurationError(f"configuration file not found: {self.config_path}")
        text = self.config_path.read_text(encoding="utf-8")
        if self.config_path.suffix in (".yaml", ".yml"):
            try:
                return yaml.safe_load(text) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"cannot parse {self.config_path}: {e}")
        return parse_flat_text(text)

    @staticmethod
    def _merge_configs(*configs: Mapping[str, Any]) -> Dict[str, Any]:
        """Merge section dicts, later ones taking precedence."""
        result: Dict[str, Any] = {}
        for config in configs:
            for key, value in config.items():
                if isinstance(value, Mapping) and isinstance(result.get(key), dict):
                    result[key] = {**result[key], **value}
                else:
                    result[key] = dict(value) if isinstance(value, Mapping) else value
        return result

    def _apply_env_overrides(self, data: Dict[str, Any]) -> None:
        for env_key, (section, key) in self.ENV_MAPPINGS.items():
            value = self._get_env_var(env_key)
            if value is not None:
                data.setdefault(section, {})[key] = value

    def _load_config(self, overrides: Mapping[str, Any]) -> None:
        file_data = self._read_file()
        nested_overrides: Dict[str, Dict[str, Any]] = {}
        for dotted, value in overrides.items():
            if "." not in dotted:
                raise ConfigurationError(f"override {dotted!r} lacks a section prefix")
            section, key = dotted.split(".", 1)
            nested_overrides.setdefault(section, {})[key] = value

        merged = self._merge_configs(file_data)
        self._apply_env_overrides(merged)
        merged = self._merge_configs(merged, nested_overrides)

        self._config = config_from_dict(merged)
        errors = ConfigValidator.validate(self._config)
        if errors:
            raise ConfigurationError("invalid configuration: " + "; ".join(errors))

    def get(self) -> TestbedConfig:
        return self._config

    def get_value(self, section: str, key: str, default: Any = None) -> Any:
        return self.export_to_dict().get(section, {}).get(key, default)

    def set_value(self, section: str, key: str, value: Any) -> None:
        """Set one value, re-validating the whole configuration."""
        data = self.export_to_dict()
        if section not in data or key not in data[section]:
            raise ConfigurationError(f"unknown configuration key: {section}.{key}")
        data[section][key] = value
        candidate = config_from_dict(data)
        errors = ConfigValidator.validate(candidate)
        if errors:
            raise ConfigurationError("invalid configuration: " + "; ".join(errors))
        self._config = candidate

    def export_to_dict(self) -> Dict[str, Any]:
        return asdict(self._config)


    def config_hash(self, *sections: str) -> str:
        """SHA-256 of the canonical JSON dump, optionally restricted to sections."""
        data = self.export_to_dict()
        if sections:
            data = {name: data[name] for name in sections}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def export_flat(self, path: str) -> None:
        """Write a ``section.key = value`` file that loads back to the same config."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_flat_text(), encoding="utf-8")

    def to_flat_text(self) -> str:
        lines = ["# PerfectLES run configuration"]
        for section, values in self.export_to_dict().items():
            lines.append("")
            for key, value in values.items():
                if value is None:
                    text = "none"
                elif isinstance(value, list):
                    text = "[" + ", ".join(str(v) for v in value) + "]"
                elif isinstance(value, float):
                    text = repr(value) if math.isfinite(value) else str(value)
                elif isinstance(value, bool):
                    text = "true" if value else "false"
                else:
                    text = str(value)
                lines.append(f"{section}.{key} = {text}")
        return "\n".join(lines) + "\n"

    def save_yaml(self, path: str) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.export_to_dict(), f, default_flow_style=False, sort_keys=False)

    def validate(self) -> List[str]:
        return ConfigValidator.validate(self._config)


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> TestbedConfig:
    """Load, override and validate a configuration; raises ConfigurationError."""
    return ConfigManager(path, overrides).get()




def main():
    """Print the default configuration as a flat run file."""
    import sys

    manager = ConfigManager(sys.argv[1] if len(sys.argv) > 1 else None)
    sys.stdout.write(manager.to_flat_text())
    logger.info(f"config hash {manager.config_hash()}")


if __name__ == "__main__":
    main()
