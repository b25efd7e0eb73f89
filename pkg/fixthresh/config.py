from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Set

from fixthresh.detector import BranchMode, HybridConfig, TrainConfig
from fixthresh.errors import ConfigError, ContractError
from fixthresh.synthgen import DOMAIN_PRESETS, CueSpec, preset
from fixthresh.transforms import DEFAULT_GRID_TOKENS, ConditionGrid

REQUIRED_KEYS = ["run_name", "log_level", "seeds", "grid", "architectures"]
ALLOWED_LOG_LEVELS = {"DEBUG", "INFO", "WARN", "WARNING", "ERROR", "CRITICAL"}
DEFAULT_CONFIG_PATH = Path(__file__).parent / "configs" / "spectrum.json"
# set per run from input_size, architectures and seeds
HYBRID_DERIVED_KEYS = {"input_size", "branch_mode", "freq_enabled"}
TRAIN_DERIVED_KEYS = {"seed"}
SYNTH_DERIVED_KEYS = {"image_size", "name"}


@dataclass(frozen=True)
class ArchitectureSpec:
    """One detector variant of a run, e.g. cnn_only with frequency enhancement."""
    name: str
    branch_mode: BranchMode
    freq_enabled: bool = False


@dataclass
class RunConfig:
    """Settings for a spectrum reproduction run."""
    run_name: str
    log_level: str
    seeds: List[int]
    grid: List[str]
    architectures: List[ArchitectureSpec]
    input_size: int = 64
    synth: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    hybrid: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    out_dir: str = "report"

    @property
    def condition_grid(self) -> ConditionGrid:
        return ConditionGrid.from_tokens(self.grid)

    def domain_spec(self, domain: str) -> CueSpec:
        """Synthgen recipe for a domain preset with this run's overrides."""
        overrides = dict(self.synth.get(domain, {}))
        overrides["image_size"] = self.input_size
        return preset(domain, **overrides)

    def hybrid_config(self, arch: ArchitectureSpec) -> HybridConfig:
        return HybridConfig(
            **{**self.hybrid, "input_size": self.input_size,
               "branch_mode": arch.branch_mode, "freq_enabled": arch.freq_enabled}
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        raw["architectures"] = [
            {"name": a.name, "branch_mode": a.branch_mode.value, "freq_enabled": a.freq_enabled}
            for a in self.architectures
        ]
        return raw


def read_json_file(path: Path) -> Dict[str, Any]:
    """Read a JSON file and return its contents as a dictionary."""
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    with path.open("r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file is not valid JSON: {path}") from exc

    if not isinstance(raw, dict):
        raise ConfigError(f"Config file must hold a JSON object: {path}")
    return raw


def _validate_architectures(raw: Any) -> None:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("architectures must be a non-empty list")
    names = set()
    for i, arch in enumerate(raw):
        if not isinstance(arch, dict) or "name" not in arch or "branch_mode" not in arch:
            raise ConfigError(f"architectures[{i}] must have name and branch_mode")
        try:
            BranchMode(arch["branch_mode"])
        except ValueError:
            allowed = [m.value for m in BranchMode]
            raise ConfigError(f"architectures[{i}].branch_mode must be one of {allowed}, got {arch['branch_mode']!r}")
        if arch["name"] in names:
            raise ConfigError(f"architectures[{i}].name {arch['name']!r} is duplicated")
        names.add(arch["name"])


def _section(raw: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be an object")
    return value


def _check_keys(section: str, values: Mapping[str, Any], cls: type, derived: Set[str]) -> None:
    allowed = {f.name for f in fields(cls)} - derived
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"{section} has unknown keys {unknown}; allowed: {sorted(allowed)}")


def _validate_sections(raw: Dict[str, Any], input_size: int) -> None:
    """Check the hybrid, train and synth overrides by building the objects they feed."""
    hybrid = _section(raw, "hybrid")
    train = _section(raw, "train")
    synth = _section(raw, "synth")
    _check_keys("hybrid", hybrid, HybridConfig, HYBRID_DERIVED_KEYS)
    _check_keys("train", train, TrainConfig, TRAIN_DERIVED_KEYS)

    unknown = set(synth) - set(DOMAIN_PRESETS)
    if unknown:
        raise ConfigError(f"synth has unknown domains: {sorted(unknown)}")
    for domain, overrides in synth.items():
        if not isinstance(overrides, dict):
            raise ConfigError(f"synth.{domain} must be an object")
        _check_keys(f"synth.{domain}", overrides, CueSpec, SYNTH_DERIVED_KEYS)

    try:
        for arch in raw["architectures"]:
            HybridConfig(**{**hybrid, "input_size": input_size, "branch_mode": arch["branch_mode"]})
        TrainConfig(**train)
        for domain in DOMAIN_PRESETS:
            preset(domain, **{**synth.get(domain, {}), "image_size": input_size})
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"model, training or synth settings are invalid: {exc}") from exc


def validate_raw_config(raw: Dict[str, Any]) -> None:
    """
    Validate that the raw config contains required fields
    and that values are of the expected type.
    """
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"Missing required config keys: {', '.join(missing)}")

    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a non-empty list of integers")
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"seeds must be integers, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {seeds!r}")

    log_level = str(raw["log_level"]).upper()
    if log_level not in ALLOWED_LOG_LEVELS:
        raise ConfigError(
            f"log_level must be one of {sorted(ALLOWED_LOG_LEVELS)}, got {raw['log_level']!r}"
        )

    if not isinstance(raw["grid"], list):
        raise ConfigError("grid must be a list of condition tokens")
    try:
        ConditionGrid.from_tokens(raw["grid"])
    except ContractError as exc:
        raise ConfigError(f"grid is invalid: {exc}") from exc

    _validate_architectures(raw["architectures"])

    try:
        input_size = int(raw.get("input_size", 64))
    except (TypeError, ValueError):
        raise ConfigError("input_size must be an integer")
    if input_size < 8:
        raise ConfigError("input_size must be >= 8")

    _validate_sections(raw, input_size)


def parse_config(raw: Dict[str, Any]) -> RunConfig:
    """
    Convert a raw config dictionary into a RunConfig object.

    Assumes raw has already been validated.
    """
    return RunConfig(
        run_name=str(raw["run_name"]),
        log_level=str(raw["log_level"]).upper(),
        seeds=[int(s) for s in raw["seeds"]],
        grid=[str(t) for t in raw["grid"]],
        architectures=[
            ArchitectureSpec(
                name=str(a["name"]),
                branch_mode=BranchMode(a["branch_mode"]),
                freq_enabled=bool(a.get("freq_enabled", False)),
            )
            for a in raw["architectures"]
        ],
        input_size=int(raw.get("input_size", 64)),
        synth=copy.deepcopy(raw.get("synth", {})),
        hybrid=copy.deepcopy(raw.get("hybrid", {})),
        train=copy.deepcopy(raw.get("train", {})),
        out_dir=str(raw.get("out_dir", "report")),
    )


def load_config(path: Path) -> RunConfig:
    """
    High-level API: load and validate config from a JSON file.
    """
    raw = read_json_file(path)
    validate_raw_config(raw)
    return parse_config(raw)


def default_config() -> RunConfig:
    """Desk-scale spectrum reproduction defaults."""
    return RunConfig(
        run_name="spectrum",
        log_level="INFO",
        seeds=[0, 1, 2],
        grid=list(DEFAULT_GRID_TOKENS),
        architectures=[
            ArchitectureSpec("cnn_freq", BranchMode.CNN_ONLY, freq_enabled=True),
            ArchitectureSpec("vit_freq", BranchMode.VIT_ONLY, freq_enabled=True),
            ArchitectureSpec("hybrid", BranchMode.HYBRID, freq_enabled=False),
        ],
        input_size=64,
        train={"max_epochs": 20, "batch_size": 64},
    )


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """
    Return a copy of config with top-level keys replaced; None values are ignored.

    Precedence: built-in defaults < config file < overrides (CLI flags).

    Raises:
        ConfigError: if a key is unknown or the merged config is invalid.
    """
    raw = config.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in raw:
            raise ConfigError(f"Unknown config key: {key}")
        raw[key] = value
    validate_raw_config(raw)
    return parse_config(raw)
