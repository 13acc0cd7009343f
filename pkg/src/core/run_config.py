"""
Run Configuration

Validated experiment parameters and the YAML defaults file behind the command line.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
import logging
import os

import numpy as np
import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("bounce", "tails", "exit-dist", "indirect", "gas", "selftest")
FORMATS = ("csv", "json")
SEED_ENV = "RECOLLIDE_SEED"
DEFAULT_CONFIG_PATH = Path("config/recollide.yml")
COMMON_KEYS = ("seed", "workers", "format")
# YAML keys whose option parameter is named differently
PARAM_NAMES = {"format": "fmt", "out": "out_path", "html": "html_path", "r": "radius"}
VECTOR_TOL = 1e-6


def default_seed() -> int:
    """RECOLLIDE_SEED if set, else 0."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        seed = int(raw, 0)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer")
    return check_seed(seed)


def check_seed(seed: int) -> int:
    if not 0 <= int(seed) < 2 ** 64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return int(seed)


def parse_floats(text: Union[str, Sequence[float]], name: str) -> List[float]:
    """Comma-separated reals (or an already parsed list)."""
    if isinstance(text, (int, float)):
        return [float(text)]
    if not isinstance(text, str):
        return [float(x) for x in text]
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of numbers, got {text!r}")
    if not values:
        raise ConfigError(f"{name} is empty")
    return values


def parse_vector(text: Union[str, Sequence[float]], name: str) -> np.ndarray:
    """
    Comma-separated triple, normalized to unit length.

    Raises:
        ConfigError: if the text is not three numbers or the vector is zero
    """
    values = parse_floats(text, name)
    if len(values) != 3:
        raise ConfigError(f"{name} needs three components, got {len(values)}")
    vector = np.array(values, dtype=float)
    length = float(np.linalg.norm(vector))
    if not length > 0.0:
        raise ConfigError(f"{name} must be non-zero")
    if abs(length - 1.0) > VECTOR_TOL:
        logger.warning(f"{name}={values} has length {length:.6g}, normalizing")
    return vector / length


def parse_budget(value: Union[str, int, float], name: str = "budget") -> int:
    """Integer budget, accepting scientific notation such as 2e6."""
    try:
        budget = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if not budget >= 1 or budget != int(budget):
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return int(budget)


@dataclass
class RunConfig:
    """
    Effective parameters of one command-line run.

    `params` holds the subcommand-specific values after parsing; the whole
    object is echoed into every artifact.
    """

    subcommand: str
    seed: int = 0
    budget: Optional[int] = None
    out_path: Optional[str] = None
    format: str = "json"
    workers: int = 1
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        check_seed(self.seed)
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.budget is not None and self.budget < 1:
            raise ConfigError(f"budget must be positive, got {self.budget}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["params"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return cls(
            subcommand=data["subcommand"],
            seed=int(data.get("seed", 0)),
            budget=data.get("budget"),
            out_path=data.get("out_path"),
            format=data.get("format", "json"),
            workers=int(data.get("workers", 1)),
            params=dict(data.get("params", {})),
        )


def load_config(path: Union[str, Path] = DEFAULT_CONFIG_PATH) -> Dict[str, Dict[str, Any]]:
    """
    Load per-subcommand defaults from YAML.

    The file holds a `recollide` mapping with common keys (seed, workers,
    format) and one section per subcommand; common keys are copied into
    every section unless the section sets them itself.

    Returns:
        Mapping subcommand -> {option name: value}, usable as click's default_map
    """
    path = Path(path)
    if not path.exists():
        logger.warning(f"Config file not found at {path}, using defaults")
        return {}

    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    root = data.get("recollide", data)

    common = {_param_name(key): root[key] for key in COMMON_KEYS if key in root}
    defaults: Dict[str, Dict[str, Any]] = {}
    for name in SUBCOMMANDS:
        section = root.get(name, root.get(name.replace("-", "_"), {})) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: section {name!r} must be a mapping")
        merged = dict(common)
        merged.update({_param_name(key, name): _option_value(value) for key, value in section.items()})
        defaults[name] = merged

    unknown = set(root) - set(COMMON_KEYS) - set(SUBCOMMANDS) - {n.replace("-", "_") for n in SUBCOMMANDS}
    if unknown:
        logger.warning(f"{path}: ignoring unknown keys {sorted(unknown)}")
    logger.info(f"Config loaded from {path}")
    return defaults


def _option_value(value: Any) -> Any:
    """Lists become the comma-separated strings the command-line options take."""
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return value


def _param_name(key: str, subcommand: str = "") -> str:
    """Option parameter name of a YAML key; `r` is the bounce radius but the mu radius of tails."""
    key = key.replace("-", "_")
    if key == "r" and subcommand != "tails":
        return key
    return PARAM_NAMES.get(key, key)
