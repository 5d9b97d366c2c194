"""Configuration: layered YAML loading, schema validation, experiment settings."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import jsonschema
import yaml

from selrobust.errors import ConfigError
from selrobust.models import NetworkSpec, micronet_spec

logger = logging.getLogger(__name__)

SCHEMA_DIR = Path(__file__).resolve().parent / "schemas"
PROJECT_CONFIG_NAME = ".selrobust.yaml"
USER_DIR_NAME = ".selrobust"

# Built-in defaults: the desk-scale experiment.
SELROBUST_DEFAULTS: Dict[str, Any] = {
    "verbose": False,
    "output_dir": "selrobust-results",
    "workers": 1,
    "alphas": [-2.0, -1.0, -0.5, -0.2, 0.0, 0.2, 0.5, 1.0, 2.0],
    "seeds": [0, 1, 2, 3, 4],
    "data": {
        "path": None,
        "seed": 1234,
        "n_classes": 8,
        "image_size": 16,
        "train_per_class": 200,
        "val_per_class": 40,
        "test_per_class": 40,
        "noise": 0.05,
    },
    "model": {
        "widths": [16, 32, 64],
        "kernel": 3,
        "batchnorm": True,
        "pool": "avg",
        "hidden": [64],
    },
    "train": {
        "epochs": 20,
        "batch_size": 64,
        "learning_rate": 0.05,
        "anneal_epochs": [12, 17],
        "anneal_factor": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "si_epsilon": 1e-6,
        "pgd_train_steps": [],
        "pgd_train_alpha": 0.0,
        "keep_all_checkpoints": False,
    },
    "attack": {
        "fgsm_epsilons": [0.0, 1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255],
        "pgd_epsilon": 16 / 255,
        "pgd_steps": [1, 5, 10, 20, 40],
        "step_size": None,
        "step_fraction": 0.1,
        "transfer": True,
    },
    "corruption": {
        "enabled": True,
        "seeds": [0],
        "kinds": ["gaussian_noise", "shot_noise", "brightness", "contrast", "gaussian_blur"],
    },
    "analysis": {
        "selectivity": True,
        "dead_threshold": 0.0,
        "jacobian": True,
        "spectral": False,
        "gradients": True,
        "gradient_samples": 200,
        "dimensionality": True,
        "thresholds": [0.90, 0.95, 0.99],
        "twonn_discard": 0.1,
        "dimensionality_pgd_steps": 40,
    },
    "report": {
        "bootstrap_resamples": 1000,
        "confidence": 0.95,
        "bootstrap_seed": 0,
    },
}

# Overrides applied by ``selrobust init --preset extended``.
EXTENDED_PRESET: Dict[str, Any] = {
    "attack": {"step_size": 0.0001},
    "train": {"pgd_train_steps": [0, 4, 8]},
}


def get_user_dir() -> Path:
    env_home = os.environ.get("SELROBUST_HOME", "").strip()
    if env_home:
        logger.debug("User config dir from SELROBUST_HOME: %s", env_home)
        return Path(env_home)
    return Path.home() / USER_DIR_NAME


def _load_yaml_file(path: Path) -> Dict[str, Any]:
    """Load a YAML file and return its contents as a dict.

    Returns an empty dict if the file does not exist or contains invalid YAML.
    """
    if not path.is_file():
        logger.debug("YAML config file not found: %s", path)
        return {}
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        logger.warning("Invalid YAML in config file %s: %s", path, exc)
        return {}
    except OSError as exc:
        logger.warning("Failed to read config file %s: %s", path, exc)
        return {}
    if data is None:
        return {}
    if not isinstance(data, dict):
        logger.warning(
            "YAML config file %s did not produce a dict (got %s), ignoring",
            path,
            type(data).__name__,
        )
        return {}
    logger.debug("Loaded YAML config from %s (%d keys)", path, len(data))
    return data


def deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``overlay`` onto a copy of ``base``; ``None`` overlay values are skipped."""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if value is None and key in merged:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_selrobust_config(
    *,
    project_dir: Optional[Path] = None,
    user_dir: Optional[Path] = None,
    config_file: Optional[Path] = None,
    cli_overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Load and merge configuration from all sources.

    Precedence (highest to lowest):
        1. cli_overrides  -- explicit CLI flags (``None`` means "not provided")
        2. SELROBUST_OUTPUT_ROOT env var (``output_dir`` only)
        3. config_file    -- ``--config FILE``
        4. project config -- .selrobust.yaml in the working directory
        5. user config    -- ~/.selrobust/config.yaml
        6. SELROBUST_DEFAULTS
    """
    merged = copy.deepcopy(SELROBUST_DEFAULTS)

    if user_dir is None:
        user_dir = get_user_dir()
    merged = deep_merge(merged, _load_yaml_file(user_dir / "config.yaml"))

    if project_dir is None:
        project_dir = Path.cwd()
    merged = deep_merge(merged, _load_yaml_file(project_dir / PROJECT_CONFIG_NAME))

    if config_file is not None:
        if not Path(config_file).is_file():
            raise ConfigError(f"config file not found: {config_file}")
        merged = deep_merge(merged, _load_yaml_file(Path(config_file)))

    env_root = os.environ.get("SELROBUST_OUTPUT_ROOT", "").strip()
    if env_root:
        logger.debug("output_dir from SELROBUST_OUTPUT_ROOT env: %s", env_root)
        merged["output_dir"] = env_root

    if cli_overrides:
        merged = deep_merge(merged, {k: v for k, v in cli_overrides.items() if v is not None})

    logger.debug("Final merged selrobust config: %s", merged)
    return merged


def load_schema(name: str) -> Dict[str, Any]:
    return json.loads((SCHEMA_DIR / name).read_text(encoding="utf-8"))


def validate_against_schema(payload: Dict[str, Any], schema_name: str) -> None:
    try:
        jsonschema.validate(payload, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"Schema violation at {path}: {exc.message}") from exc


@dataclass(frozen=True)
class DataSettings:
    path: Optional[str] = None
    seed: int = 1234
    n_classes: int = 8
    image_size: int = 16
    train_per_class: int = 200
    val_per_class: int = 40
    test_per_class: int = 40
    noise: float = 0.05


@dataclass(frozen=True)
class ModelSettings:
    widths: Tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    batchnorm: bool = True
    pool: str = "avg"
    hidden: Tuple[int, ...] = (64,)

    def network_spec(self, input_shape: Tuple[int, int, int], n_classes: int) -> NetworkSpec:
        return micronet_spec(
            input_shape=input_shape, n_classes=n_classes, widths=self.widths,
            hidden=self.hidden, kernel=self.kernel, batchnorm=self.batchnorm, pool=self.pool,
        )


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    anneal_epochs: Tuple[int, ...] = (12, 17)
    anneal_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    si_epsilon: float = 1e-6
    pgd_train_steps: Tuple[int, ...] = ()
    pgd_train_alpha: float = 0.0
    keep_all_checkpoints: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be positive ({self.epochs}, {self.batch_size})")
        if not 0.0 < self.anneal_factor <= 1.0:
            raise ConfigError(f"anneal_factor must lie in (0, 1], got {self.anneal_factor}")

    @property
    def training_fields(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("pgd_train_steps")
        data.pop("pgd_train_alpha")
        data.pop("keep_all_checkpoints")
        return data


@dataclass(frozen=True)
class AttackSettings:
    fgsm_epsilons: Tuple[float, ...] = (0.0, 1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255)
    pgd_epsilon: float = 16 / 255
    pgd_steps: Tuple[int, ...] = (1, 5, 10, 20, 40)
    step_size: Optional[float] = None
    step_fraction: float = 0.1
    transfer: bool = True

    def pgd_step_size(self, epsilon: float) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.step_fraction * epsilon

    @property
    def step_rule(self) -> str:
        return f"fixed:{self.step_size!r}" if self.step_size is not None else f"fraction:{self.step_fraction!r}"


@dataclass(frozen=True)
class CorruptionSettings:
    enabled: bool = True
    seeds: Tuple[int, ...] = (0,)
    kinds: Tuple[str, ...] = ("gaussian_noise", "shot_noise", "brightness", "contrast", "gaussian_blur")


@dataclass(frozen=True)
class AnalysisSettings:
    selectivity: bool = True
    dead_threshold: float = 0.0
    jacobian: bool = True
    spectral: bool = False
    gradients: bool = True
    gradient_samples: int = 200
    dimensionality: bool = True
    thresholds: Tuple[float, ...] = (0.90, 0.95, 0.99)
    twonn_discard: float = 0.1
    dimensionality_pgd_steps: int = 40


@dataclass(frozen=True)
class ReportSettings:
    bootstrap_resamples: int = 1000
    confidence: float = 0.95
    bootstrap_seed: int = 0


def _tuplify(section: Dict[str, Any]) -> Dict[str, Any]:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    alphas: Tuple[float, ...] = tuple(SELROBUST_DEFAULTS["alphas"])
    seeds: Tuple[int, ...] = tuple(SELROBUST_DEFAULTS["seeds"])
    output_dir: str = "selrobust-results"
    workers: int = 1
    verbose: bool = False
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    corruption: CorruptionSettings = field(default_factory=CorruptionSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    report: ReportSettings = field(default_factory=ReportSettings)

    def __post_init__(self) -> None:
        if not self.alphas:
            raise ConfigError("at least one alpha is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any]) -> "ExperimentConfig":
        """Validate a merged mapping against the schema and build the config."""
        full = deep_merge(SELROBUST_DEFAULTS, mapping)
        validate_against_schema(full, "experiment-config.schema.json")
        return cls(
            alphas=tuple(float(a) for a in full["alphas"]),
            seeds=tuple(int(s) for s in full["seeds"]),
            output_dir=str(full["output_dir"]),
            workers=int(full["workers"]),
            verbose=bool(full["verbose"]),
            data=DataSettings(**full["data"]),
            model=ModelSettings(**_tuplify(full["model"])),
            train=TrainSettings(**_tuplify(full["train"])),
            attack=AttackSettings(**_tuplify(full["attack"])),
            corruption=CorruptionSettings(**_tuplify(full["corruption"])),
            analysis=AnalysisSettings(**_tuplify(full["analysis"])),
            report=ReportSettings(**full["report"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        return json.loads(json.dumps(data))

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (1, self.data.image_size, self.data.image_size)

    def network_spec(self) -> NetworkSpec:
        return self.model.network_spec(self.input_shape, self.data.n_classes)

    def config_hash(self, alpha: float, seed: int, pgd_train_steps: int = 0) -> str:
        """sha256 over every field that affects a training run."""
        payload = {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": self.train.training_fields,
            "alpha": float(alpha),
            "seed": int(seed),
            "pgd_train_steps": int(pgd_train_steps),
        }
        if pgd_train_steps:
            payload["pgd_attack"] = {
                "epsilon": self.attack.pgd_epsilon,
                "step": self.attack.pgd_step_size(self.attack.pgd_epsilon),
            }
        canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_experiment_config(
    *,
    config_file: Optional[Path] = None,
    cli_overrides: Optional[Dict[str, Any]] = None,
    project_dir: Optional[Path] = None,
    user_dir: Optional[Path] = None,
) -> ExperimentConfig:
    merged = load_selrobust_config(
        project_dir=project_dir, user_dir=user_dir,
        config_file=config_file, cli_overrides=cli_overrides,
    )
    return ExperimentConfig.from_mapping(merged)


def config_template(preset: str = "desk") -> Dict[str, Any]:
    if preset == "desk":
        return copy.deepcopy(SELROBUST_DEFAULTS)
    if preset == "extended":
        return deep_merge(SELROBUST_DEFAULTS, EXTENDED_PRESET)
    raise ConfigError(f"unknown preset {preset!r}; choose 'desk' or 'extended'")


def list_overrides(values: Optional[List[str]]) -> Optional[List[float]]:
    """Parse comma-separated CLI lists ("-1,0,1") into floats; ``None`` passes through."""
    if not values:
        return None
    out: List[float] = []
    for chunk in values:
        for token in str(chunk).split(","):
            token = token.strip()
            if token:
                try:
                    out.append(float(token))
                except ValueError as exc:
                    raise ConfigError(f"not a number: {token!r}") from exc
    return out
