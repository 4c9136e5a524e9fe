"""Run configuration: a single JSON document parsed into strict dataclass sections.

Unknown keys are rejected with the offending key and section named. Every
command writes the resolved document (defaults filled in) next to its outputs.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin

from src.datasets import CORRUPTION_KINDS, CorruptionSpec
from src.engine import StagePolicy
from src.errors import ConfigError
from src.logger import get_logger
from src.objectives import ObjectiveSpec
from src.priors import PRIOR_KINDS
from src.training import TrainingConfig

logger = get_logger()

SCHEMA_VERSION = 1
RESOLVED_CONFIG_FILE = 'resolved_config.json'

DIP_KEYS = {'scales': int, 'width': int, 'noise_channels': int, 'skip_channels': int}
INR_KEYS = {'num_frequencies': int, 'freq_variance': float, 'hidden_layers': int, 'hidden_width': int, 'w0': float}


@dataclass
class CorruptionSection:
    kind: str = 'gaussian_noise'
    severity: float = 0.0
    seed: int = 0

    def to_spec(self) -> CorruptionSpec:
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind '{self.kind}' in section 'data.corruption'")
        return CorruptionSpec(kind=self.kind, severity=self.severity, seed=self.seed)


@dataclass
class DataSection:
    """Where images come from and which queries are explained."""

    source: str = 'toy'
    path: Optional[str] = None
    class_map: Optional[Dict[str, int]] = None
    image_size: int = 32
    n_per_class: int = 200
    seed: int = 0
    test_fraction: float = 0.1
    query_split: str = 'train'
    num_queries: int = 50
    source_label: int = 0
    target_label: int = 1
    corruption: Optional[CorruptionSection] = None


@dataclass
class ClassifierSection:
    """Training settings of the bundle plus where it lives."""

    bundle_dir: str = 'runs/bundle'
    mode: str = 'dep'
    arch: str = 'conv4'
    widths: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    hflip: bool = False
    beta1: float = 1.0
    beta2: float = 0.5
    gamma: float = 1.0
    predictor_width: int = 128
    embedding_dim: int = 64
    length_scale: float = 0.5
    centroid_momentum: float = 0.999
    gradient_penalty: float = 0.5

    def to_training_config(self, seed: int, device: str) -> TrainingConfig:
        settings = asdict(self)
        settings.pop('bundle_dir')
        return TrainingConfig(seed=seed, device=device, **settings)


@dataclass
class PriorSection:
    kind: str = 'inr'
    warm_start_steps: Optional[int] = None
    warm_start_learning_rate: Optional[float] = None
    dip: Dict[str, Any] = field(default_factory=dict)
    inr: Dict[str, Any] = field(default_factory=dict)

    def options(self) -> Dict[str, Any]:
        """Keyword overrides for build_prior."""
        return {'dip': dict(self.dip), 'inr': dict(self.inr)}


@dataclass
class ObjectiveSection:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    semantics_mode: str = 'lso'
    lso_taps: Optional[List[str]] = None
    consistency_mode: str = 'dep'
    s_star: Any = 'auto'
    tau: float = 0.5
    kappa: float = 2.0
    tv_weight: float = 0.0
    l2_weight: float = 0.0

    def to_spec(self) -> ObjectiveSpec:
        settings = asdict(self)
        if settings['s_star'] == 'auto':
            settings['s_star'] = None
        elif not isinstance(settings['s_star'], (int, float)):
            raise ConfigError(f"s_star must be 'auto' or a number in section 'objective', got {self.s_star!r}")
        return ObjectiveSpec(**settings)


@dataclass
class PolicySection:
    steps_per_stage: int = 300
    plateau_window: int = 50
    plateau_rel_tol: float = 1e-3
    min_stage_steps: int = 100
    max_stages: Optional[int] = None
    learning_rate: float = 1e-3
    success_prob: float = 0.9

    def to_policy(self) -> StagePolicy:
        return StagePolicy(**asdict(self))


@dataclass
class MetricsSection:
    threshold: float = 0.05
    cd_repeats: int = 5
    compute_cd: bool = True


@dataclass
class OutputSection:
    dir: str = 'runs/output'
    save_stages: bool = False


@dataclass
class RunConfig:
    """Fully resolved run configuration."""

    schema_version: int = SCHEMA_VERSION
    master_seed: int = 0
    device: str = 'cpu'
    data: DataSection = field(default_factory=DataSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    prior: PriorSection = field(default_factory=PriorSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    policy: PolicySection = field(default_factory=PolicySection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def fingerprint(self) -> str:
        """sha256 over every setting that influences generated counterfactuals."""
        relevant = {
            key: value for key, value in self.to_dict().items()
            if key in ('data', 'classifier', 'prior', 'objective', 'policy', 'master_seed')
        }
        encoded = json.dumps(relevant, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(encoded.encode('utf-8')).hexdigest()

    def validate(self) -> None:
        """Cross-field checks that individual sections cannot do alone.

        Raises:
            ConfigError: On any invalid value
        """
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if self.data.source not in ('toy', 'folder'):
            raise ConfigError(f"unknown data source '{self.data.source}' in section 'data'")
        if self.data.source == 'folder' and (not self.data.path or not self.data.class_map):
            raise ConfigError("data source 'folder' needs 'path' and 'class_map' in section 'data'")
        if self.data.query_split not in ('train', 'test'):
            raise ConfigError(f"query_split must be 'train' or 'test' in section 'data', got '{self.data.query_split}'")
        if self.data.source_label == self.data.target_label:
            raise ConfigError("source_label and target_label must differ in section 'data'")
        if self.data.num_queries < 1:
            raise ConfigError("num_queries must be >= 1 in section 'data'")
        if self.prior.kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior '{self.prior.kind}' in section 'prior'")
        _reject_unknown(self.prior.dip, DIP_KEYS, 'prior.dip')
        _reject_unknown(self.prior.inr, INR_KEYS, 'prior.inr')
        _check_types(self.prior.dip, DIP_KEYS, 'prior.dip')
        _check_types(self.prior.inr, INR_KEYS, 'prior.inr')
        if self.prior.warm_start_steps is not None and self.prior.warm_start_steps < 0:
            raise ConfigError("warm_start_steps must be >= 0 in section 'prior'")
        if self.prior.warm_start_learning_rate is not None and not self.prior.warm_start_learning_rate > 0:
            raise ConfigError("warm_start_learning_rate must be > 0 in section 'prior'")
        if self.metrics.cd_repeats < 1:
            raise ConfigError("cd_repeats must be >= 1 in section 'metrics'")
        if self.data.corruption is not None:
            self.data.corruption.to_spec()
        self.classifier.to_training_config(self.master_seed, self.device).validate()
        self.objective.to_spec()
        self.policy.to_policy()


def _reject_unknown(values: Dict[str, Any], allowed, section: str) -> None:
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in section '{section}'")


def _matches(value: Any, annotation: Any) -> bool:
    """Whether a decoded JSON value fits a field annotation (ints count as floats, bools as neither)."""
    if annotation is Any:
        return True
    if annotation is type(None):
        return value is None
    origin = get_origin(annotation)
    if origin is Union:
        return any(_matches(value, arg) for arg in get_args(annotation))
    if origin is list:
        (item,) = get_args(annotation)
        return isinstance(value, list) and all(_matches(v, item) for v in value)
    if origin is dict:
        key_type, value_type = get_args(annotation)
        return isinstance(value, dict) and all(
            _matches(k, key_type) and _matches(v, value_type) for k, v in value.items()
        )
    if is_dataclass(annotation):
        return isinstance(value, dict)
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, annotation)


def _type_name(annotation: Any) -> str:
    if isinstance(annotation, type):
        return annotation.__name__
    return str(annotation).replace('typing.', '')


def _check_types(values: Dict[str, Any], annotations: Dict[str, Any], section: str) -> None:
    for key, value in values.items():
        annotation = annotations[key]
        if not _matches(value, annotation):
            raise ConfigError(
                f"'{key}' in section '{section}' must be {_type_name(annotation)}, got {value!r}"
            )


def _build_section(cls, values: Any, section: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be an object")
    annotations = {f.name: f.type for f in fields(cls)}
    _reject_unknown(values, annotations, section)
    _check_types(values, annotations, section)
    kwargs = dict(values)
    if cls is DataSection and kwargs.get('corruption') is not None:
        kwargs['corruption'] = _build_section(CorruptionSection, kwargs['corruption'], 'data.corruption')
    return cls(**kwargs)


SECTIONS = {
    'data': DataSection,
    'classifier': ClassifierSection,
    'prior': PriorSection,
    'objective': ObjectiveSection,
    'policy': PolicySection,
    'metrics': MetricsSection,
    'output': OutputSection,
}
ROOT_KEYS = {'schema_version': int, 'master_seed': int, 'device': str}


def parse_run_config(document: Dict[str, Any]) -> RunConfig:
    """Build a validated RunConfig from a parsed JSON document.

    Raises:
        ConfigError: On unknown keys, mistyped values or invalid values
    """
    if not isinstance(document, dict):
        raise ConfigError("run config must be a JSON object")
    _reject_unknown(document, set(ROOT_KEYS) | set(SECTIONS), 'root')
    _check_types({k: v for k, v in document.items() if k in ROOT_KEYS}, ROOT_KEYS, 'root')

    config = RunConfig(
        schema_version=document.get('schema_version', SCHEMA_VERSION),
        master_seed=document.get('master_seed', 0),
        device=document.get('device', 'cpu'),
        **{name: _build_section(cls, document.get(name), name) for name, cls in SECTIONS.items()},
    )
    try:
        config.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid run config: {e}") from e
    return config


def load_run_config(file_path: Optional[str]) -> RunConfig:
    """Load and validate a run config file; no path yields all defaults.

    Raises:
        ConfigError: If the file doesn't exist, is not valid JSON or fails validation
    """
    if file_path is None:
        logger.debug("No config file given, using defaults")
        return parse_run_config({})
    path = Path(file_path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {file_path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {file_path} is not valid JSON: {e}") from e
    logger.debug(f"Loaded config from {path}")
    return parse_run_config(document)


def write_resolved_config(config: RunConfig, directory: str) -> Path:
    """Serialize the resolved config to ``<directory>/resolved_config.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    target = out / RESOLVED_CONFIG_FILE
    with open(target, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return target
