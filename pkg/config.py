"""JSON experiment configuration.

Every section maps onto a dataclass; unknown keys, wrong types and
out-of-range values raise ``ConfigError``. Seeds for every stage derive from
the master seed by the fixed offsets in ``SEED_OFFSETS``.
"""
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from errors import ConfigError
from metrics.attacks import AttackConfig
from metrics.robustness import NoiseConfig
from models.hybrid import MaxMarginConfig
from spectral.nystrom import NystromConfig, ProjectionBackend
from train_classifier import TrainConfig

SEED_OFFSETS = {
    "data": 0,
    "init": 1,
    "shuffle": 2,
    "lr_layer": 3,
    "attack": 4,
    "noise": 5,
    "max_margin": 6,
    "split": 7,
}
VARIANTS = ("N-LR", "1-LR", "2-LR", "Bottle-LR")


def derive_seed(master, stage):
    return master * 100 + SEED_OFFSETS[stage]


@dataclass
class DatasetSpec:
    kind: str = "blobs"
    classes: int = 8
    dim: int = 64
    n_per_class: int = 400
    separation: float = 6.0
    path: Optional[str] = None
    test_fraction: float = 0.25


@dataclass
class NetworkSpec:
    hidden: List[int] = field(default_factory=lambda: [64, 64, 64])
    tap_index: Optional[int] = None


@dataclass
class TrainSpec:
    epochs: int = 30
    batch_size: int = 64
    lr_schedule: Optional[List[List[float]]] = None
    pretrain_epochs: int = 5
    projection_period: int = 10


@dataclass
class LRSpec:
    target_rank: Optional[int] = None  # None: tap width // 8
    lambda1: float = 1.0
    lambda2: float = 1.0
    w_learning_rate: Optional[float] = None
    backend: str = "exact_svd"
    nystrom_l: Optional[int] = None  # None: 2 * target_rank
    ensemble_t: int = 1
    second_tap: Optional[int] = None  # 2-LR; None: the layer before the tap
    second_rank: Optional[int] = None  # None: same rule as target_rank


@dataclass
class MetricsSpec:
    spectrum: bool = True
    attacks: bool = True
    black_box: bool = True
    curves: bool = True
    min_perturbation: bool = False
    noise: bool = True
    propagation: bool = True
    cushion: bool = True
    compression: bool = True
    posthoc: bool = True


@dataclass
class NoiseSpec:
    pixel_prob: float = 0.6
    sigma: float = 128 / 255


@dataclass
class SearchSpec:
    grid_start: float = 0.001
    grid_steps: int = 10
    bisection_steps: int = 4
    max_examples: int = 200
    max_iters: int = 100


@dataclass
class MaxMarginSpec:
    eta0: Optional[float] = None
    alpha_decay: Optional[float] = None
    l2_coeff: float = 0.01
    epochs: int = 20
    batch_size: int = 32


@dataclass
class CompressionSpec:
    dims: List[int] = field(default_factory=lambda: [2, 4, 8])
    taps: Optional[List[int]] = None  # None: each variant's own tap
    max_margin: MaxMarginSpec = field(default_factory=MaxMarginSpec)


@dataclass
class AttackSpec:
    kind: str = "iter_fsgm"
    epsilon: float = 0.03
    alpha: float = 0.005
    max_iters: int = 20
    stop_mode: str = "fixed_steps"
    overshoot: float = 0.02
    input_bounds: List[float] = field(default_factory=lambda: [0.0, 1.0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    verbose: bool = True
    tensorboard: bool = True
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    variants: List[str] = field(default_factory=lambda: ["N-LR", "1-LR"])
    lr_layer: LRSpec = field(default_factory=LRSpec)
    attacks: List[AttackSpec] = field(default_factory=lambda: [AttackSpec()])
    sweep_epsilons: List[float] = field(default_factory=lambda: [0.01, 0.02, 0.03, 0.05, 0.08])
    search: SearchSpec = field(default_factory=SearchSpec)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    compression: CompressionSpec = field(default_factory=CompressionSpec)
    checkpoints: Dict[str, str] = field(default_factory=dict)

    def train_config(self):
        schedule = self.train.lr_schedule
        return TrainConfig(
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            lr_schedule=[tuple(p) for p in schedule] if schedule is not None else None,
            pretrain_epochs=self.train.pretrain_epochs,
            projection_period=self.train.projection_period,
            rng_seed=derive_seed(self.seed, "shuffle"),
        )

    def attack_configs(self):
        return [
            AttackConfig(
                kind=a.kind,
                epsilon=a.epsilon,
                alpha=a.alpha,
                max_iters=a.max_iters,
                stop_mode=a.stop_mode,
                overshoot=a.overshoot,
                input_bounds=tuple(a.input_bounds),
            )
            for a in self.attacks
        ]

    def noise_config(self):
        return NoiseConfig(
            pixel_prob=self.noise.pixel_prob,
            sigma=self.noise.sigma,
            rng_seed=derive_seed(self.seed, "noise"),
        )

    def max_margin_config(self):
        mm = self.compression.max_margin
        return MaxMarginConfig(
            eta0=mm.eta0,
            alpha_decay=mm.alpha_decay,
            l2_coeff=mm.l2_coeff,
            epochs=mm.epochs,
            batch_size=mm.batch_size,
            rng_seed=derive_seed(self.seed, "max_margin"),
        )

    def nystrom_config(self, target_rank, dim):
        spec = self.lr_layer
        if ProjectionBackend(spec.backend) is ProjectionBackend.EXACT_SVD:
            return None
        return NystromConfig(
            l=spec.nystrom_l or min(2 * max(target_rank, 1), dim),
            ensemble_t=spec.ensemble_t,
            rng_seed=derive_seed(self.seed, "lr_layer"),
        )

    def to_dict(self):
        return dataclasses.asdict(self)


def _is_type(value, annotation):
    origin = getattr(annotation, "__origin__", None)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation in (int, bool, str):
        return isinstance(value, annotation) and (annotation is bool or not isinstance(value, bool))
    if origin is list:
        (inner,) = annotation.__args__
        return isinstance(value, list) and all(_is_type(v, inner) for v in value)
    if origin is dict:
        key, inner = annotation.__args__
        return isinstance(value, dict) and all(
            _is_type(k, key) and _is_type(v, inner) for k, v in value.items()
        )
    if origin is not None and type(None) in annotation.__args__:
        (inner,) = [a for a in annotation.__args__ if a is not type(None)]
        return value is None or _is_type(value, inner)
    return True


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        annotation = fields[name].type
        if dataclasses.is_dataclass(annotation):
            kwargs[name] = _build(annotation, value, f"{where}.{name}")
        elif getattr(annotation, "__origin__", None) is list and dataclasses.is_dataclass(
            annotation.__args__[0]
        ):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name} must be a list")
            kwargs[name] = [
                _build(annotation.__args__[0], v, f"{where}.{name}[{i}]")
                for i, v in enumerate(value)
            ]
        elif not _is_type(value, annotation):
            raise ConfigError(f"{where}.{name}: {value!r} has the wrong type")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def validate(cfg):
    """Range checks that span fields; builds the derived configs once to surface errors."""
    for variant in cfg.variants:
        if variant not in VARIANTS:
            raise ConfigError(f"variants: unknown variant {variant!r}, expected one of {VARIANTS}")
    if cfg.dataset.kind not in ("blobs", "csv"):
        raise ConfigError(f"dataset.kind must be 'blobs' or 'csv', got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "csv" and not cfg.dataset.path:
        raise ConfigError("dataset.path is required for csv datasets")
    data = cfg.dataset
    if data.kind == "blobs" and (data.classes < 2 or data.dim < 2 or data.n_per_class < 1):
        raise ConfigError("dataset needs classes >= 2, dim >= 2 and n_per_class >= 1")
    if not 0 < data.test_fraction < 1:
        raise ConfigError(f"dataset.test_fraction must lie in (0, 1), got {data.test_fraction}")
    if not cfg.network.hidden or min(cfg.network.hidden) < 1:
        raise ConfigError("network.hidden must list at least one positive layer width")
    lr = cfg.lr_layer
    for name in ("target_rank", "second_rank", "nystrom_l"):
        value = getattr(lr, name)
        if value is not None and value < 1:
            raise ConfigError(f"lr_layer.{name} must be >= 1, got {value}")
    if lr.lambda1 < 0 or lr.lambda2 < 0 or lr.ensemble_t < 1:
        raise ConfigError("lr_layer needs lambda1, lambda2 >= 0 and ensemble_t >= 1")
    if cfg.train.lr_schedule is not None and any(len(p) != 2 for p in cfg.train.lr_schedule):
        raise ConfigError("train.lr_schedule entries must be [epoch, rate] pairs")
    if any(e < 0 for e in cfg.sweep_epsilons):
        raise ConfigError("sweep_epsilons must be nonnegative")
    search = cfg.search
    if search.grid_start <= 0 or min(search.grid_steps, search.max_examples, search.max_iters) < 1:
        raise ConfigError("search needs grid_start > 0 and positive grid_steps, max_examples, max_iters")
    if any(d < 1 for d in cfg.compression.dims):
        raise ConfigError("compression.dims must be positive")
    if cfg.compression.taps is not None and any(t < 0 for t in cfg.compression.taps):
        raise ConfigError("compression.taps must be nonnegative layer indices")
    if cfg.seed < 0:
        raise ConfigError("seed must be nonnegative")
    try:
        ProjectionBackend(cfg.lr_layer.backend)
        cfg.train_config()
        cfg.attack_configs()
        cfg.noise_config()
        cfg.max_margin_config()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def config_from_dict(data):
    return validate(_build(ExperimentConfig, data, "config"))


def load_config(path, seed=None, output_dir=None):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    cfg = config_from_dict(data)
    if seed is not None:
        cfg.seed = seed
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    return validate(cfg)
