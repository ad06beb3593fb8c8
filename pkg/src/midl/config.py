"""Declarative experiment configuration (JSON round-trippable)."""
import dataclasses
import json
import os
from dataclasses import dataclass, field

from .layers import ConfigError, GateConfig, LinearAnneal


_REPO_DATA = os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "data", "mnist")


def default_mnist_dir():
    """``$MIDL_MNIST_DIR``, else ``./data/mnist``, else the source checkout's ``data/mnist``."""
    env = os.environ.get("MIDL_MNIST_DIR")
    if env:
        return env
    if os.path.isdir("data/mnist"):
        return "data/mnist"
    return os.path.normpath(_REPO_DATA)


@dataclass
class DatasetSpec:
    """Where the data comes from and which protocol perturbs it.

    ``seed=None`` derives the subset/noise seed from the run seed.
    """

    name: str = "mnist"
    path: str | None = None
    train_subset: int | None = 10000
    test_subset: int | None = None
    noise_rate: float = 0.0
    stress_per_class: int | None = None
    synthetic_n: int = 2000
    synthetic_d: int = 20
    separation: float = 3.0
    synthetic_test_n: int = 2000
    seed: int | None = None

    def mnist_dir(self):
        return self.path or default_mnist_dir()


@dataclass
class ModelSpec:
    kind: str = "midl"
    widths: list = field(default_factory=lambda: [784, 256, 10])
    dropout_p: float = 0.5
    rank: int | None = None
    hidden: int | None = None


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class ExperimentConfig:
    experiment: str = "default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    gate: GateConfig = field(default_factory=GateConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    batch_size: int = 64
    epochs: int = 5
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str | None = "runs"
    eval_every: int = 1
    eval_train: bool = True
    smi: bool = True
    smi_projections: int = 128
    smi_bins: int = 16
    anr_tau: float = 0.01
    latency_repeats: int = 5

    def validate(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.optimizer.learning_rate}")
        if self.optimizer.kind != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer.kind!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dataset.name not in ("mnist", "two_gaussians"):
            raise ConfigError(f"unknown dataset {self.dataset.name!r}")
        if self.latency_repeats and self.latency_repeats < 3:
            raise ConfigError("latency_repeats must be 0 (off) or >= 3")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sections = {
            "dataset": DatasetSpec,
            "model": ModelSpec,
            "optimizer": OptimizerSpec,
        }
        kw = {}
        for key, value in d.items():
            if key in sections:
                kw[key] = _build(sections[key], value, key)
            elif key == "gate":
                kw[key] = _gate(value)
            elif key in _field_names(cls):
                kw[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(**kw).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, value, where):
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(value) - _field_names(cls)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**value)


def _gate(value):
    if not isinstance(value, dict):
        raise ConfigError("gate must be an object")
    value = dict(value)
    unknown = set(value) - _field_names(GateConfig)
    if unknown:
        raise ConfigError(f"unknown gate keys: {sorted(unknown)}")
    if value.get("anneal") is not None:
        value["anneal"] = _build(LinearAnneal, value["anneal"], "gate.anneal")
    try:
        return GateConfig(**value)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            return ExperimentConfig.from_json(f.read())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
