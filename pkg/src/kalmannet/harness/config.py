"""Experiment configuration: line-oriented ``section.key = value`` files.

Example::

    # 2x2 MSE curve
    experiment.id = curve
    experiment.seed = 7
    model.m = 2
    model.F = [[1, 1], [0, 1]]
    noise.inv_r2_db = 0, 3, 10
    training.epochs = 30

Lists are comma separated (or JSON), matrices are JSON nested lists, ``none``
clears an optional value. Every key has a default that depends on the
experiment id (see :func:`default_config`), and anything can be overridden
from a file or with ``--set section.key=value`` on the command line.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional

import numpy as np

from kalmannet.errors import InvalidArgumentError
from kalmannet.ssm import LorenzModel, NoiseSpec, canonical_linear_model, db_to_linear
from kalmannet.training import OnlineConfig, TrainingConfig

__all__ = [
    "ExperimentSection",
    "ModelSection",
    "NoiseSection",
    "DataSection",
    "GeneralizeSection",
    "OnlineSection",
    "ExperimentConfig",
    "EXPERIMENTS",
    "default_config",
    "parse_config",
    "load_config",
]

EXPERIMENTS = ("curve", "generalize", "convergence", "lorenz", "online", "custom")


@dataclass
class ExperimentSection:
    id: str = "custom"
    seed: int = 0
    out: str = "results"


@dataclass
class ModelSection:
    kind: str = "linear"            # linear | lorenz
    m: int = 2
    n: Optional[int] = None         # defaults to m
    form: str = "triangular"        # triangular | companion
    F: Optional[list] = None
    H: Optional[list] = None
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.02
    taylor_order: int = 5


@dataclass
class NoiseSection:
    inv_r2_db: List[float] = field(default_factory=lambda: [0.0])
    nu_db: float = 0.0
    # At fixed nu the filtering problem only changes scale with r^2, and so do
    # the losses and their gradients. Multiplying training.gamma and
    # training.clip_norm by r^2 keeps regularization and clipping equally
    # strong at every grid point.
    scale_hyperparameters: bool = True


@dataclass
class DataSection:
    N: int = 1000
    T: int = 80
    split: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class GeneralizeSection:
    long_T: int = 10000
    long_N: int = 20
    short_N: int = 1000
    checkpoint_dir: Optional[str] = None


@dataclass
class OnlineSection:
    window: int = 10
    learning_rate: float = 1e-3
    steps_per_window: int = 1
    gamma: float = 0.0
    q2_db: float = 10.0
    pretrain_r2_db: float = 10.0
    stream_r2_db: float = 25.0
    stream_length: int = 4000
    pretrain_epochs: int = 20
    pretrain_learning_rate: float = 1e-3
    pretrain_batch_size: int = 50
    checkpoint: Optional[str] = None

    def online_config(self) -> OnlineConfig:
        return OnlineConfig(window=self.window, learning_rate=self.learning_rate,
                            steps_per_window=self.steps_per_window, gamma=self.gamma)


_SECTIONS = ("experiment", "model", "noise", "data", "training", "generalize", "online")


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    data: DataSection = field(default_factory=DataSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    generalize: GeneralizeSection = field(default_factory=GeneralizeSection)
    online: OnlineSection = field(default_factory=OnlineSection)

    def validate(self) -> "ExperimentConfig":
        e, mo, no, d = self.experiment, self.model, self.noise, self.data
        if e.id not in EXPERIMENTS:
            raise InvalidArgumentError(f"unknown experiment id {e.id!r}; expected one of {EXPERIMENTS}")
        if e.seed < 0:
            raise InvalidArgumentError("experiment.seed must be >= 0")
        if mo.kind not in ("linear", "lorenz"):
            raise InvalidArgumentError(f"model.kind must be linear or lorenz, got {mo.kind!r}")
        if mo.m < 1 or (mo.n is not None and mo.n < 1):
            raise InvalidArgumentError("model dimensions must be positive")
        if mo.kind == "linear":
            self.linear_model(1.0, 1.0)     # shape checks on F/H overrides
        elif mo.dt <= 0 or mo.taylor_order < 1:
            raise InvalidArgumentError("model.dt must be positive and model.taylor_order >= 1")
        if not no.inv_r2_db:
            raise InvalidArgumentError("noise.inv_r2_db grid is empty")
        if d.N < 1 or d.T < 1:
            raise InvalidArgumentError("data.N and data.T must be positive")
        if len(d.split) != 3 or min(d.split) < 0 or abs(sum(d.split) - 1.0) > 1e-9:
            raise InvalidArgumentError("data.split needs three non-negative fractions summing to 1")
        g = self.generalize
        if min(g.long_T, g.long_N, g.short_N) < 1:
            raise InvalidArgumentError("generalize sizes must be positive")
        o = self.online
        if o.stream_length < 1 or o.pretrain_epochs < 0 or o.pretrain_batch_size < 1:
            raise InvalidArgumentError("online sizes must be positive")
        if o.learning_rate <= 0 or o.pretrain_learning_rate <= 0:
            raise InvalidArgumentError("online learning rates must be positive")
        o.online_config()
        return self

    # -------------------------------------------------------------- models

    def linear_model(self, q2: float, r2: float):
        mo = self.model
        F = None if mo.F is None else np.asarray(mo.F, dtype=np.float64)
        H = None if mo.H is None else np.asarray(mo.H, dtype=np.float64)
        n = mo.n if mo.n is not None else (H.shape[0] if H is not None and H.ndim == 2 else mo.m)
        try:
            model = canonical_linear_model(mo.m, n, q2=q2, r2=r2, F=F, H=H, form=mo.form)
        except (ValueError, IndexError) as exc:
            raise InvalidArgumentError(f"bad linear model in config: {exc}") from exc
        if model.m != mo.m or model.n != n:
            raise InvalidArgumentError(f"model.F/H give dims ({model.m}, {model.n}), config says ({mo.m}, {n})")
        return model

    def lorenz_model(self, q2: float, r2: float) -> LorenzModel:
        mo = self.model
        return LorenzModel(sigma=mo.sigma, rho=mo.rho, beta=mo.beta, dt=mo.dt, taylor_order=mo.taylor_order,
                           q2=q2, r2=r2)

    def model_at(self, inv_r2_db: float):
        """Model at one grid point (``q2 = r2 * nu``)."""
        spec = NoiseSpec.from_db(inv_r2_db, self.noise.nu_db)
        if self.model.kind == "lorenz":
            return self.lorenz_model(spec.q2, spec.r2)
        return self.linear_model(spec.q2, spec.r2)

    def training_at(self, inv_r2_db: float) -> TrainingConfig:
        """Training config for one grid point (see ``noise.scale_hyperparameters``)."""
        t = self.training
        if not self.noise.scale_hyperparameters:
            return t
        r2 = db_to_linear(-inv_r2_db)
        return replace(t, gamma=t.gamma * r2, clip_norm=None if t.clip_norm is None else t.clip_norm * r2)

    # -------------------------------------------------------------- text form

    def items(self, include_out: bool = True):
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if section == "experiment" and f.name == "out" and not include_out:
                    continue
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def to_text(self, include_out: bool = True) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.items(include_out))

    def config_hash(self) -> str:
        """Short digest of every setting that can change numeric results."""
        return hashlib.sha256(self.to_text(include_out=False).encode()).hexdigest()[:16]

    def with_overrides(self, text: str) -> "ExperimentConfig":
        return parse_config(text, base=self)

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return json.dumps(v)
    return str(v)


def _to_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _to_list(text: str) -> list:
    if text.startswith("["):
        out = json.loads(text)
        if not isinstance(out, list):
            raise ValueError("expected a list")
        return out
    return [float(x) for x in text.split(",") if x.strip()]


def _coerce(annotation: str, text: str):
    optional = annotation.startswith("Optional[")
    base = annotation[len("Optional["):-1] if optional else annotation
    if optional and text.lower() == "none":
        return None
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    if base == "bool":
        return _to_bool(text)
    if base == "str":
        return text
    if base in ("list", "List[float]"):
        values = _to_list(text)
        return [float(v) for v in values] if base == "List[float]" else values
    raise ValueError(f"unsupported field type {annotation}")


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply ``section.key = value`` lines on top of ``base`` (defaults if None)."""
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"config line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise InvalidArgumentError(f"config line {lineno}: unknown key {key!r}")
        types = {f.name: f.type for f in fields(getattr(cfg, section))}
        if name not in types:
            raise InvalidArgumentError(f"config line {lineno}: unknown key {key!r}")
        try:
            updates.setdefault(section, {})[name] = _coerce(str(types[name]), value)
        except (ValueError, json.JSONDecodeError) as exc:
            raise InvalidArgumentError(f"config line {lineno}: bad value for {key}: {exc}") from exc
    for section, values in updates.items():
        try:
            setattr(cfg, section, replace(getattr(cfg, section), **values))
        except ValueError as exc:
            raise InvalidArgumentError(f"config section {section}: {exc}") from exc
    return cfg


def load_config(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def default_config(experiment_id: str) -> ExperimentConfig:
    """Desk-scale defaults for each experiment."""
    if experiment_id not in EXPERIMENTS:
        raise InvalidArgumentError(f"unknown experiment id {experiment_id!r}; expected one of {EXPERIMENTS}")
    cfg = ExperimentConfig(experiment=ExperimentSection(id=experiment_id))
    base_training = TrainingConfig(mode="unsupervised", gamma=1e-4, batch_size=50, epochs=30,
                                   learning_rate=1e-3, patience=8, clip_norm=1.0)
    cfg.training = base_training
    if experiment_id in ("curve", "generalize"):
        cfg.noise = NoiseSection(inv_r2_db=[0.0, 3.0, 10.0, 20.0, 30.0])
    elif experiment_id == "convergence":
        cfg.training = replace(base_training, epochs=12, patience=100)
    elif experiment_id == "lorenz":
        cfg.model = ModelSection(kind="lorenz", m=3, n=3)
        cfg.data = DataSection(N=250, T=100)
        cfg.training = replace(base_training, batch_size=20, epochs=20, patience=6)
    return cfg.validate()
