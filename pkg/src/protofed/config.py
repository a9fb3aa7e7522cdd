"""Run configuration: a nested JSON document with strict key checking.

Every section maps onto a frozen dataclass. ``RunConfig.from_dict`` collects
every problem it finds (unknown keys, wrong types, out-of-range values,
missing files) and raises one ``ConfigError`` listing all of them, so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCORERS = ("ocnf", "gde", "kde")
ABLATIONS = ("pd", "p", "reg")
DATASET_KINDS = ("synthetic", "tabular", "idx")
AUGMENTATIONS = ("identity", "noise", "noise_dropout", "image")
OPTIMIZERS = ("sgd", "radam")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    classes: int = 8
    n_per_class: int = 300
    dim: int = 16
    separation: float = 8.0
    train_fraction: float = 0.8
    path: str | None = None
    label_column: str | None = None
    drop_columns: tuple[str, ...] = ()
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    max_per_class: int | None = None


@dataclass(frozen=True)
class EncoderSpec:
    hidden_dims: tuple[int, ...] = (64, 64)
    output_dim: int = 32
    groups: int = 8


@dataclass(frozen=True)
class FederationSpec:
    rounds: int = 50
    local_epochs: int = 1
    clients_per_round: int | None = None
    batch_size: int = 256
    optimizer: str = "sgd"
    lr: float = 0.5
    momentum: float = 0.0
    betas: tuple[float, float] = (0.94, 0.98)
    weight_decay: float = 0.0


@dataclass(frozen=True)
class FlowSpec:
    layers: int = 8
    hidden: tuple[int, ...] = (64, 64)
    clamp: float = 2.0
    epochs: int = 5
    lr: float = 5e-3
    batch_size: int = 8
    optimizer: str = "sgd"
    momentum: float = 0.0
    betas: tuple[float, float] = (0.94, 0.98)
    weight_decay: float = 0.0
    latent_noise: float = 0.5
    max_grad_norm: float | None = 10.0


@dataclass(frozen=True)
class LossSpec:
    alpha: float = 0.1
    temperature: float = 1.0
    lam: float = 0.01


@dataclass(frozen=True)
class AugmentSpec:
    name: str = "noise_dropout"
    sigma: float = 0.1
    drop_rate: float = 0.1
    image_shape: tuple[int, ...] | None = None


@dataclass(frozen=True)
class MediatorSpec:
    pool_size: int = 256
    teacher_hidden: tuple[int, ...] = (128,)
    teacher_scale: float = 2.0
    max_cosine: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    federation: FederationSpec = field(default_factory=FederationSpec)
    flow: FlowSpec = field(default_factory=FlowSpec)
    losses: LossSpec = field(default_factory=LossSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    mediator: MediatorSpec = field(default_factory=MediatorSpec)
    ablate: tuple[str, ...] = ()
    gamma: int = 0
    scorer: str = "ocnf"
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/default"

    # -- serialisation ------------------------------------------------------

    @classmethod
    def from_dict(cls, obj: Any, base_dir: Path | None = None) -> "RunConfig":
        problems: list[str] = []
        cfg = _build(cls, obj, "", problems)
        if cfg is not None:
            problems += cfg.problems(base_dir)
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
        return cls.from_dict(obj, base_dir=path.parent)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def echo(self) -> dict:
        """The configuration as reported in artifacts. The output directory and
        the worker count are left out: neither changes any result, so moving a
        run or rescheduling it does not change its reports."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("workers")
        return d

    def hash(self) -> str:
        text = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_section(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    # -- validation ---------------------------------------------------------

    def problems(self, base_dir: Path | None = None) -> list[str]:
        p: list[str] = []
        ds, enc, fed, fl = self.dataset, self.encoder, self.federation, self.flow

        def need(cond: bool, msg: str):
            if not cond:
                p.append(msg)

        need(ds.kind in DATASET_KINDS, f"dataset.kind must be one of {list(DATASET_KINDS)}, got {ds.kind!r}")
        if ds.kind == "synthetic":
            need(ds.classes >= 2, "dataset.classes must be >= 2")
            need(ds.n_per_class >= 2, "dataset.n_per_class must be >= 2")
            need(ds.dim >= 1, "dataset.dim must be >= 1")
            need(ds.separation > 0, "dataset.separation must be > 0")
        need(0.0 < ds.train_fraction < 1.0, "dataset.train_fraction must lie in (0, 1)")
        if ds.max_per_class is not None:
            need(ds.max_per_class >= 2, "dataset.max_per_class must be >= 2")
        if ds.kind == "tabular":
            need(ds.label_column is not None, "dataset.label_column is required for tabular data")
            p += _check_file("dataset.path", ds.path, base_dir)
        if ds.kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                p += _check_file(f"dataset.{key}", getattr(ds, key), base_dir)

        need(len(enc.hidden_dims) >= 1, "encoder.hidden_dims must not be empty")
        need(all(h >= 1 for h in enc.hidden_dims), "encoder.hidden_dims must be positive")
        need(enc.output_dim >= 2, "encoder.output_dim must be >= 2")
        need(enc.groups >= 1 and all(h % enc.groups == 0 for h in enc.hidden_dims if h >= 1),
             "encoder.groups must divide every hidden width")

        need(fed.rounds >= 1, "federation.rounds must be >= 1")
        need(fed.local_epochs >= 1, "federation.local_epochs must be >= 1")
        need(fed.batch_size >= 1, "federation.batch_size must be >= 1")
        need(fed.lr >= 0, "federation.lr must be >= 0")
        if fed.clients_per_round is not None:
            need(fed.clients_per_round >= 1, "federation.clients_per_round must be >= 1")
        p += _check_optimizer("federation", fed.optimizer, fed.momentum, fed.betas, fed.weight_decay)

        need(fl.layers >= 1, "flow.layers must be >= 1")
        need(len(fl.hidden) >= 1 and all(h >= 1 for h in fl.hidden), "flow.hidden must be non-empty and positive")
        need(fl.clamp > 0, "flow.clamp must be > 0")
        need(fl.epochs >= 1, "flow.epochs must be >= 1")
        need(fl.batch_size >= 1, "flow.batch_size must be >= 1")
        need(fl.lr >= 0, "flow.lr must be >= 0")
        need(fl.latent_noise >= 0, "flow.latent_noise must be >= 0")
        if fl.max_grad_norm is not None:
            need(fl.max_grad_norm > 0, "flow.max_grad_norm must be > 0")
        p += _check_optimizer("flow", fl.optimizer, fl.momentum, fl.betas, fl.weight_decay)

        need(0.0 <= self.losses.alpha <= 1.0, "losses.alpha must lie in [0, 1]")
        need(self.losses.temperature > 0, "losses.temperature must be > 0")
        need(self.losses.lam >= 0, "losses.lam must be >= 0")

        aug = self.augment
        need(aug.name in AUGMENTATIONS, f"augment.name must be one of {list(AUGMENTATIONS)}, got {aug.name!r}")
        need(aug.sigma >= 0, "augment.sigma must be >= 0")
        need(0.0 <= aug.drop_rate < 1.0, "augment.drop_rate must lie in [0, 1)")
        if aug.name == "image":
            need(aug.image_shape is not None, "augment.image_shape is required for the image policy")

        med = self.mediator
        need(med.pool_size >= 1, "mediator.pool_size must be >= 1")
        need(all(h >= 1 for h in med.teacher_hidden), "mediator.teacher_hidden must be positive")
        need(med.teacher_scale > 0, "mediator.teacher_scale must be > 0")
        need(0.0 < med.max_cosine <= 1.0, "mediator.max_cosine must lie in (0, 1]")

        bad = [a for a in self.ablate if a not in ABLATIONS]
        need(not bad, f"ablate entries must be among {list(ABLATIONS)}, got {bad}")
        need(not {"pd", "p"} <= set(self.ablate), "cannot ablate both phase-1 terms (pd and p)")
        need(self.scorer in SCORERS, f"scorer must be one of {list(SCORERS)}, got {self.scorer!r}")
        need(self.gamma >= 0, "gamma must be >= 0")
        if ds.kind == "synthetic":
            need(self.gamma < ds.classes, "gamma must be smaller than the number of clients")
            if fed.clients_per_round is not None:
                need(fed.clients_per_round <= ds.classes - self.gamma,
                     "federation.clients_per_round exceeds the number of phase-1 clients")
        need(self.workers >= 1, "workers must be >= 1")
        need(bool(self.out_dir), "out_dir must not be empty")
        return p

    # -- derived settings ---------------------------------------------------

    @property
    def alpha(self) -> float:
        if "pd" in self.ablate:
            return 1.0
        if "p" in self.ablate:
            return 0.0
        return self.losses.alpha

    @property
    def lam(self) -> float:
        return 0.0 if "reg" in self.ablate else self.losses.lam


def _check_optimizer(section, kind, momentum, betas, wd) -> list[str]:
    p = []
    if kind not in OPTIMIZERS:
        p.append(f"{section}.optimizer must be one of {list(OPTIMIZERS)}, got {kind!r}")
    if not 0.0 <= momentum < 1.0:
        p.append(f"{section}.momentum must lie in [0, 1)")
    if len(betas) != 2 or not all(0.0 <= b < 1.0 for b in betas):
        p.append(f"{section}.betas must be two values in [0, 1)")
    if wd < 0:
        p.append(f"{section}.weight_decay must be >= 0")
    return p


def _check_file(key: str, value, base_dir: Path | None) -> list[str]:
    if value is None:
        return [f"{key} is required"]
    path = resolve(value, base_dir)
    if not path.is_file():
        return [f"{key}: file not found: {path}"]
    return []


def resolve(value: str, base_dir: Path | None) -> Path:
    path = Path(value)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path


# -- typed construction -----------------------------------------------------

_SECTIONS = {
    "dataset": DatasetSpec,
    "encoder": EncoderSpec,
    "federation": FederationSpec,
    "flow": FlowSpec,
    "losses": LossSpec,
    "augment": AugmentSpec,
    "mediator": MediatorSpec,
}


def _build(cls, obj, prefix: str, problems: list[str]):
    if not isinstance(obj, dict):
        problems.append(f"{prefix or 'config'} must be an object")
        return None
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in sorted(set(obj) - set(fields)):
        problems.append(f"unknown key {prefix}{key}")
    kwargs = {}
    for name, f in fields.items():
        if name not in obj:
            continue
        value = obj[name]
        where = f"{prefix}{name}"
        if name in _SECTIONS and cls is RunConfig:
            sub = _build(_SECTIONS[name], value, where + ".", problems)
            if sub is not None:
                kwargs[name] = sub
            continue
        ok, converted = _coerce(f.type, value)
        if not ok:
            problems.append(f"{where}: expected {f.type}, got {json.dumps(value)}")
            continue
        kwargs[name] = converted
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - every field has a default
        problems.append(str(exc))
        return None


def _coerce(annotation: str, value):
    """Check a JSON value against a (string) field annotation."""
    ann = annotation.replace(" ", "")
    optional = ann.endswith("|None")
    if optional:
        if value is None:
            return True, None
        ann = ann[: -len("|None")]
    if ann == "bool":
        return isinstance(value, bool), value
    if ann == "int":
        return isinstance(value, int) and not isinstance(value, bool), value
    if ann == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return ok, float(value) if ok else None
    if ann == "str":
        return isinstance(value, str), value
    if ann.startswith("tuple["):
        if not isinstance(value, list):
            return False, None
        inner = ann[len("tuple[") : -1]
        item = inner.split(",")[0]
        if not inner.endswith("...") and len(value) != inner.count(",") + 1:
            return False, None
        converted = []
        for v in value:
            ok, c = _coerce(item, v)
            if not ok:
                return False, None
            converted.append(c)
        return True, tuple(converted)
    return False, None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
