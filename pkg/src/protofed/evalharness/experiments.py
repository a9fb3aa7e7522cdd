"""End-to-end experiments: one-vs-rest, classifier swap, new joiners, ablation.

All runners share one pipeline. Data are loaded and split, the training set
is partitioned one class per client, phase-1 clients register with the
mediator and federate an encoder, then every evaluated client fits its own
one-class scorer on the frozen encoder and scores the full test set with its
class as the target.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .. import ocnf
from .. import rng as rngs
from ..config import RunConfig, resolve
from ..datasets import (
    ClientShard,
    DataSplit,
    LabeledDataset,
    gen_synthetic_blobs,
    load_idx_images,
    load_tabular,
    partition_extreme,
    split_per_class,
)
from ..fedengine import AccessLog, Client, FederationConfig, Phase1Result, RoundRecord, run_phase1
from ..losses import Phase1Weights
from ..mediator import PrototypeRegistry, Teacher
from ..representation import AugmentPolicy, Encoder, EncoderConfig, ParamVector, unflatten
from .metrics import auroc_scores, eer_scores

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientResult:
    client_id: int
    label: int
    group: str
    auroc: float
    eer: float
    n_target: int
    n_other: int

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "label": self.label,
            "group": self.group,
            "auroc": self.auroc,
            "eer": self.eer,
            "n_target": self.n_target,
            "n_other": self.n_other,
        }


@dataclass
class ExperimentReport:
    """Per-client metrics plus population mean/std across clients."""

    experiment: str
    scorer: str
    clients: list[ClientResult]
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    flags: dict = field(default_factory=dict)
    rounds: list[dict] = field(default_factory=list)
    encoder_checksum: str = ""

    def _stat(self, key: str, group: str | None = None) -> tuple[float, float]:
        vals = np.array([getattr(c, key) for c in self.clients if group is None or c.group == group])
        if vals.size == 0:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.std())

    @property
    def mean_auroc(self) -> float:
        return self._stat("auroc")[0]

    @property
    def std_auroc(self) -> float:
        return self._stat("auroc")[1]

    @property
    def mean_eer(self) -> float:
        return self._stat("eer")[0]

    @property
    def std_eer(self) -> float:
        return self._stat("eer")[1]

    def group_mean(self, group: str, key: str = "auroc") -> float:
        return self._stat(key, group)[0]

    def groups(self) -> list[str]:
        return sorted({c.group for c in self.clients})

    def to_dict(self) -> dict:
        summary = {
            "mean_auroc": self.mean_auroc,
            "std_auroc": self.std_auroc,
            "mean_eer": self.mean_eer,
            "std_eer": self.std_eer,
        }
        by_group = {}
        for g in self.groups():
            m_a, s_a = self._stat("auroc", g)
            m_e, s_e = self._stat("eer", g)
            by_group[g] = {"mean_auroc": m_a, "std_auroc": s_a, "mean_eer": m_e, "std_eer": s_e}
        return {
            "experiment": self.experiment,
            "scorer": self.scorer,
            "config_hash": self.config_hash,
            "config": self.config,
            "flags": self.flags,
            "encoder_checksum": self.encoder_checksum,
            "rounds": self.rounds,
            "clients": [c.to_dict() for c in self.clients],
            "summary": summary,
            "groups": by_group,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# config_hash", self.config_hash])
        w.writerow(["client_id", "label", "group", "auroc", "eer", "n_target", "n_other"])
        for c in self.clients:
            w.writerow([c.client_id, c.label, c.group, repr(c.auroc), repr(c.eer), c.n_target, c.n_other])
        w.writerow(["mean", "", "", repr(self.mean_auroc), repr(self.mean_eer), "", ""])
        w.writerow(["std", "", "", repr(self.std_auroc), repr(self.std_eer), "", ""])
        return buf.getvalue()


# -- pipeline pieces --------------------------------------------------------

@dataclass
class Prepared:
    """Everything derived from the config before any training."""

    config: RunConfig
    split: DataSplit
    shards: list[ClientShard]
    encoder_config: EncoderConfig
    policy: AugmentPolicy
    registry: PrototypeRegistry
    veterans: list[int]
    joiners: list[int]


def load_dataset(cfg: RunConfig, base_dir: Path | None = None) -> DataSplit:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        data = gen_synthetic_blobs(ds.classes, ds.n_per_class, ds.dim, ds.separation, cfg.seed)
        split = split_per_class(data, ds.train_fraction, cfg.seed)
    elif ds.kind == "tabular":
        split = load_tabular(
            resolve(ds.path, base_dir), ds.label_column, ds.drop_columns, ds.train_fraction, cfg.seed
        )
    else:
        train = load_idx_images(resolve(ds.train_images, base_dir), resolve(ds.train_labels, base_dir))
        test = load_idx_images(resolve(ds.test_images, base_dir), resolve(ds.test_labels, base_dir))
        n_cls = max(train.num_classes, test.num_classes)
        split = DataSplit(
            LabeledDataset(train.features, train.labels, n_cls),
            LabeledDataset(test.features, test.labels, n_cls),
        )
    if ds.max_per_class is not None:
        split = DataSplit(
            _cap(split.train, ds.max_per_class, cfg.seed, "cap-train"),
            _cap(split.test, ds.max_per_class, cfg.seed, "cap-test"),
            split.scaler,
        )
    return split


def _cap(data: LabeledDataset, cap: int, seed: int, name: str) -> LabeledDataset:
    gen = rngs.stream(seed, name)
    keep = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) > cap:
            idx = np.sort(gen.choice(idx, size=cap, replace=False))
        keep.append(idx)
    return data.subset(np.sort(np.concatenate(keep)))


def select_joiners(num_clients: int, gamma: int, seed: int) -> list[int]:
    """Seeded choice of the ``gamma`` clients that skip phase 1."""
    if not 0 <= gamma < num_clients:
        raise ValueError(f"gamma must lie in [0, {num_clients}), got {gamma}")
    if gamma == 0:
        return []
    return sorted(int(i) for i in rngs.stream(seed, "joiners").choice(num_clients, size=gamma, replace=False))


def prepare(cfg: RunConfig, base_dir: Path | None = None, split: DataSplit | None = None) -> Prepared:
    split = split if split is not None else load_dataset(cfg, base_dir)
    k = split.train.num_classes
    shards = partition_extreme(split.train, k)
    enc_cfg = EncoderConfig(split.train.dim, cfg.encoder.hidden_dims, cfg.encoder.output_dim, cfg.encoder.groups)
    aug = cfg.augment
    policy = AugmentPolicy(
        aug.name, aug.sigma, aug.drop_rate, tuple(aug.image_shape) if aug.image_shape else None
    )
    med = cfg.mediator
    teacher = Teacher(split.train.dim, cfg.encoder.output_dim, cfg.seed, med.teacher_hidden, med.teacher_scale)
    pool = rngs.stream(cfg.seed, "pool").standard_normal((med.pool_size, split.train.dim))
    registry = PrototypeRegistry(teacher, pool, cfg.seed, med.max_cosine)
    joiners = select_joiners(k, cfg.gamma, cfg.seed)
    veterans = [s.client_id for s in shards if s.client_id not in joiners]
    return Prepared(cfg, split, shards, enc_cfg, policy, registry, veterans, joiners)


def federation_config(cfg: RunConfig, num_clients: int) -> FederationConfig:
    fed = cfg.federation
    return FederationConfig(
        num_clients=num_clients,
        rounds=fed.rounds,
        local_epochs=fed.local_epochs,
        clients_per_round=fed.clients_per_round,
        batch_size=fed.batch_size,
        optimizer=fed.optimizer,
        lr=fed.lr,
        momentum=fed.momentum,
        betas=tuple(fed.betas),
        weight_decay=fed.weight_decay,
        seed=cfg.seed,
        workers=cfg.workers,
    )


def train_global(prep: Prepared, audit: AccessLog | None = None) -> Phase1Result:
    """Register the phase-1 clients and run the federation rounds."""
    cfg = prep.config
    weights = Phase1Weights(cfg.alpha, cfg.losses.temperature)
    clients = [
        Client(s.client_id, s, prep.registry.register_client(s.client_id), prep.encoder_config, prep.policy, weights)
        for s in prep.shards
        if s.client_id in prep.veterans
    ]
    init = Encoder.init(prep.encoder_config, rngs.stream(cfg.seed, "init")).flatten()
    return run_phase1(clients, init, federation_config(cfg, len(clients)), audit)


def flow_configs(cfg: RunConfig, dim: int) -> tuple[ocnf.FlowConfig, ocnf.OCNFTrainConfig]:
    fl = cfg.flow
    return (
        ocnf.FlowConfig(dim, fl.layers, fl.hidden, fl.clamp),
        ocnf.OCNFTrainConfig(
            epochs=fl.epochs,
            lr=fl.lr,
            batch_size=fl.batch_size,
            optimizer=fl.optimizer,
            momentum=fl.momentum,
            betas=tuple(fl.betas),
            weight_decay=fl.weight_decay,
            lam=cfg.lam,
            latent_noise=fl.latent_noise,
            max_grad_norm=fl.max_grad_norm,
        ),
    )


@dataclass
class FittedScorer:
    kind: str
    score_latents: Callable[[np.ndarray], np.ndarray]
    flow: ocnf.FlowModel | None = None
    train_log: ocnf.TrainLog | None = None


def fit_scorer(kind: str, encoder: Encoder, shard: ClientShard, cfg: RunConfig, policy: AugmentPolicy) -> FittedScorer:
    """Fit one client's one-class scorer on the frozen encoder."""
    if kind == "ocnf":
        fcfg, tcfg = flow_configs(cfg, encoder.config.output_dim)
        gen = rngs.stream(cfg.seed, "flow", shard.client_id)
        model, tlog = ocnf.train_ocnf(encoder, shard.features, fcfg, tcfg, gen, policy)
        return FittedScorer(kind, lambda r: ocnf.nll(model, r), model, tlog)
    latents = encoder(shard.features)
    if kind == "gde":
        return FittedScorer(kind, ocnf.GaussianDensity(latents).score)
    if kind == "kde":
        return FittedScorer(kind, ocnf.KernelDensity(latents).score)
    raise ValueError(f"unknown scorer {kind!r}")


@dataclass
class ClientEvaluation:
    result: ClientResult
    scores: np.ndarray
    scorer: FittedScorer


def evaluate_clients(
    prep: Prepared,
    encoder: Encoder,
    kind: str,
    client_ids: Sequence[int] | None = None,
) -> list[ClientEvaluation]:
    """Fit a scorer per client and score the full test set (raw view, no augmentation)."""
    cfg = prep.config
    test = prep.split.test
    test_latents = encoder(test.features)
    ids = sorted(client_ids) if client_ids is not None else [s.client_id for s in prep.shards]
    by_id = {s.client_id: s for s in prep.shards}
    joiners = set(prep.joiners)

    def one(cid: int) -> ClientEvaluation:
        shard = by_id[cid]
        try:
            fitted = fit_scorer(kind, encoder, shard, cfg, prep.policy)
            scores = fitted.score_latents(test_latents)
        except Exception as exc:
            raise RuntimeError(f"client {cid}: {exc}") from exc
        target = test.labels == shard.label
        res = ClientResult(
            cid,
            shard.label,
            "new" if cid in joiners else "veteran",
            auroc_scores(scores[target], scores[~target]),
            eer_scores(scores[target], scores[~target]),
            int(target.sum()),
            int((~target).sum()),
        )
        return ClientEvaluation(res, scores, fitted)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(one, ids))
    return [one(cid) for cid in ids]


@dataclass
class RunOutcome:
    """A finished run: report plus the models needed to write checkpoints."""

    report: ExperimentReport
    theta: ParamVector
    evaluations: list[ClientEvaluation]
    prepared: Prepared


def _report(name: str, prep: Prepared, phase1: Phase1Result, evals, kind: str) -> ExperimentReport:
    cfg = prep.config
    flags = {
        "use_L_pd": "pd" not in cfg.ablate,
        "use_L_p": "p" not in cfg.ablate,
        "use_L_reg": "reg" not in cfg.ablate,
        "alpha": cfg.alpha,
        "lambda": cfg.lam,
        "gamma": cfg.gamma,
        "joiners": list(prep.joiners),
    }
    return ExperimentReport(
        experiment=name,
        scorer=kind,
        clients=[e.result for e in evals],
        config=cfg.echo(),
        config_hash=cfg.hash(),
        flags=flags,
        rounds=[r.to_dict() for r in phase1.records],
        encoder_checksum=phase1.params.checksum(),
    )


def execute(
    cfg: RunConfig,
    name: str = "one_vs_rest",
    base_dir: Path | None = None,
    split: DataSplit | None = None,
    audit: AccessLog | None = None,
) -> RunOutcome:
    prep = prepare(cfg, base_dir, split)
    phase1 = train_global(prep, audit)
    encoder = unflatten(phase1.params, prep.encoder_config)
    evals = evaluate_clients(prep, encoder, cfg.scorer)
    return RunOutcome(_report(name, prep, phase1, evals, cfg.scorer), phase1.params, evals, prep)


def run_one_vs_rest(cfg: RunConfig, **kw) -> ExperimentReport:
    """Every client federates, then scores the test set with its class as target."""
    return execute(cfg.replace(gamma=0), "one_vs_rest", **kw).report


def run_scalability(cfg: RunConfig, gamma: int, **kw) -> ExperimentReport:
    """``gamma`` seeded clients skip phase 1 and only fit their local scorer."""
    k = cfg.dataset.classes if cfg.dataset.kind == "synthetic" else None
    if k is not None and not 0 <= gamma < k:
        raise ValueError(f"gamma must lie in [0, {k}), got {gamma}")
    return execute(cfg.replace(gamma=gamma), "scalability", **kw).report


def run_ablation(
    cfg: RunConfig, use_L_pd: bool = True, use_L_p: bool = True, use_L_reg: bool = True, **kw
) -> ExperimentReport:
    """Disabling L_pd sets alpha=1, disabling L_p sets alpha=0, disabling L_reg sets lambda=0."""
    return execute(cfg.replace(ablate=_ablate_tuple(use_L_pd, use_L_p, use_L_reg)), "ablation", **kw).report


def _ablate_tuple(use_L_pd: bool, use_L_p: bool, use_L_reg: bool) -> tuple[str, ...]:
    if not (use_L_pd or use_L_p):
        raise ValueError("at least one phase-1 term (L_pd or L_p) must stay enabled")
    return tuple(name for name, on in (("pd", use_L_pd), ("p", use_L_p), ("reg", use_L_reg)) if not on)


def run_ablation_sweep(
    cfg: RunConfig, variants: Sequence[Mapping], base_dir: Path | None = None
) -> list[ExperimentReport]:
    """Several ablation variants, each giving the same report as ``run_ablation``.

    A variant maps any of ``use_L_pd``, ``use_L_p``, ``use_L_reg`` (default
    True) and ``scorer`` to values. Phase 1 depends only on alpha, so it runs
    once per distinct alpha and is shared by every variant using it.
    """
    trained: dict[float, tuple[Prepared, Phase1Result]] = {}
    reports = []
    for v in variants:
        unknown = set(v) - {"use_L_pd", "use_L_p", "use_L_reg", "scorer"}
        if unknown:
            raise ValueError(f"unknown ablation keys {sorted(unknown)}")
        ablate = _ablate_tuple(v.get("use_L_pd", True), v.get("use_L_p", True), v.get("use_L_reg", True))
        sub = cfg.replace(ablate=ablate, scorer=v.get("scorer", cfg.scorer))
        if sub.alpha not in trained:
            prep = prepare(sub, base_dir)
            trained[sub.alpha] = (prep, train_global(prep))
        prep, phase1 = trained[sub.alpha]
        prep = Prepared(**{**prep.__dict__, "config": sub})
        encoder = unflatten(phase1.params, prep.encoder_config)
        evals = evaluate_clients(prep, encoder, sub.scorer)
        reports.append(_report("ablation", prep, phase1, evals, sub.scorer))
    return reports


def run_classifier_swap(
    cfg: RunConfig, scorers: Sequence[str] = ("ocnf", "gde", "kde"), base_dir: Path | None = None
) -> dict[str, ExperimentReport]:
    """One federated encoder, several scorers: only the per-client scorer differs."""
    prep = prepare(cfg.replace(gamma=0), base_dir)
    phase1 = train_global(prep)
    encoder = unflatten(phase1.params, prep.encoder_config)
    out = {}
    for kind in scorers:
        evals = evaluate_clients(prep, encoder, kind)
        sub = prep.config.replace(scorer=kind)
        out[kind] = _report("classifier_swap", Prepared(**{**prep.__dict__, "config": sub}), phase1, evals, kind)
    return out


__all__ = [
    "ClientResult",
    "ExperimentReport",
    "Prepared",
    "RoundRecord",
    "RunOutcome",
    "evaluate_clients",
    "execute",
    "fit_scorer",
    "load_dataset",
    "prepare",
    "run_ablation",
    "run_ablation_sweep",
    "run_classifier_swap",
    "run_one_vs_rest",
    "run_scalability",
    "select_joiners",
    "train_global",
]
