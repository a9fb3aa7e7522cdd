"""Round loop of the representation phase: broadcast, local training, FedAvg."""

from __future__ import annotations

import contextvars
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngs
from .datasets import ClientShard
from .diffcore import GradientTape, OptimizerState, Tensor, backward, step
from .losses import Phase1Weights, phase1_loss
from .mediator import Prototype
from .representation import AugmentPolicy, EncoderConfig, LayoutError, ParamVector, augment, forward, pack

log = logging.getLogger(__name__)


class ClientTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    rounds: int
    local_epochs: int = 1
    clients_per_round: int | None = None
    batch_size: int = 16
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.0
    betas: tuple[float, float] = (0.94, 0.98)
    weight_decay: float = 0.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("local_epochs, batch_size and workers must be positive")
        if self.clients_per_round is not None and not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("clients_per_round must lie in [1, num_clients]")

    @property
    def per_round(self) -> int:
        return self.num_clients if self.clients_per_round is None else self.clients_per_round

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            kind=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            betas=tuple(self.betas),
            weight_decay=self.weight_decay,
        )


@dataclass(frozen=True)
class Client:
    """Everything a client's local training may touch."""

    client_id: int
    shard: ClientShard
    prototype: Prototype | None
    encoder_config: EncoderConfig
    policy: AugmentPolicy = AugmentPolicy()
    weights: Phase1Weights = Phase1Weights()


@dataclass(frozen=True)
class ClientUpdate:
    params: ParamVector
    count: int
    loss: float
    initial_loss: float


@dataclass(frozen=True)
class RoundRecord:
    round: int
    participants: tuple[int, ...]
    counts: tuple[int, ...]
    losses: tuple[float, ...]
    checksum: str

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "participants": list(self.participants),
            "counts": list(self.counts),
            "losses": list(self.losses),
            "checksum": self.checksum,
        }


@dataclass
class Phase1Result:
    params: ParamVector
    records: list[RoundRecord] = field(default_factory=list)


# -- access audit -----------------------------------------------------------

_reader = contextvars.ContextVar("protofed_reader", default=None)


class AccessLog:
    """Thread-safe record of (reader, resource, owner) reads."""

    def __init__(self):
        self.events: list[tuple[int | None, str, object]] = []
        self._lock = threading.Lock()

    def record(self, resource: str, owner) -> None:
        with self._lock:
            self.events.append((_reader.get(), resource, owner))

    def violations(self) -> list[tuple]:
        bad = []
        for reader, resource, owner in self.events:
            if resource in ("shard", "prototype") and reader != owner:
                bad.append((reader, resource, owner))
            elif resource == "snapshot" and reader is None:
                bad.append((reader, resource, owner))
        return bad


class AuditedShard:
    """Shard proxy that logs every read of its samples."""

    def __init__(self, shard: ClientShard, audit: AccessLog):
        self._shard = shard
        self._audit = audit
        self.client_id = shard.client_id
        self.label = shard.label

    @property
    def features(self) -> np.ndarray:
        self._audit.record("shard", self._shard.client_id)
        return self._shard.features

    @property
    def sample_ids(self) -> np.ndarray:
        self._audit.record("shard", self._shard.client_id)
        return self._shard.sample_ids

    def __len__(self) -> int:
        return len(self._shard)


class AuditedPrototype:
    def __init__(self, proto: Prototype, audit: AccessLog):
        self._proto = proto
        self._audit = audit
        self.client_id = proto.client_id

    @property
    def vector(self) -> np.ndarray:
        self._audit.record("prototype", self._proto.client_id)
        return self._proto.vector


class AuditedSnapshot:
    def __init__(self, snapshot: ParamVector, round_idx: int, audit: AccessLog):
        self._snapshot = snapshot
        self._audit = audit
        self.round = round_idx
        self.layout = snapshot.layout

    def arrays(self) -> dict[str, np.ndarray]:
        self._audit.record("snapshot", self.round)
        return self._snapshot.arrays()


def audited(clients: Sequence[Client], audit: AccessLog) -> list[Client]:
    return [
        Client(
            c.client_id,
            AuditedShard(c.shard, audit),
            AuditedPrototype(c.prototype, audit) if c.prototype is not None else None,
            c.encoder_config,
            c.policy,
            c.weights,
        )
        for c in clients
    ]


# -- aggregation ------------------------------------------------------------

def fedavg(params: Sequence[ParamVector], counts: Sequence[int]) -> ParamVector:
    """Sample-count weighted mean of client parameter vectors.

    Contributions are summed in ascending order of the (weight, values)
    pair so the result does not depend on the order clients are listed in.
    """
    if len(params) == 0 or len(params) != len(counts):
        raise ValueError("fedavg needs equally long, non-empty params and counts")
    if any(int(c) <= 0 for c in counts):
        raise ValueError("sample counts must be positive")
    layout = params[0].layout
    if any(p.layout != layout for p in params[1:]):
        raise LayoutError("all parameter vectors must share one layout")
    if len(params) == 1:
        return params[0]
    total = float(sum(int(c) for c in counts))
    items = sorted(
        zip((int(c) for c in counts), params),
        key=lambda cp: (cp[0], cp[1].values.tobytes()),
    )
    acc = np.zeros_like(params[0].values)
    for c, p in items:
        acc = acc + (c / total) * p.values
    return ParamVector(acc, layout)


# -- local training ---------------------------------------------------------

def client_training(client: Client, snapshot, config: FederationConfig, round_idx: int = 0) -> ClientUpdate:
    """Local phase-1 training of one client, starting from the broadcast snapshot."""
    token = _reader.set(client.client_id)
    try:
        if client.prototype is None:
            raise ClientTrainingError(f"client {client.client_id} is not registered with the mediator")
        n = len(client.shard)
        if n == 0:
            raise ClientTrainingError(f"client {client.client_id} has an empty shard")
        features = client.shard.features
        prototype = client.prototype.vector
        params = snapshot.arrays()
        layout = snapshot.layout
        cfg = client.encoder_config
        gen = rngs.stream(config.seed, "augment", client.client_id, round_idx)
        opt = config.optimizer_state()
        initial = None
        epoch_losses: list[float] = []
        for _ in range(config.local_epochs):
            order = gen.permutation(n)
            epoch_losses = []
            for start in range(0, n, config.batch_size):
                x = features[order[start : start + config.batch_size]]
                x1 = augment(x, client.policy, gen)
                x2 = augment(x, client.policy, gen)
                with GradientTape() as tape:
                    leaves = {k: tape.watch(Tensor(v)) for k, v in params.items()}
                    r1 = forward(cfg, leaves, x1)
                    r2 = forward(cfg, leaves, x2)
                    loss = phase1_loss(r1, r2, prototype, client.weights)
                g = backward(tape, loss)
                value = loss.item()
                if initial is None:
                    initial = value
                epoch_losses.append(value)
                params = step(opt, params, {k: g[leaves[k]] for k in params})
        updated = pack({name: params[name] for name, _ in layout})
        return ClientUpdate(updated, n, float(np.mean(epoch_losses)), float(initial))
    finally:
        _reader.reset(token)


def select_participants(config: FederationConfig, client_ids: Sequence[int], round_idx: int) -> list[int]:
    ids = sorted(client_ids)
    k = min(config.per_round, len(ids))
    if k == len(ids):
        return ids
    gen = rngs.stream(config.seed, "select", round_idx)
    return sorted(int(i) for i in gen.choice(ids, size=k, replace=False))


def run_phase1(
    clients: Sequence[Client],
    init: ParamVector,
    config: FederationConfig,
    audit: AccessLog | None = None,
) -> Phase1Result:
    """Run ``config.rounds`` rounds of broadcast / local training / FedAvg."""
    if not clients:
        raise ValueError("run_phase1 needs at least one client")
    unregistered = [c.client_id for c in clients if c.prototype is None]
    if unregistered:
        raise ClientTrainingError(f"clients not registered with the mediator: {unregistered}")
    if audit is not None:
        clients = audited(clients, audit)
    by_id = {c.client_id: c for c in clients}
    theta = init
    records = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for t in range(config.rounds):
            chosen = select_participants(config, list(by_id), t)
            snapshot = theta if audit is None else AuditedSnapshot(theta, t, audit)

            def train(cid, snapshot=snapshot, t=t):
                try:
                    return client_training(by_id[cid], snapshot, config, t)
                except Exception as exc:
                    raise ClientTrainingError(f"round {t}, client {cid}: {exc}") from exc

            updates = list(pool.map(train, chosen)) if pool else [train(cid) for cid in chosen]
            theta = fedavg([u.params for u in updates], [u.count for u in updates])
            rec = RoundRecord(
                t,
                tuple(chosen),
                tuple(u.count for u in updates),
                tuple(u.loss for u in updates),
                theta.checksum(),
            )
            records.append(rec)
            log.info("round %d: mean loss %.5f", t, float(np.mean(rec.losses)))
    finally:
        if pool:
            pool.shutdown()
    return Phase1Result(theta, records)
