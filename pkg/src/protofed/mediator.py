"""Central mediator: frozen teacher, off-the-shelf pool and prototype issuance."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import rng as rngs
from .representation import pack, save_params, load_params

log = logging.getLogger(__name__)


class CapacityError(RuntimeError):
    """The off-the-shelf pool has no usable sample left."""


class Teacher:
    """Frozen random tanh MLP without biases, so F(-x) = -F(x).

    Weights are drawn once from ``seed`` and made read-only.
    """

    def __init__(self, input_dim: int, output_dim: int, seed: int, hidden: tuple[int, ...] = (128,), scale: float = 2.0):
        gen = rngs.stream(seed, "teacher")
        widths = (input_dim, *hidden, output_dim)
        self.weights = []
        for a, b in zip(widths[:-1], widths[1:]):
            w = gen.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))
            w.flags.writeable = False
            self.weights.append(w)
        self.seed = seed
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.scale = scale

    def __call__(self, x) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.shape[1] != self.input_dim:
            raise ValueError(f"teacher expects width {self.input_dim}, got {h.shape[1]}")
        for w in self.weights[:-1]:
            h = np.tanh(h @ w)
        out = self.scale * (h @ self.weights[-1])
        # Normalise every output to norm scale*sqrt(D) so prototypes share a temperature regime.
        out = out / np.linalg.norm(out, axis=1, keepdims=True) * self.scale * np.sqrt(self.output_dim)
        return out[0] if np.ndim(x) == 1 else out


@dataclass(frozen=True)
class Prototype:
    client_id: int
    vector: np.ndarray
    teacher_seed: int
    pool_index: int


class PrototypeRegistry:
    """Issues one prototype per client from distinct pool samples.

    Registration is serialised with a lock. A candidate pool sample is
    skipped when its embedding has |cosine| >= ``max_cosine`` with an
    already issued prototype; the pool is walked in a seeded order.
    """

    def __init__(self, teacher: Teacher, pool: np.ndarray, seed: int, max_cosine: float = 0.5):
        self.teacher = teacher
        pool = np.array(pool, dtype=np.float64)
        pool.flags.writeable = False
        self.pool = pool
        self.max_cosine = max_cosine
        self._order = list(rngs.stream(seed, "pool-order").permutation(len(pool)))
        self._cursor = 0
        self._used: set[int] = set()
        self._issued: dict[int, Prototype] = {}
        self._lock = threading.Lock()

    @classmethod
    def build(cls, input_dim: int, output_dim: int, seed: int, pool_size: int = 256, **teacher_kw) -> "PrototypeRegistry":
        teacher = Teacher(input_dim, output_dim, seed, **teacher_kw)
        pool = rngs.stream(seed, "pool").standard_normal((pool_size, input_dim))
        return cls(teacher, pool, seed)

    @property
    def prototypes(self):
        return MappingProxyType(self._issued)

    def register_client(self, client_id: int) -> Prototype:
        with self._lock:
            if client_id in self._issued:
                return self._issued[client_id]
            issued = [p.vector for p in self._issued.values()]
            while self._cursor < len(self._order):
                idx = int(self._order[self._cursor])
                self._cursor += 1
                v = self.teacher(self.pool[idx])
                if all(abs(_cos(v, u)) < self.max_cosine for u in issued):
                    v.flags.writeable = False
                    proto = Prototype(client_id, v, self.teacher.seed, idx)
                    self._used.add(idx)
                    self._issued[client_id] = proto
                    return proto
                log.debug("pool sample %d rejected for client %d (too similar)", idx, client_id)
            raise CapacityError(f"pool exhausted while registering client {client_id}")


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def teacher_affinity(samples, teacher: Teacher, pool) -> float:
    """Mean cosine similarity between teacher embeddings of ``samples`` and of the pool."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValueError("teacher_affinity needs a non-empty sample set")
    a = _unit_rows(np.atleast_2d(teacher(samples)))
    s = _unit_rows(np.atleast_2d(teacher(pool)))
    # mean_{i,j} <a_i, s_j> = <mean_i a_i, mean_j s_j>
    return float(np.clip(a.mean(axis=0) @ s.mean(axis=0), -1.0, 1.0))


def export_prototype(path, proto: Prototype, meta: dict | None = None) -> None:
    info = {
        "kind": "prototype",
        "client_id": proto.client_id,
        "teacher_seed": proto.teacher_seed,
        "dim": int(proto.vector.size),
        "pool_index": proto.pool_index,
    }
    info.update(meta or {})
    save_params(path, pack({"prototype": proto.vector}), info)


def import_prototype(path) -> tuple[Prototype, dict]:
    pv, meta = load_params(path)
    if meta.get("kind") != "prototype":
        raise ValueError(f"{path}: not a prototype file ({json.dumps(meta.get('kind'))})")
    v = pv.arrays()["prototype"]
    v.flags.writeable = False
    return Prototype(int(meta["client_id"]), v, int(meta["teacher_seed"]), int(meta["pool_index"])), meta
