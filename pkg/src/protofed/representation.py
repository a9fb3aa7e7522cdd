"""Client encoder, two-view augmentation and the flat parameter codec."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.ndimage import gaussian_filter

from .diffcore import DimensionError, Tensor, group_norm, linear, relu, tensor


# -- parameter vectors ------------------------------------------------------

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class LayoutError(ValueError):
    """Two parameter layouts that must agree do not."""


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if values.size != expected:
            raise LayoutError(f"layout describes {expected} values, got {values.size}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def arrays(self) -> dict[str, np.ndarray]:
        """Unpack into fresh, writable named arrays."""
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[offset : offset + n].reshape(shape).copy()
            offset += n
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(_layout_json(self.layout)).encode())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()


def pack(arrays: Mapping[str, np.ndarray]) -> ParamVector:
    """Flatten named arrays in their mapping order."""
    layout = tuple((name, tuple(int(d) for d in np.shape(a))) for name, a in arrays.items())
    if not arrays:
        return ParamVector(np.zeros(0), layout)
    values = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays.values()])
    return ParamVector(values, layout)


def _layout_json(layout: Layout) -> list:
    return [[name, list(shape)] for name, shape in layout]


def _layout_from_json(obj) -> Layout:
    return tuple((str(name), tuple(int(d) for d in shape)) for name, shape in obj)


# -- checkpoint files -------------------------------------------------------

MAGIC = b"PFEDPARM"
FORMAT_VERSION = 1


def save_params(path, pv: ParamVector, meta: Mapping | None = None) -> None:
    """Write ``pv`` as: magic, u32 version, u32 header length, JSON header, <f8 values."""
    header = json.dumps(
        {"layout": _layout_json(pv.layout), "count": len(pv), "meta": dict(meta or {})},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(pv.values.astype("<f8").tobytes())


def load_params(path) -> tuple[ParamVector, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise LayoutError(f"{path}: not a parameter file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise LayoutError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    body = raw[start + hlen :]
    if len(body) != 8 * header["count"]:
        raise LayoutError(f"{path}: expected {header['count']} values, found {len(body) / 8:g}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ParamVector(values, _layout_from_json(header["layout"])), header["meta"]


# -- encoder ----------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    output_dim: int = 32
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.output_dim, self.groups, *self.hidden_dims)
        if any(int(d) <= 0 for d in dims):
            raise ValueError("encoder dimensions and group count must be positive")
        for h in self.hidden_dims:
            if h % self.groups:
                raise ValueError(f"groups={self.groups} does not divide hidden width {h}")

    def layout(self) -> Layout:
        shapes = []
        widths = (self.input_dim, *self.hidden_dims)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes += [(f"fc{i}.w", (a, b)), (f"fc{i}.b", (b,)), (f"gn{i}.g", (b,)), (f"gn{i}.b", (b,))]
        i = len(self.hidden_dims)
        shapes += [(f"fc{i}.w", (widths[-1], self.output_dim)), (f"fc{i}.b", (self.output_dim,))]
        return tuple(shapes)


@dataclass
class Encoder:
    config: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "Encoder":
        params = {}
        for name, shape in config.layout():
            if name.endswith(".w"):
                params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            elif name.startswith("gn") and name.endswith(".g"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        return cls(config, params)

    def flatten(self) -> ParamVector:
        return flatten(self)

    def __call__(self, x) -> np.ndarray:
        """Encode without recording gradients; returns a plain array."""
        return forward(self.config, self.params, x).numpy()


def forward(config: EncoderConfig, params: Mapping, x) -> Tensor:
    """Encoder forward pass on a (batch, input_dim) or (input_dim,) input.

    ``params`` may hold arrays or tape-watched tensors; the result is
    differentiable with respect to the latter.
    """
    x = tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise DimensionError(f"encoder expects inputs of width {config.input_dim}, got {x.shape}")
    h = x
    for i in range(len(config.hidden_dims)):
        h = linear(h, params[f"fc{i}.w"], params[f"fc{i}.b"])
        h = group_norm(h, config.groups, params[f"gn{i}.g"], params[f"gn{i}.b"])
        h = relu(h)
    i = len(config.hidden_dims)
    r = linear(h, params[f"fc{i}.w"], params[f"fc{i}.b"])
    return r.reshape(-1) if single else r


def encode(enc: Encoder, x) -> Tensor:
    return forward(enc.config, enc.params, x)


def flatten(enc: Encoder) -> ParamVector:
    return pack({name: enc.params[name] for name, _ in enc.config.layout()})


def unflatten(pv: ParamVector, config: EncoderConfig) -> Encoder:
    if tuple(pv.layout) != config.layout():
        raise LayoutError("parameter layout does not match the encoder configuration")
    return Encoder(config, pv.arrays())


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    """Two-view augmentation policy.

    ``identity`` returns the sample unchanged; ``noise`` adds isotropic
    gaussian noise; ``noise_dropout`` additionally zeroes each feature with
    probability ``drop_rate``; ``image`` applies random shift-crop,
    horizontal flip, gaussian blur and brightness/contrast jitter to a
    flattened ``image_shape`` sample.
    """

    name: str = "noise_dropout"
    sigma: float = 0.1
    drop_rate: float = 0.1
    image_shape: tuple[int, int] | None = None
    max_shift: int = 2
    blur_sigma: float = 1.0
    jitter: float = 0.2

    KNOWN = ("identity", "noise", "noise_dropout", "image")

    def __post_init__(self):
        if self.name not in self.KNOWN:
            raise ValueError(f"unknown augmentation policy {self.name!r}; known: {self.KNOWN}")
        if self.sigma < 0 or not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("sigma must be >= 0 and drop_rate in [0, 1)")
        if self.name == "image" and self.image_shape is None:
            raise ValueError("image policy needs image_shape")


@dataclass(frozen=True)
class ViewPair:
    x: np.ndarray
    x_hat: np.ndarray


def augment(samples: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of each row of ``samples`` (or of a single sample)."""
    x = np.asarray(samples, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if policy.name == "identity":
        out = x.copy()
    elif policy.name in ("noise", "noise_dropout"):
        out = x + policy.sigma * rng.standard_normal(x.shape) if policy.sigma else x.copy()
        if policy.name == "noise_dropout" and policy.drop_rate:
            out = out * (rng.random(x.shape) >= policy.drop_rate)
    else:
        out = _augment_images(x, policy, rng)
    return out[0] if single else out


def _augment_images(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    h, w = policy.image_shape
    if x.shape[1] != h * w:
        raise DimensionError(f"image policy expects {h * w} features, got {x.shape[1]}")
    out = np.empty_like(x)
    s = policy.max_shift
    for i, row in enumerate(x):
        img = row.reshape(h, w)
        padded = np.pad(img, s, mode="edge")
        dy, dx = rng.integers(0, 2 * s + 1, size=2)
        img = padded[dy : dy + h, dx : dx + w]
        if rng.random() < 0.5:
            img = img[:, ::-1]
        if rng.random() < 0.5:
            img = gaussian_filter(img, sigma=rng.uniform(0.1, policy.blur_sigma))
        contrast = 1.0 + rng.uniform(-policy.jitter, policy.jitter)
        bright = rng.uniform(-policy.jitter, policy.jitter)
        img = np.clip((img - img.mean()) * contrast + img.mean() + bright, 0.0, 1.0)
        out[i] = img.reshape(-1)
    return out


def augment_pair(sample: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> ViewPair:
    """Two independent augmentations of the same sample (or batch)."""
    return ViewPair(augment(sample, policy, rng), augment(sample, policy, rng))
