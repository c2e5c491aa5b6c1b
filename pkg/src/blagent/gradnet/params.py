"""Named parameter collections: initialization, SGD steps, checkpoints.

Checkpoints are a small self-describing binary format: a magic/version
header, then per-tensor records (name, shape, little-endian float64
payload). Round-tripping is bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError, MissingCheckpoint
from .tensor import Tensor, leaf

_MAGIC = b"BLGN"
_VERSION = 1

ROLES = ("weight", "bias", "gain", "embedding")


@dataclass
class ParamSpec:
    """Declares one parameter tensor before values exist."""

    name: str
    shape: tuple
    role: str = "weight"

    def __post_init__(self):
        if self.role not in ROLES:
            raise InputError(f"unknown parameter role {self.role!r}")
        self.shape = tuple(int(s) for s in self.shape)


def _glorot(shape, rng):
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        # conv kernels: (out_ch, in_ch, kh, kw)
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        fan_in = fan_out = int(np.prod(shape))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_value(spec: ParamSpec, rng) -> np.ndarray:
    if spec.role == "weight":
        return _glorot(spec.shape, rng)
    if spec.role == "bias":
        return np.zeros(spec.shape)
    if spec.role == "gain":
        return np.ones(spec.shape)
    # embedding: small gaussian, matches the class-token convention
    return rng.normal(0.0, 0.02, size=spec.shape)


class ParamStore:
    """Ordered mapping name -> leaf Tensor, with bulk gradient utilities."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    @classmethod
    def build(cls, specs, seed: int) -> "ParamStore":
        rng = np.random.default_rng(seed)
        store = cls()
        for spec in specs:
            store.add(spec.name, init_value(spec, rng))
        return store

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise InputError(f"duplicate parameter {name!r}")
        t = leaf(np.asarray(value, dtype=np.float64), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def names(self):
        return list(self._params)

    def n_scalars(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value)).copy()
            for name, t in self._params.items()
        }

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return float(np.sqrt(total))

    def sgd_ascent(self, direction: dict[str, np.ndarray], lr: float, clip_norm=None):
        """phi += lr * direction, with optional global-norm clipping."""
        if clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in direction.values()))
            if total > clip_norm and total > 0.0:
                scale = clip_norm / total
                direction = {k: g * scale for k, g in direction.items()}
        for name, g in direction.items():
            self._params[name].value += lr * g

    def flatten(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.value.ravel() for t in self._params.values()])

    def load_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_scalars():
            raise InputError(f"flat vector size {vec.size} != {self.n_scalars()}")
        pos = 0
        for t in self._params.values():
            n = t.value.size
            t.value = vec[pos : pos + n].reshape(t.value.shape).copy()
            pos += n

    # -- checkpoint IO -----------------------------------------------------

    def dump_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<HI", _VERSION, len(self._params)))
        for name, t in self._params.items():
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", t.value.ndim))
            for s in t.value.shape:
                buf.write(struct.pack("<Q", s))
            buf.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path, config: dict | None = None):
        with open(path, "wb") as fh:
            fh.write(self.dump_bytes())
        if config is not None:
            with open(str(path) + ".json", "w") as fh:
                json.dump(config, fh, indent=2, sort_keys=True)
                fh.write("\n")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        buf = io.BytesIO(blob)
        if buf.read(4) != _MAGIC:
            raise InputError("not a parameter checkpoint (bad magic)")
        version, count = struct.unpack("<HI", buf.read(6))
        if version != _VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf.read(2))
            name = buf.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape)
            store.add(name, data.astype(np.float64))
        return store

    @classmethod
    def load(cls, path) -> "ParamStore":
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except FileNotFoundError as exc:
            raise MissingCheckpoint(str(path)) from exc
        return cls.from_bytes(blob)


def load_sidecar(path) -> dict:
    """Read the JSON config written next to a checkpoint."""
    try:
        with open(str(path) + ".json") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise MissingCheckpoint(f"{path}.json") from exc
