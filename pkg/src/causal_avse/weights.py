"""Named tensor storage, seeded initialisation and the ``.rtw`` file format.

File layout (all integers little-endian)::

    b"RTWL" | u32 version | u32 count |
    count x ( u16 name_len | utf-8 name | u8 rank | rank x u32 extent | f32 data )
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

__all__ = [
    "ParamSpec",
    "WeightStore",
    "WeightError",
    "WeightFileError",
    "init_store",
    "save",
    "load",
    "MAGIC",
    "VERSION",
]

MAGIC = b"RTWL"
VERSION = 1

# Parameter kinds and how they are initialised.
WEIGHT = "weight"  # uniform in +-sqrt(1/fan_in), fan_in = prod(shape[1:])
WEIGHT_T = "weight_t"  # transposed conv C_in x C_out x k, fan_in = C_out * k
BIAS = "bias"  # zeros
SCALE = "scale"  # ones (norm gamma)
SHIFT = "shift"  # zeros (norm beta)
RUNNING_MEAN = "running_mean"  # zeros, not learnable
RUNNING_VAR = "running_var"  # ones, not learnable

LEARNABLE = {WEIGHT, WEIGHT_T, BIAS, SCALE, SHIFT}


class WeightError(ValueError):
    """A weight store does not match the model it is used with."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class WeightFileError(ValueError):
    """A ``.rtw`` file is malformed."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str = WEIGHT

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))

    @property
    def learnable(self) -> bool:
        return self.kind in LEARNABLE

    @property
    def fan_in(self) -> int:
        if self.kind == WEIGHT_T:
            return int(math.prod(self.shape[1:]))
        return int(math.prod(self.shape[1:])) if len(self.shape) > 1 else int(self.shape[0])


class WeightStore(Mapping[str, np.ndarray]):
    """Ordered, read-only mapping of parameter names to float32 arrays."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._tensors: dict[str, np.ndarray] = {}
        for name, value in items:
            arr = np.ascontiguousarray(value, dtype=np.float32)
            arr.flags.writeable = False
            self._tensors[name] = arr
        self._f64: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise WeightError(f"missing weight tensor {name!r}", name) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def f64(self, name: str) -> np.ndarray:
        """float64 copy of a tensor, cached; kernels accumulate in float64."""
        cached = self._f64.get(name)
        if cached is None:
            cached = self[name].astype(np.float64)
            cached.flags.writeable = False
            self._f64[name] = cached
        return cached

    def replace(self, **tensors: np.ndarray) -> "WeightStore":
        merged = dict(self._tensors)
        for name, value in tensors.items():
            if name not in merged:
                raise WeightError(f"unknown weight tensor {name!r}", name)
            merged[name] = value
        return WeightStore(merged)

    def without(self, name: str) -> "WeightStore":
        return WeightStore((k, v) for k, v in self._tensors.items() if k != name)

    def validate(self, specs: Iterable[ParamSpec]) -> None:
        """Raise ``WeightError`` naming the first missing or mis-shaped tensor."""
        for spec in specs:
            if spec.name not in self._tensors:
                raise WeightError(f"missing weight tensor {spec.name!r}", spec.name)
            got = self._tensors[spec.name].shape
            if got != spec.shape:
                raise WeightError(
                    f"weight tensor {spec.name!r} has shape {got}, expected {spec.shape}", spec.name)

    def equal(self, other: "WeightStore") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)


def init_store(specs: Iterable[ParamSpec], seed: int) -> WeightStore:
    """Deterministic initialisation: weights uniform in +-sqrt(1/fan_in), biases and
    shifts zero, scales one, batch-norm statistics (0, 1)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for spec in specs:
        if spec.kind in (WEIGHT, WEIGHT_T):
            bound = math.sqrt(1.0 / spec.fan_in)
            value = rng.uniform(-bound, bound, size=spec.shape).astype(np.float32)
        elif spec.kind in (SCALE, RUNNING_VAR):
            value = np.ones(spec.shape, np.float32)
        elif spec.kind in (BIAS, SHIFT, RUNNING_MEAN):
            value = np.zeros(spec.shape, np.float32)
        else:
            raise ValueError(f"unknown parameter kind {spec.kind!r}")
        tensors[spec.name] = value
    return WeightStore(tensors)


def dumps(store: WeightStore) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(store)))
    for name, arr in store.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightFileError(f"tensor {name!r} cannot be represented")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> WeightStore:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFileError(f"truncated file at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightFileError("bad magic: not an RTWL weight file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version}")
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"tensor name is not UTF-8 at byte {pos}") from exc
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(math.prod(shape))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        tensors.append((name, arr.astype(np.float32)))
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after the last tensor")
    return WeightStore(tensors)


def save(store: WeightStore, path: str | Path) -> None:
    Path(path).write_bytes(dumps(store))


def load(path: str | Path) -> WeightStore:
    return loads(Path(path).read_bytes())
