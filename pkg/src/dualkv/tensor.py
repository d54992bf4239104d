"""Dense tensor container with precision emulation and a reproducible RNG.

Everything downstream (kernels, oracle, toy model) moves data through the
small `Tensor` wrapper defined here.  Three precisions are supported:

* ``F64``     -- float64 storage and compute (oracle grade).
* ``F32``     -- float32 storage and compute.
* ``BF16EMU`` -- bfloat16 emulated on top of float32 storage: every stored
  value is a float32 whose low 16 mantissa-pattern bits are zero after
  round-to-nearest-even truncation to 8 exponent / 7 mantissa bits.  Compute
  happens in float32; casts back to the bf16 grid are explicit.

Tensors are immutable after construction (the underlying buffer is marked
read-only), so they are safe to share across threads.  Kernel-side gradient
accumulators are plain writable numpy arrays, never `Tensor`s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Precision",
    "Tensor",
    "bf16_round",
    "bf16_ulp",
    "allclose",
    "max_abs_diff",
    "seeded_fill",
    "flat_to_multi",
    "multi_to_flat",
]


def bf16_round(x):
    """Round float32 value(s) to the nearest bfloat16-representable value.

    Round-to-nearest-even on the float32 bit pattern: keep the top 16 bits
    (1 sign, 8 exponent, 7 mantissa), rounding ties to even.  NaN maps to
    NaN, +/-inf map to themselves, and values beyond the bf16 normal range
    overflow to +/-inf.  Idempotent.  Input of any float dtype is first
    converted to float32.

    Accepts scalars or arrays; returns the same kind (python float for
    scalar input, float32 ndarray otherwise).
    """
    arr = np.asarray(x, dtype=np.float32)
    bits = arr.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = ((bits + np.uint32(0x7FFF) + lsb) & np.uint32(0xFFFF0000)).view(np.float32)
    out = np.where(np.isnan(arr), arr, rounded)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def bf16_ulp(x):
    """Spacing of the bfloat16 grid at the magnitude of ``x`` (elementwise)."""
    mag = np.abs(np.asarray(x, dtype=np.float64))
    with np.errstate(divide="ignore"):
        exp = np.floor(np.log2(np.where(mag > 0, mag, 1.0)))
    exp = np.where(mag > 0, np.maximum(exp, -126.0), -126.0)
    return np.exp2(exp - 7.0)


class Precision(Enum):
    """Storage precision tag for `Tensor`."""

    F64 = "f64"
    F32 = "f32"
    BF16EMU = "bf16"

    @property
    def storage_dtype(self) -> np.dtype:
        return np.dtype(np.float64) if self is Precision.F64 else np.dtype(np.float32)

    @property
    def compute_dtype(self) -> np.dtype:
        # bf16 storage computes in f32, mirroring hardware accumulate-in-fp32.
        return np.dtype(np.float64) if self is Precision.F64 else np.dtype(np.float32)

    def quantize(self, arr: np.ndarray) -> np.ndarray:
        """Project an array onto this precision's representable values."""
        if self is Precision.F64:
            return np.asarray(arr, dtype=np.float64)
        if self is Precision.F32:
            return np.asarray(arr, dtype=np.float32)
        return np.asarray(bf16_round(np.asarray(arr, dtype=np.float32)), dtype=np.float32)


@dataclass(frozen=True)
class Tensor:
    """Dense row-major array of real scalars in a declared precision."""

    data: np.ndarray
    precision: Precision = Precision.F64

    def __post_init__(self):
        quantized = self.precision.quantize(np.ascontiguousarray(self.data))
        quantized.flags.writeable = False
        object.__setattr__(self, "data", quantized)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @staticmethod
    def zeros(shape, precision: Precision = Precision.F64) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=precision.storage_dtype), precision)

    def to(self, precision: Precision) -> "Tensor":
        return Tensor(self.data, precision)

    def as_f64(self) -> np.ndarray:
        """Writable float64 copy (oracle-side convenience)."""
        return np.array(self.data, dtype=np.float64)


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def max_abs_diff(a, b) -> float:
    """Largest elementwise |a - b| in float64 (0.0 for empty inputs)."""
    da, db = _as_array(a).astype(np.float64), _as_array(b).astype(np.float64)
    if da.size == 0:
        return 0.0
    return float(np.max(np.abs(da - db)))


def allclose(a, b, atol: float = 1e-8, rtol: float = 1e-5) -> bool:
    """Elementwise |a - b| <= atol + rtol*|b|; raises on shape mismatch."""
    da, db = _as_array(a), _as_array(b)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch: {da.shape} vs {db.shape}")
    da = da.astype(np.float64)
    db = db.astype(np.float64)
    return bool(np.all(np.abs(da - db) <= atol + rtol * np.abs(db)))


# ---------------------------------------------------------------------------
# Deterministic RNG
#
# Counter-based SplitMix64: the i-th raw draw for seed s is
#     z = s + (i+1) * 0x9E3779B97F4A7C15        (mod 2^64)
#     z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9    (mod 2^64)
#     z ^= z >> 27;  z *= 0x94D049BB133111EB    (mod 2^64)
#     z ^= z >> 31
# Uniform doubles use the top 53 bits: u = (z >> 11) * 2^-53 in [0, 1).
# Normals use Box-Muller on consecutive uniform pairs (u1 shifted into
# (0, 1] to keep log finite), emitted as [r*cos, r*sin] per pair.
#
# The integer stream is exactly platform-independent; the transcendental
# steps (log/cos/sin) follow the platform libm, which is bit-stable on all
# mainstream IEEE-754 systems.
# ---------------------------------------------------------------------------

_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(seed: int, count: int) -> np.ndarray:
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _SM64_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SM64_MIX1
        z = (z ^ (z >> np.uint64(27))) * _SM64_MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def _uniform_unit(seed: int, count: int) -> np.ndarray:
    return (_splitmix64(seed, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def seeded_fill(
    shape,
    seed: int,
    dist: str = "uniform",
    lo: float = 0.0,
    hi: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    precision: Precision = Precision.F64,
) -> Tensor:
    """Deterministically fill a tensor from the SplitMix64 stream above.

    ``dist`` is ``"uniform"`` (parameters ``lo``, ``hi``) or ``"normal"``
    (parameters ``mean``, ``std``).  The same (shape, seed, dist, params)
    always yields bit-identical buffers.
    """
    n = int(np.prod(shape, dtype=np.int64))
    if dist == "uniform":
        vals = lo + (hi - lo) * _uniform_unit(seed, n)
    elif dist == "normal":
        pairs = (n + 1) // 2
        raw = _splitmix64(seed, 2 * pairs)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        vals = mean + std * z[:n]
    else:
        raise ValueError(f"unknown distribution: {dist!r}")
    return Tensor(vals.reshape(shape), precision)


# Row-major flat index <-> multi-index, the layout contract of Tensor.data.


def multi_to_flat(index, shape) -> int:
    flat = 0
    for i, extent in zip(index, shape):
        if not 0 <= i < extent:
            raise IndexError(f"index {index} out of bounds for shape {shape}")
        flat = flat * extent + i
    return flat


def flat_to_multi(flat: int, shape) -> tuple:
    if not 0 <= flat < max(1, math.prod(shape)):
        raise IndexError(f"flat index {flat} out of bounds for shape {shape}")
    index = []
    for extent in reversed(shape):
        index.append(flat % extent)
        flat //= extent
    return tuple(reversed(index))
