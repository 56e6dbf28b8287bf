"""Per-vector finite scalar quantization on a fixed uniform grid.

Every dimension ``i`` is squashed with tanh and snapped to one of
``levels[i]`` uniformly spaced values on [-1, 1]:

    value(k) = -1 + 2k / (levels[i] - 1),   k in [0, levels[i])

The cartesian product of the per-dimension level sets forms an implicit
codebook that is never materialized; codewords are addressed by a
mixed-radix flat index with dimension 0 as the least significant digit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidCode,
    InvalidConfig,
    InvalidIndex,
    InvalidInput,
    TooLarge,
)

ENUMERATION_CAP = 1_000_000

_UINT64_MAX = 2**64 - 1


@dataclass(frozen=True)
class LevelSpec:
    """Per-dimension level counts defining the quantization grid."""

    levels: tuple[int, ...]

    def __post_init__(self):
        levels = tuple(int(l) for l in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) < 1:
            raise InvalidConfig("level spec needs at least one dimension")
        if any(l < 2 for l in levels):
            raise InvalidConfig(f"every level count must be >= 2, got {levels}")
        size = 1
        for l in levels:
            size *= l
        if size > _UINT64_MAX:
            raise InvalidConfig(f"codebook size {size} exceeds unsigned 64-bit range")
        object.__setattr__(self, "_size", size)

    @property
    def d(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return self._size

    @property
    def strides(self) -> tuple[int, ...]:
        """Mixed-radix place values, dimension 0 least significant."""
        out, acc = [], 1
        for l in self.levels:
            out.append(acc)
            acc *= l
        return tuple(out)


def _grid_values(codes, levels) -> np.ndarray:
    # The single grid formula used everywhere; keeping one expression makes
    # quantize/dequantize/enumerate outputs bit-identical.
    return -1.0 + (2.0 * np.asarray(codes, dtype=np.float64)) / (
        np.asarray(levels, dtype=np.float64) - 1.0
    )


def _finite_vector(z, d: int, name: str = "input") -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != d:
        raise InvalidInput(f"{name} must be a length-{d} vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


def _checked_codes(codes, spec: LevelSpec) -> np.ndarray:
    arr = np.asarray(codes)
    if arr.ndim != 1 or arr.shape[0] != spec.d:
        raise InvalidCode(f"expected {spec.d} codes, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise InvalidCode("codes must be integers")
    arr = arr.astype(np.int64)
    levels = np.asarray(spec.levels)
    if np.any(arr < 0) or np.any(arr >= levels):
        raise InvalidCode(f"codes {arr.tolist()} out of range for levels {spec.levels}")
    return arr


def bound(z, spec: LevelSpec) -> np.ndarray:
    """Squash a vector into (-1, 1) componentwise with tanh."""
    return np.tanh(_finite_vector(z, spec.d))


def _nearest_codes(y: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Per-dimension nearest grid code for bounded values, ties to the larger code.

    A rounded first guess is refined against the float grid values of its
    neighbors so the result is always the true argmin of |y - value(k)|.
    """
    half = levels - 1.0
    k0 = np.floor((y + 1.0) * half / 2.0 + 0.5)
    cands = np.stack([k0 + 1.0, k0, k0 - 1.0])
    np.clip(cands, 0.0, half, out=cands)
    dist = np.abs(_grid_values(cands, levels) - y)
    # candidates are ordered largest-first, and argmin keeps the first
    # minimum, so exact ties resolve to the larger code
    pick = np.argmin(dist, axis=0)
    return cands[pick, np.arange(y.shape[0])].astype(np.int64)


def fsq_quantize(z, spec: LevelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Quantize a vector: returns (codes, grid values).

    Codes minimize the per-dimension distance between tanh(z) and the grid;
    exact midpoints resolve toward the larger code index.
    """
    y = bound(z, spec)
    levels = np.asarray(spec.levels, dtype=np.float64)
    codes = _nearest_codes(y, levels)
    return codes, _grid_values(codes, levels)


def fsq_dequantize(codes, spec: LevelSpec) -> np.ndarray:
    """Exact grid values for a code point; no rounding involved."""
    arr = _checked_codes(codes, spec)
    return _grid_values(arr, np.asarray(spec.levels, dtype=np.float64))


def codes_to_index(codes, spec: LevelSpec) -> int:
    """Flatten per-dimension codes into the mixed-radix codebook index."""
    arr = _checked_codes(codes, spec)
    index = 0
    for code, stride in zip(arr.tolist(), spec.strides):
        index += code * stride
    return index


def index_to_codes(index: int, spec: LevelSpec) -> np.ndarray:
    """Invert :func:`codes_to_index`."""
    idx = int(index)
    if idx < 0 or idx >= spec.codebook_size:
        raise InvalidIndex(f"index {idx} out of range for codebook size {spec.codebook_size}")
    codes = np.empty(spec.d, dtype=np.int64)
    for i, l in enumerate(spec.levels):
        idx, codes[i] = divmod(idx, l)
    return codes


def ste_gradient(z, spec: LevelSpec, upstream) -> np.ndarray:
    """Straight-through backward pass: rounding is treated as identity.

    The returned gradient is upstream * d/dz tanh(z); quantizing to the grid
    contributes nothing in the backward direction.
    """
    zv = _finite_vector(z, spec.d)
    up = _finite_vector(upstream, spec.d, name="upstream")
    return up * (1.0 - np.tanh(zv) ** 2)


def enumerate_codebook(spec: LevelSpec, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """Materialize every codeword, ordered by flat index. Desk-scale only."""
    size = spec.codebook_size
    if size > cap:
        raise TooLarge(f"codebook size {size} exceeds enumeration cap {cap}")
    flat = np.arange(size, dtype=np.int64)
    out = np.empty((size, spec.d), dtype=np.float64)
    levels = np.asarray(spec.levels, dtype=np.float64)
    for i, (l, stride) in enumerate(zip(spec.levels, spec.strides)):
        out[:, i] = _grid_values((flat // stride) % l, levels[i])
    return out
