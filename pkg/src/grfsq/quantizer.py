"""Group-residual FSQ: the full quantizer on top of the per-vector core.

A frame of ``num_groups * group_dim`` values is split into groups; each
group runs ``num_residuals`` rounds of quantize-and-subtract, calling the
FSQ grid on the current residual every round. Groups may carry an
orthonormal down/up projection pair so group dimension and grid dimension
can differ.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigMismatch,
    DegenerateCalibration,
    InvalidConfig,
    InvalidIndex,
    InvalidInput,
)
from .fsq import LevelSpec, _finite_vector, _grid_values, _nearest_codes

DEFAULT_GROUPS = 12
DEFAULT_RESIDUALS = 4
DEFAULT_LEVELS = (5, 5, 5, 5)
DEFAULT_FPS = 25.0

_ORTHO_TOL = 1e-5  # projections are stored at single precision


def _as_projection(mat, d: int, group_dim: int, g: int) -> np.ndarray:
    arr = np.array(mat, dtype=np.float64)
    if arr.shape != (d, group_dim):
        raise InvalidConfig(
            f"projection {g} must have shape ({d}, {group_dim}), got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidConfig(f"projection {g} contains non-finite values")
    gram = arr @ arr.T
    if not np.allclose(gram, np.eye(d), atol=_ORTHO_TOL):
        raise InvalidConfig(f"projection {g} rows are not orthonormal")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GrfsqConfig:
    """Shape of the quantizer: groups, residual depth, grid, projections."""

    num_groups: int
    num_residuals: int
    level_spec: LevelSpec
    group_dim: int
    projections: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if self.num_groups < 1 or self.num_residuals < 1:
            raise InvalidConfig("need at least one group and one residual stage")
        if self.group_dim < 1:
            raise InvalidConfig("group_dim must be positive")
        d = self.level_spec.d
        if self.projections is None:
            if self.group_dim != d:
                raise InvalidConfig(
                    f"without projections group_dim ({self.group_dim}) must equal "
                    f"the grid dimension ({d})"
                )
            object.__setattr__(self, "_ups", None)
        else:
            downs = tuple(self.projections)
            if len(downs) != self.num_groups:
                raise InvalidConfig(
                    f"expected {self.num_groups} projections, got {len(downs)}"
                )
            downs = tuple(
                _as_projection(m, d, self.group_dim, g) for g, m in enumerate(downs)
            )
            object.__setattr__(self, "projections", downs)
            ups = tuple(np.ascontiguousarray(m.T) for m in downs)
            for u in ups:
                u.setflags(write=False)
            object.__setattr__(self, "_ups", ups)
        if self.level_spec.codebook_size > 2**63 - 1:
            raise InvalidConfig("codebook size too large for signed 64-bit indices")

    @property
    def total_dim(self) -> int:
        return self.num_groups * self.group_dim

    @property
    def codebook_size(self) -> int:
        return self.level_spec.codebook_size

    def __eq__(self, other):
        if not isinstance(other, GrfsqConfig):
            return NotImplemented
        if (
            self.num_groups != other.num_groups
            or self.num_residuals != other.num_residuals
            or self.level_spec != other.level_spec
            or self.group_dim != other.group_dim
        ):
            return False
        if (self.projections is None) != (other.projections is None):
            return False
        if self.projections is None:
            return True
        return all(
            np.array_equal(a, b) for a, b in zip(self.projections, other.projections)
        )


@dataclass(frozen=True)
class ReconstructionReport:
    """Distortion summary for a quantized sequence."""

    per_frame_rmse: np.ndarray
    cumulative_rmse_by_residual: np.ndarray
    mean_rmse: float


@dataclass(frozen=True, eq=False)
class UtilizationReport:
    """Fraction of each codebook observed at least once, in percent."""

    per_codebook_percent: np.ndarray  # (num_groups, num_residuals)
    mean_percent: float
    empty: bool = False


def _quantize_frame(x: np.ndarray, cfg: GrfsqConfig):
    """One frame through the group/residual loop.

    Returns (indices (G, R), partials (R, D)) where partials[r] is the
    reconstruction truncated to the first r+1 residual stages.
    """
    G, R, dg = cfg.num_groups, cfg.num_residuals, cfg.group_dim
    levels = np.asarray(cfg.level_spec.levels, dtype=np.float64)
    strides = cfg.level_spec.strides
    indices = np.empty((G, R), dtype=np.int64)
    partials = np.empty((R, cfg.total_dim), dtype=np.float64)
    for g in range(G):
        lo = g * dg
        down = cfg.projections[g] if cfg.projections is not None else None
        residual = x[lo : lo + dg].copy()
        acc = np.zeros(dg)
        for r in range(R):
            z = down @ residual if down is not None else residual
            codes = _nearest_codes(np.tanh(z), levels)
            values = _grid_values(codes, levels)
            q = cfg._ups[g] @ values if down is not None else values
            acc = acc + q
            residual = residual - q
            flat = 0
            for code, stride in zip(codes.tolist(), strides):
                flat += code * stride
            indices[g, r] = flat
            partials[r, lo : lo + dg] = acc
    return indices, partials


def grfsq_quantize(x, cfg: GrfsqConfig) -> tuple[np.ndarray, np.ndarray]:
    """Quantize one frame; returns (reconstruction, indices of shape (G, R))."""
    xv = _finite_vector(x, cfg.total_dim, name="frame")
    indices, partials = _quantize_frame(xv, cfg)
    return partials[-1], indices


def _checked_indices(indices, cfg: GrfsqConfig) -> np.ndarray:
    arr = np.asarray(indices)
    if arr.shape != (cfg.num_groups, cfg.num_residuals):
        raise InvalidIndex(
            f"expected index shape ({cfg.num_groups}, {cfg.num_residuals}), "
            f"got {arr.shape}"
        )
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidIndex("indices must be integers")
    if np.any(arr < 0) or np.any(arr >= cfg.codebook_size):
        raise InvalidIndex(f"indices out of range for codebook size {cfg.codebook_size}")
    return arr.astype(np.int64)


def grfsq_dequantize(indices, cfg: GrfsqConfig) -> np.ndarray:
    """Rebuild a frame from its (G, R) index block.

    Accumulation order matches grfsq_quantize, so the result is bit-equal to
    the reconstruction returned there.
    """
    arr = _checked_indices(indices, cfg)
    dg = cfg.group_dim
    levels = np.asarray(cfg.level_spec.levels, dtype=np.float64)
    out = np.empty(cfg.total_dim, dtype=np.float64)
    for g in range(cfg.num_groups):
        acc = np.zeros(dg)
        for r in range(cfg.num_residuals):
            codes = _flat_to_codes(int(arr[g, r]), cfg.level_spec)
            values = _grid_values(codes, levels)
            q = cfg._ups[g] @ values if cfg.projections is not None else values
            acc = acc + q
        out[g * dg : (g + 1) * dg] = acc
    return out


def _flat_to_codes(index: int, spec: LevelSpec) -> np.ndarray:
    codes = np.empty(spec.d, dtype=np.int64)
    for i, l in enumerate(spec.levels):
        index, codes[i] = divmod(index, l)
    return codes


def _frames_array(frames, dim: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(frames, dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise InvalidInput(f"frames are ragged or non-numeric: {exc}") from None
    if arr.ndim != 2:
        raise InvalidInput(f"frames must be a 2-D array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ConfigMismatch(f"frames have dimension {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("frames contain non-finite values")
    return arr


def quantize_sequence(
    frames, cfg: GrfsqConfig, workers: int = 1
) -> tuple[np.ndarray, np.ndarray, ReconstructionReport]:
    """Quantize frames row by row.

    Returns (indices (T, G, R), reconstructions (T, D), report). The output
    is identical for any worker count; frames are merged in order.
    """
    arr = _frames_array(frames, cfg.total_dim)
    T, D = arr.shape
    R = cfg.num_residuals
    indices = np.empty((T, cfg.num_groups, R), dtype=np.int64)
    recon = np.empty((T, D), dtype=np.float64)
    if T == 0:
        report = ReconstructionReport(
            per_frame_rmse=np.zeros(0),
            cumulative_rmse_by_residual=np.zeros(R),
            mean_rmse=0.0,
        )
        return indices, recon, report

    sq_err_by_stage = np.zeros(R)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda row: _quantize_frame(row, cfg), arr))
    else:
        results = [_quantize_frame(row, cfg) for row in arr]
    for t, (idx, partials) in enumerate(results):
        indices[t] = idx
        recon[t] = partials[-1]
        sq_err_by_stage += ((arr[t] - partials) ** 2).sum(axis=1)

    per_frame = np.sqrt(((arr - recon) ** 2).mean(axis=1))
    cumulative = np.sqrt(sq_err_by_stage / (T * D))
    report = ReconstructionReport(
        per_frame_rmse=per_frame,
        cumulative_rmse_by_residual=cumulative,
        mean_rmse=float(per_frame.mean()),
    )
    return indices, recon, report


def calibrate_projections(calibration, cfg: GrfsqConfig) -> GrfsqConfig:
    """Fit per-group orthonormal projections by PCA over calibration frames.

    Each group keeps the top ``level_spec.d`` covariance eigenvectors in
    descending eigenvalue order, every axis oriented so its
    largest-magnitude component is positive. Matrices are rounded to single
    precision so they survive stream headers losslessly.
    """
    arr = _frames_array(calibration, cfg.total_dim)
    d, dg = cfg.level_spec.d, cfg.group_dim
    if dg < d:
        raise InvalidConfig(f"group_dim ({dg}) smaller than grid dimension ({d})")
    if arr.shape[0] < d:
        raise InvalidInput(f"need at least {d} calibration frames, got {arr.shape[0]}")
    if dg == d:
        eye = np.eye(d)
        return dataclasses.replace(cfg, projections=tuple(eye for _ in range(cfg.num_groups)))

    downs = []
    for g in range(cfg.num_groups):
        block = arr[:, g * dg : (g + 1) * dg]
        centered = block - block.mean(axis=0)
        cov = centered.T @ centered / max(arr.shape[0] - 1, 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        top = eigvals[order[:d]]
        tol = max(eigvals.max(), 0.0) * 1e-9 + 1e-300
        if top[-1] <= tol:
            raise DegenerateCalibration(
                f"group {g} covariance rank below {d}; cannot calibrate"
            )
        axes = eigvecs[:, order[:d]].T  # rows are principal axes
        for row in axes:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        downs.append(axes.astype(np.float32).astype(np.float64))
    return dataclasses.replace(cfg, projections=tuple(downs))


def bitrate(cfg: GrfsqConfig, fps: float) -> float:
    """Theoretical token bitrate: groups * residuals * log2(codebook) * fps."""
    if not (math.isfinite(fps) and fps > 0):
        raise InvalidConfig(f"fps must be positive, got {fps}")
    return cfg.num_groups * cfg.num_residuals * math.log2(cfg.codebook_size) * fps


def float_stream_bitrate(dims: int, fps: float, bits_per_scalar: int = 32) -> float:
    """Bitrate of an uncompressed float latent stream, for comparison rows."""
    if dims < 1 or bits_per_scalar < 1:
        raise InvalidConfig("dims and bits_per_scalar must be positive")
    if not (math.isfinite(fps) and fps > 0):
        raise InvalidConfig(f"fps must be positive, got {fps}")
    return dims * bits_per_scalar * fps


def _utilization_percent(tokens_per_book: np.ndarray, codebook_size: int):
    """tokens_per_book: (T, books) integer array. Returns (percent array, empty)."""
    T, books = tokens_per_book.shape
    if T == 0:
        return np.zeros(books), True
    out = np.empty(books)
    for b in range(books):
        out[b] = 100.0 * len(np.unique(tokens_per_book[:, b])) / codebook_size
    return out, False


def utilization(tokens, cfg: GrfsqConfig) -> UtilizationReport:
    """Per-(group, residual) codebook coverage over a token tensor, in percent."""
    arr = np.asarray(tokens)
    G, R = cfg.num_groups, cfg.num_residuals
    if arr.ndim != 3 or arr.shape[1:] != (G, R):
        raise ConfigMismatch(f"expected token shape (T, {G}, {R}), got {arr.shape}")
    if arr.size and (np.any(arr < 0) or np.any(arr >= cfg.codebook_size)):
        raise InvalidIndex("token indices out of codebook range")
    flat, empty = _utilization_percent(arr.reshape(arr.shape[0], G * R), cfg.codebook_size)
    per = flat.reshape(G, R)
    return UtilizationReport(
        per_codebook_percent=per,
        mean_percent=float(per.mean()),
        empty=empty,
    )
