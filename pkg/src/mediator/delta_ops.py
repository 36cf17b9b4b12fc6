"""Task-arithmetic deltas and their denoised / sparsified forms.

A delta is the elementwise difference between a finetuned checkpoint and
a reference checkpoint, computed and held in float32.  Two reduction
strategies are provided:

* band denoising: drop entries strictly inside the open interval
  (mu - m*sigma, mu + m*sigma) of that tensor's own value distribution,
  treating small updates as optimization noise;
* top-magnitude sparsification: keep the ceil(ratio * N) entries of
  largest absolute value.

Both produce a :class:`SparseDelta` in canonical form: strictly
increasing flat indices with their exact float32 values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import EmptyTensor, InvalidRatio, NameSetMismatch, ShapeMismatch
from .tensor_store import Checkpoint, Tensor, checkpoint_digest

ArrayLike = Union[Tensor, np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class UpdateStats:
    """Mean and population standard deviation of a delta's entries."""

    mu: float
    sigma: float


@dataclass(frozen=True)
class DeltaCheckpoint:
    """Per-tensor float32 differences against a reference checkpoint."""

    reference_id: str
    deltas: dict[str, Tensor]


@dataclass(frozen=True)
class SparseDelta:
    """Magnitude-sparse form of one tensor's delta.

    ``indices`` are strictly increasing uint64 flat offsets into the
    dense tensor of ``shape``; ``values`` carries the exact float32
    entries at those offsets.
    """

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        idx = np.ascontiguousarray(self.indices, dtype=np.uint64)
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if idx.ndim != 1 or vals.ndim != 1 or idx.size != vals.size:
            raise ShapeMismatch("indices and values must be 1-D arrays of equal length")
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if idx.size:
            signed = idx.astype(np.int64)
            if np.any(np.diff(signed) <= 0):
                raise ShapeMismatch("sparse indices must be strictly increasing")
            if signed[0] < 0 or signed[-1] >= numel:
                raise ShapeMismatch(f"sparse index out of range for {numel} elements")
        idx, vals = idx.view(), vals.view()
        idx.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def keep_ratio_actual(self) -> float:
        return self.nnz / self.numel

    def to_dense(self) -> np.ndarray:
        """Dense float32 array: zeros everywhere except stored entries."""
        out = np.zeros(self.numel, dtype=np.float32)
        if self.nnz:
            out[self.indices.astype(np.int64)] = self.values
        return out.reshape(self.shape)


def _flat_f32(delta: ArrayLike) -> tuple[np.ndarray, tuple[int, ...]]:
    if isinstance(delta, Tensor):
        arr = delta.to_f32()
    else:
        arr = np.asarray(delta, dtype=np.float32)
    if arr.size == 0:
        raise EmptyTensor("operation requires at least one element")
    return arr.reshape(-1), tuple(arr.shape)


def task_arithmetic(finetuned: Checkpoint, reference: Checkpoint) -> DeltaCheckpoint:
    """Elementwise float32 difference, finetuned minus reference."""
    if set(finetuned.tensors) != set(reference.tensors):
        missing = set(reference.tensors) ^ set(finetuned.tensors)
        raise NameSetMismatch(f"checkpoints disagree on tensors: {sorted(missing)[:5]}")
    deltas: dict[str, Tensor] = {}
    for name in sorted(reference.tensors):
        ft, ref = finetuned.tensors[name], reference.tensors[name]
        if ft.shape != ref.shape:
            raise ShapeMismatch(f"tensor {name!r}: {ft.shape} vs {ref.shape}")
        deltas[name] = Tensor.from_f32(ft.to_f32() - ref.to_f32(), "f32")
    return DeltaCheckpoint(checkpoint_digest(reference), deltas)


def estimate_update_stats(delta: ArrayLike) -> UpdateStats:
    """Sample mean and population standard deviation of the entries."""
    flat, _ = _flat_f32(delta)
    mu = float(np.float32(flat.mean(dtype=np.float64)))
    sigma = float(np.float32(flat.std(dtype=np.float64)))
    return UpdateStats(mu, sigma)


def apply_band(delta: ArrayLike, lower: float, upper: float) -> SparseDelta:
    """Drop entries strictly inside the open interval (lower, upper).

    Entries equal to zero are never stored: a stored zero adds nothing
    to the dense form, and omitting them keeps the support stable when
    the band is re-applied to the densified result.
    """
    flat, shape = _flat_f32(delta)
    keep = ((flat <= lower) | (flat >= upper)) & (flat != 0)
    idx = np.flatnonzero(keep)
    return SparseDelta(shape, idx.astype(np.uint64), flat[idx])


def denoise(delta: ArrayLike, sigma_mult: float = 1.0) -> SparseDelta:
    """Remove entries within sigma_mult standard deviations of the mean.

    With sigma = 0 the open interval is empty and every (nonzero) entry
    survives.
    """
    if sigma_mult < 0:
        raise ValueError(f"sigma_mult must be >= 0, got {sigma_mult}")
    stats = estimate_update_stats(delta)
    return apply_band(
        delta,
        stats.mu - sigma_mult * stats.sigma,
        stats.mu + sigma_mult * stats.sigma,
    )


def _keep_count(keep_ratio: float, numel: int) -> int:
    # round() shields ceil from float artifacts in keep_ratio * numel
    # (0.14 * 50 evaluates to 7.000000000000001).
    k = math.ceil(round(keep_ratio * numel, 9))
    return max(1, min(numel, k))


def sparsify_top_magnitude(delta: ArrayLike, keep_ratio: float) -> SparseDelta:
    """Keep the ceil(keep_ratio * N) entries of largest magnitude.

    Magnitude ties are broken in favour of the lower flat index.
    """
    if not 0 < keep_ratio <= 1:
        raise InvalidRatio(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    flat, shape = _flat_f32(delta)
    k = _keep_count(keep_ratio, flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")[:k]
    idx = np.sort(order)
    return SparseDelta(shape, idx.astype(np.uint64), flat[idx])


def densify(sparse: SparseDelta) -> Tensor:
    """Dense float32 tensor with zeros outside the stored indices."""
    return Tensor.from_f32(sparse.to_dense(), "f32")
