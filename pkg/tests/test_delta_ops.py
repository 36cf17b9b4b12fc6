import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mediator import (
    Checkpoint,
    SparseDelta,
    Tensor,
    apply_band,
    denoise,
    densify,
    estimate_update_stats,
    sparsify_top_magnitude,
    task_arithmetic,
)
from mediator.errors import EmptyTensor, InvalidRatio, NameSetMismatch, ShapeMismatch


def _ckpt(arrays):
    return Checkpoint({k: Tensor.from_f32(np.asarray(v, dtype=np.float32)) for k, v in arrays.items()})


# --- task arithmetic ----------------------------------------------------------


def test_task_arithmetic_definition():
    delta = task_arithmetic(_ckpt({"w": [3.0, 5.0]}), _ckpt({"w": [1.0, 2.0]}))
    assert np.array_equal(delta.deltas["w"].to_f32(), [2.0, 3.0])


def test_task_arithmetic_identity_is_zero():
    ckpt = _ckpt({"w": [1.25, -7.5]})
    delta = task_arithmetic(ckpt, ckpt)
    assert np.array_equal(delta.deltas["w"].to_f32(), [0.0, 0.0])


def test_task_arithmetic_inverts_exactly_in_f32():
    rng = np.random.default_rng(3)
    base = rng.normal(size=64).astype(np.float32)
    finetuned = (base * (1 + rng.uniform(-0.05, 0.05, size=64))).astype(np.float32)
    delta = task_arithmetic(_ckpt({"w": finetuned}), _ckpt({"w": base}))
    recovered = base + delta.deltas["w"].to_f32()
    assert np.array_equal(recovered.astype(np.float32), finetuned)


def test_task_arithmetic_validates_names_and_shapes():
    with pytest.raises(NameSetMismatch):
        task_arithmetic(_ckpt({"w": [1.0]}), _ckpt({"v": [1.0]}))
    with pytest.raises(ShapeMismatch):
        task_arithmetic(_ckpt({"w": [1.0, 2.0]}), _ckpt({"w": [1.0]}))


def test_reference_id_tracks_content():
    a, b = _ckpt({"w": [1.0]}), _ckpt({"w": [2.0]})
    ft = _ckpt({"w": [5.0]})
    assert task_arithmetic(ft, a).reference_id != task_arithmetic(ft, b).reference_id


# --- update statistics ----------------------------------------------------------


def test_stats_constant_vector():
    stats = estimate_update_stats(np.array([1.0, 1.0, 1.0, 1.0], dtype=np.float32))
    assert stats.mu == 1.0 and stats.sigma == 0.0


def test_stats_symmetric_pair():
    stats = estimate_update_stats(np.array([-1.0, 1.0], dtype=np.float32))
    assert stats.mu == 0.0 and stats.sigma == 1.0


def test_stats_match_direct_sampling_oracle():
    rng = np.random.default_rng(7)
    samples = rng.standard_normal(1_000_000).astype(np.float32)
    stats = estimate_update_stats(samples)
    # Oracle: float64 statistics over the same sample.
    assert abs(stats.mu - float(samples.mean(dtype=np.float64))) < 1e-6
    assert abs(stats.sigma - float(samples.std(dtype=np.float64))) < 1e-6
    assert abs(stats.mu) < 0.01
    assert abs(stats.sigma - 1.0) < 0.01


def test_stats_empty_rejected():
    with pytest.raises(EmptyTensor):
        estimate_update_stats(np.zeros(0, dtype=np.float32))


# --- band denoising --------------------------------------------------------------


def test_denoise_sigma_zero_keeps_everything():
    sparse = denoise(np.array([2.0, 2.0, 2.0], dtype=np.float32))
    assert sparse.nnz == 3
    assert np.array_equal(sparse.values, [2.0, 2.0, 2.0])


def test_denoise_hand_computed_band():
    values = np.array([-3.0, -0.1, 0.0, 0.1, 3.0], dtype=np.float32)
    # Oracle by hand: mu = 0, sigma = sqrt(18.02 / 5) = 1.89842...
    sigma = math.sqrt((9.0 + 0.01 + 0.0 + 0.01 + 9.0) / 5.0)
    assert abs(sigma - 1.8984203) < 1e-6
    sparse = denoise(values, sigma_mult=1.0)
    assert list(sparse.indices) == [0, 4]
    assert np.array_equal(sparse.values, [-3.0, 3.0])


def test_denoise_gaussian_keep_fraction_matches_cdf():
    rng = np.random.default_rng(11)
    samples = rng.standard_normal(1_000_000).astype(np.float32)
    kept = denoise(samples, sigma_mult=1.0).keep_ratio_actual
    expected = math.erfc(1.0 / math.sqrt(2.0))  # mass outside one standard deviation
    assert abs(kept - expected) < 0.01


def test_denoise_band_endpoints_survive():
    # Open interval: values exactly on the endpoints are kept.
    values = np.array([-1.0, 1.0, -1.0, 1.0], dtype=np.float32)  # mu=0 sigma=1
    sparse = denoise(values, sigma_mult=1.0)
    assert sparse.nnz == 4


def test_apply_band_support_never_grows():
    rng = np.random.default_rng(5)
    values = rng.normal(size=512).astype(np.float32)
    first = denoise(values, sigma_mult=1.0)
    stats = estimate_update_stats(values)
    lo, hi = stats.mu - stats.sigma, stats.mu + stats.sigma
    second = apply_band(first.to_dense(), lo, hi)
    assert set(second.indices.tolist()) <= set(first.indices.tolist())


def test_denoise_rejects_negative_mult():
    with pytest.raises(ValueError):
        denoise(np.ones(3, dtype=np.float32), sigma_mult=-0.5)


# --- top-magnitude sparsification -------------------------------------------------


def test_sparsify_picks_largest_magnitudes():
    sparse = sparsify_top_magnitude(np.array([5.0, -4.0, 3.0, -2.0, 1.0], dtype=np.float32), 0.4)
    assert list(sparse.indices) == [0, 1]
    assert np.array_equal(sparse.values, [5.0, -4.0])


def test_sparsify_full_keep_is_identity():
    values = np.array([[0.5, -1.5], [2.5, 0.0]], dtype=np.float32)
    sparse = sparsify_top_magnitude(values, 1.0)
    assert sparse.nnz == 4
    assert np.array_equal(densify(sparse).to_f32(), values)


def test_sparsify_tie_breaks_by_lower_index():
    sparse = sparsify_top_magnitude(np.array([2.0, -2.0, 1.0], dtype=np.float32), 0.34)
    # ceil(0.34 * 3) = ceil(1.02) = 2 entries; |2.0| ties resolved to indices 0, 1.
    assert list(sparse.indices) == [0, 1]
    assert np.array_equal(sparse.values, [2.0, -2.0])


def test_keep_count_is_decimal_safe():
    # 0.14 * 50 evaluates to 7.000000000000001 in binary floating point.
    values = np.arange(1, 51, dtype=np.float32)
    assert sparsify_top_magnitude(values, 0.14).nnz == 7


def test_sparsify_rejects_bad_ratio():
    for ratio in (0.0, -0.2, 1.5):
        with pytest.raises(InvalidRatio):
            sparsify_top_magnitude(np.ones(4, dtype=np.float32), ratio)


def test_top_magnitude_beats_random_masks():
    rng = np.random.default_rng(21)
    for _ in range(20):
        values = rng.normal(size=128).astype(np.float32)
        sparse = sparsify_top_magnitude(values, 0.25)
        top_err = np.linalg.norm(values - sparse.to_dense())
        k = sparse.nnz
        for _ in range(20):
            mask_idx = rng.choice(values.size, size=k, replace=False)
            masked = np.zeros_like(values)
            masked[mask_idx] = values[mask_idx]
            assert top_err <= np.linalg.norm(values - masked) + 1e-7


# --- densify -----------------------------------------------------------------------


def test_densify_scatters_values():
    sparse = SparseDelta((3,), np.array([1], dtype=np.uint64), np.array([7.0], dtype=np.float32))
    assert np.array_equal(densify(sparse).to_f32(), [0.0, 7.0, 0.0])


def test_densify_empty_is_zero():
    sparse = SparseDelta((2, 2), np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=np.float32))
    assert np.array_equal(densify(sparse).to_f32(), np.zeros((2, 2), dtype=np.float32))


def test_sparse_delta_rejects_broken_canonical_form():
    with pytest.raises(ShapeMismatch):
        SparseDelta((3,), np.array([1, 1], dtype=np.uint64), np.array([1.0, 2.0], dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        SparseDelta((3,), np.array([5], dtype=np.uint64), np.array([1.0], dtype=np.float32))


@settings(max_examples=100, deadline=None)
@given(
    hnp.arrays(
        np.float32,
        st.integers(min_value=1, max_value=64),
        elements=st.floats(min_value=-100, max_value=100, allow_nan=False, width=32),
    ),
    st.floats(min_value=0.01, max_value=1.0),
)
def test_sparsify_properties(values, ratio):
    sparse = sparsify_top_magnitude(values, ratio)
    assert 1 <= sparse.nnz <= values.size
    assert np.all(np.diff(sparse.indices.astype(np.int64)) > 0) or sparse.nnz <= 1
    # Every kept magnitude is >= every dropped magnitude.
    dropped = np.setdiff1d(np.arange(values.size), sparse.indices.astype(np.int64))
    if dropped.size and sparse.nnz:
        assert np.abs(sparse.values).min() >= np.abs(values[dropped]).max() - 1e-6
