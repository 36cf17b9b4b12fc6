"""Shared fixture builders.

Checkpoints are generated with magnitudes in [0.5, 2.0] and experts as
small relative perturbations of the base (within 5%), so every expert
stays inside the two-to-one band of the per-layer mean where float32
subtraction is exact.  That makes the keep-ratio-1 losslessness claims
hold bit-for-bit rather than approximately.
"""

from __future__ import annotations

import numpy as np
import pytest

from mediator import (
    BundleConfig,
    Checkpoint,
    Tensor,
    analyze_conflicts,
    build_bundle,
    build_merge_plan,
    partition_layers,
    PartitionRules,
)


def make_values(rng: np.random.Generator, shape) -> np.ndarray:
    mags = rng.uniform(0.5, 2.0, size=shape)
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return (mags * signs).astype(np.float32)


def make_checkpoint(shapes: dict, seed: int, dtype: str = "f32") -> Checkpoint:
    rng = np.random.default_rng(seed)
    tensors = {
        name: Tensor.from_f32(make_values(rng, shape), dtype) for name, shape in shapes.items()
    }
    return Checkpoint(dict(sorted(tensors.items())))


def perturb_checkpoint(base: Checkpoint, seed: int, rel: float = 0.05) -> Checkpoint:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, t in base.tensors.items():
        factor = (1.0 + rng.uniform(-rel, rel, size=t.shape)).astype(np.float32)
        tensors[name] = Tensor.from_f32(t.to_f32() * factor, t.dtype)
    return Checkpoint(tensors)


def transformer_shapes(n_layers: int = 4, d: int = 64, vocab: int = 96) -> dict:
    shapes = {}
    for layer in range(n_layers):
        prefix = f"model.layers.{layer}."
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[prefix + f"self_attn.{proj}.weight"] = (d, d)
        shapes[prefix + "mlp.gate_proj.weight"] = (2 * d, d)
        shapes[prefix + "mlp.up_proj.weight"] = (2 * d, d)
        shapes[prefix + "mlp.down_proj.weight"] = (d, 2 * d)
        shapes[prefix + "input_layernorm.weight"] = (d,)
        shapes[prefix + "post_attention_layernorm.weight"] = (d,)
    shapes["model.embed_tokens.weight"] = (vocab, d)
    shapes["model.norm.weight"] = (d,)
    shapes["lm_head.weight"] = (vocab, d)
    return shapes


def make_model_family(
    seed: int,
    tasks=("code", "math", "qa"),
    n_layers: int = 4,
    d: int = 64,
    dtype: str = "f32",
):
    """Base checkpoint plus one perturbed expert per task."""
    base = make_checkpoint(transformer_shapes(n_layers=n_layers, d=d), seed, dtype)
    experts = {
        task: perturb_checkpoint(base, seed + 101 + i) for i, task in enumerate(tasks)
    }
    return base, experts


def build_fixture_bundle(
    seed: int,
    tasks=("code", "math", "qa"),
    n_layers: int = 4,
    d: int = 64,
    keep_ratio: float = 1.0,
    sigma_mult: float = 1.0,
    threshold_mult: float = 1.0,
    avg_method: str = "ties",
    dtype: str = "f32",
    dtype_policy: str = "preserve",
):
    """Run the full analyze -> plan -> build pipeline on a fresh fixture."""
    base, experts = make_model_family(seed, tasks, n_layers=n_layers, d=d, dtype=dtype)
    layer_map = partition_layers(base, PartitionRules.default())
    report = analyze_conflicts(base, experts, layer_map, sigma_mult, threshold_mult)
    plan = build_merge_plan(report, layer_map, threshold_mult, avg_method)
    config = BundleConfig(
        keep_ratio=keep_ratio,
        sigma_mult=sigma_mult,
        threshold_mult=threshold_mult,
        avg_method=avg_method,
        dtype_policy=dtype_policy,
    )
    bundle = build_bundle(base, experts, plan, layer_map, config)
    return base, experts, layer_map, plan, bundle


def assert_tensors_equal(a: Tensor, b: Tensor, context: str = "") -> None:
    assert a.dtype == b.dtype, f"{context}: dtype {a.dtype} != {b.dtype}"
    assert a.shape == b.shape, f"{context}: shape {a.shape} != {b.shape}"
    assert a.data.tobytes() == b.data.tobytes(), f"{context}: buffers differ"


def assert_checkpoints_equal(a: Checkpoint, b: Checkpoint) -> None:
    assert list(a.tensors) == list(b.tensors)
    for name in a.tensors:
        assert_tensors_equal(a.tensors[name], b.tensors[name], name)
    assert a.metadata == b.metadata


def assert_bundles_equal(a, b) -> None:
    assert a.manifest.to_json() == b.manifest.to_json()
    assert_checkpoints_equal(a.averaged, b.averaged)
    assert sorted(a.routed) == sorted(b.routed)
    for layer in a.routed:
        ra, rb = a.routed[layer], b.routed[layer]
        assert sorted(ra.mean_tensors) == sorted(rb.mean_tensors)
        for name in ra.mean_tensors:
            assert_tensors_equal(ra.mean_tensors[name], rb.mean_tensors[name], f"mean {name}")
        assert sorted(ra.expert_deltas) == sorted(rb.expert_deltas)
        for task in ra.expert_deltas:
            for name in ra.mean_tensors:
                sa, sb = ra.expert_deltas[task][name], rb.expert_deltas[task][name]
                assert np.array_equal(sa.indices, sb.indices)
                assert np.array_equal(sa.values, sb.values)
        for name in ra.mean_tensors:
            sa, sb = ra.pretrain_delta[name], rb.pretrain_delta[name]
            assert np.array_equal(sa.indices, sb.indices)
            assert np.array_equal(sa.values, sb.values)


@pytest.fixture
def tiny_checkpoint() -> Checkpoint:
    return Checkpoint(
        {
            "a": Tensor.from_f32(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)),
            "b": Tensor.from_f32(np.array([0.5, -0.5], dtype=np.float32)),
        },
        metadata={"origin": "test"},
    )
