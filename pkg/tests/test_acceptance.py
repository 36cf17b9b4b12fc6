"""Acceptance suite: one test per criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion; each test prints a PASS line after its assertions hold.
"""

import math
import time

import numpy as np
import pytest

from mediator import (
    Decision,
    RoutingWeights,
    build_merge_plan,
    denoise,
    layer_conflict_ratio,
    memory_report,
    read_bundle,
    reconstruct,
    reconstruct_streaming,
    routing_weights,
    sparsify_top_magnitude,
    temperature_scale,
    train_demo_router,
    demo_router_predict,
    hashed_text_features,
    write_bundle,
)
from mediator.conflict import ConflictReport
from mediator.partition import SENTINEL_GLOBAL

from conftest import (
    assert_bundles_equal,
    assert_tensors_equal,
    build_fixture_bundle,
)
from test_conflict import brute_force_conflict_ratio, _layer_map_for


def _one_hot(task, tasks):
    return RoutingWeights(
        weights={t: (1.0 if t == task else 0.0) for t in tasks},
        pretrain_weight=0.0,
        beta=1.5,
        k=1,
        ood_triggered=False,
    )


def test_c01_denoising_mass():
    rng = np.random.default_rng(1001)
    samples = rng.standard_normal(1_000_000).astype(np.float32)
    start = time.monotonic()
    kept = denoise(samples, sigma_mult=1.0).keep_ratio_actual
    elapsed = time.monotonic() - start
    expected = math.erfc(1.0 / math.sqrt(2.0))  # 0.31731...
    assert abs(kept - expected) <= 0.01, f"kept {kept:.4f} vs {expected:.4f}"
    assert elapsed < 1.0, f"denoise took {elapsed:.3f}s"
    print(f"\ncriterion 1 PASS: denoise kept {kept:.4f} (target {expected:.4f} +/- 0.01) "
          f"in {elapsed * 1000:.0f} ms")


def test_c02_conflict_oracle():
    rng = np.random.default_rng(1002)
    start = time.monotonic()
    for _ in range(200):
        n = int(rng.integers(2, 6))
        size = int(rng.integers(1, 65))
        deltas = [
            np.round(rng.normal(scale=1.0, size=size), 2).astype(np.float32)
            for _ in range(n)
        ]
        fast = layer_conflict_ratio(deltas)
        slow = brute_force_conflict_ratio(deltas)
        assert fast == slow, f"{fast} != {slow} for n={n}, size={size}"
    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"oracle comparison took {elapsed:.2f}s"
    print(f"\ncriterion 2 PASS: 200 instances match brute force exactly in {elapsed:.2f}s")


def test_c03_lossless_decomposition():
    base, experts, layer_map, plan, bundle = build_fixture_bundle(
        seed=1003, tasks=("code", "math", "qa"), n_layers=4, d=64,
        keep_ratio=1.0, threshold_mult=-1e9,
    )
    assert plan.routed_layers, "fixture must route at least one layer"
    checked = 0
    for task, expert in experts.items():
        out = reconstruct(bundle, _one_hot(task, sorted(experts)))
        for layer in plan.routed_layers:
            for name in bundle.routed[layer].mean_tensors:
                assert_tensors_equal(out.tensors[name], expert.tensors[name], name)
                checked += 1
    print(f"\ncriterion 3 PASS: {checked} routed tensors recovered bit-exactly "
          f"across {len(experts)} experts and {len(plan.routed_layers)} layers")


def test_c04_top_magnitude_optimality():
    rng = np.random.default_rng(1004)
    comparisons = 0
    for _ in range(100):
        size = int(rng.integers(8, 129))
        values = rng.normal(size=size).astype(np.float32)
        ratio = float(rng.uniform(0.05, 0.95))
        sparse = sparsify_top_magnitude(values, ratio)
        top_err = float(np.linalg.norm((values - sparse.to_dense()).astype(np.float64)))
        k = sparse.nnz
        for _ in range(100):
            idx = rng.choice(size, size=k, replace=False)
            masked = np.zeros_like(values)
            masked[idx] = values[idx]
            rand_err = float(np.linalg.norm((values - masked).astype(np.float64)))
            assert top_err <= rand_err + 1e-9
            comparisons += 1
    print(f"\ncriterion 4 PASS: top-magnitude error minimal in {comparisons} comparisons")


def test_c05_merge_plan_rule():
    per_layer = {0: 0.10, 1: 0.10, 2: 0.50}
    values = list(per_layer.values())
    mu = float(np.mean(values))
    sigma = float(np.std(values))
    report = ConflictReport(per_layer, mu, sigma, 1.0, mu + sigma, n_experts=3)
    assert report.threshold == pytest.approx(0.4219, abs=1e-4)
    plan = build_merge_plan(report, _layer_map_for(3), threshold_mult=1.0, avg_method="ties")
    assert plan.routed_layers == [2]
    assert plan.decisions[0] == Decision.average("ties")
    assert plan.decisions[1] == Decision.average("ties")
    # Attention stays averaged, in this plan and in a degenerate all-route plan.
    assert not plan.decision_for(2, "attention").is_route
    degenerate = ConflictReport({0: 0.3, 1: 0.3}, 0.3, 0.0, 1.0, 0.3, n_experts=3)
    all_route = build_merge_plan(degenerate, _layer_map_for(2), avg_method="ties")
    assert all_route.routed_layers == [0, 1]
    assert not all_route.decision_for(0, "attention").is_route
    assert not all_route.decision_for(SENTINEL_GLOBAL, "embedding").is_route
    print(f"\ncriterion 5 PASS: threshold {report.threshold:.4f}, exactly layer 2 routed; "
          f"attention averaged in all plans")


def test_c06_temperature_behavior():
    rng = np.random.default_rng(1006)
    # beta = 1 equals plain softmax.
    for _ in range(50):
        probs = rng.dirichlet(np.ones(int(rng.integers(2, 8))))
        e = np.exp(probs - probs.max())
        diff = np.max(np.abs(temperature_scale(probs, 1.0) - e / e.sum()))
        assert diff < 1e-9
    # Tiny beta concentrates on the argmax when the gap is at least 0.1.
    for _ in range(50):
        n = int(rng.integers(2, 8))
        probs = rng.uniform(0, 0.4, size=n)
        winner = int(rng.integers(0, n))
        probs[winner] = probs.max() + 0.1 + rng.uniform(0, 0.4)
        h = temperature_scale(probs, 1e-3)
        assert h[winner] >= 1 - 1e-6
    # Argmax preservation across the temperature sweep grid.
    checked = 0
    for _ in range(1000):
        probs = rng.dirichlet(np.ones(int(rng.integers(2, 8))))
        for beta in (0.1, 0.5, 1.0, 1.25, 1.5, 1.75, 2.0):
            assert int(np.argmax(temperature_scale(probs, beta))) == int(np.argmax(probs))
            checked += 1
    print(f"\ncriterion 6 PASS: softmax identity, low-beta limit, argmax kept in "
          f"{checked} scaled vectors")


def test_c07_ood_fallback():
    rng = np.random.default_rng(1007)
    for _ in range(200):
        n = int(rng.integers(2, 7))
        probs = rng.uniform(0, 1, size=n)
        probs = probs / probs.max() * rng.uniform(0.05, 0.4999)
        w = routing_weights(probs, [f"t{i}" for i in range(n)], ood_threshold=0.5)
        assert w.ood_triggered and w.pretrain_weight == 1.0
        assert all(v == 0.0 for v in w.weights.values())
    base, experts, layer_map, plan, bundle = build_fixture_bundle(
        seed=1007, n_layers=3, d=16, keep_ratio=1.0, threshold_mult=-1e9
    )
    tasks = sorted(experts)
    ood = routing_weights([0.3] * len(tasks), tasks, ood_threshold=0.5)
    out = reconstruct(bundle, ood)
    checked = 0
    for layer in plan.routed_layers:
        for name in bundle.routed[layer].mean_tensors:
            assert_tensors_equal(out.tensors[name], base.tensors[name], name)
            checked += 1
    print(f"\ncriterion 7 PASS: 200 OOD vectors fall back to pretrain; "
          f"{checked} routed tensors equal the pretrained checkpoint bit-exactly")


def test_c08_memory_accounting(tmp_path):
    # 10 layers with exactly 2 routed (c_route = 0.2 of layers), 4 experts,
    # keep ratio 0.14.
    n_layers = 10
    per_layer = {l: (0.9 if l in (3, 7) else 0.1) for l in range(n_layers)}
    values = list(per_layer.values())
    mu, sigma = float(np.mean(values)), float(np.std(values))
    report = ConflictReport(per_layer, mu, sigma, 1.0, mu + sigma, n_experts=4)

    from mediator import BundleConfig, build_bundle, partition_layers, PartitionRules
    from conftest import make_model_family

    base, experts = make_model_family(
        seed=1008, tasks=("t0", "t1", "t2", "t3"), n_layers=n_layers, d=16
    )
    layer_map = partition_layers(base, PartitionRules.default())
    plan = build_merge_plan(report, layer_map, threshold_mult=1.0, avg_method="ties")
    assert plan.routed_layers == [3, 7]
    bundle = build_bundle(
        base, experts, plan, layer_map, BundleConfig(keep_ratio=0.14, avg_method="ties")
    )
    out = tmp_path / "bundle"
    write_bundle(bundle, out)
    rep = memory_report(read_bundle(out))

    # The cost model covers averaged tensors plus sparse expert values; the
    # pretrain delta is the unmodelled slack, bounded by the keep ratio.
    modelled_payload = rep.averaged_value_bytes + rep.expert_value_bytes + rep.pretrain_value_bytes
    rel_err = abs(rep.predicted_bytes - modelled_payload) / modelled_payload
    assert rel_err <= 0.05, f"predicted off by {rel_err:.2%}"
    assert rep.index_overhead_bytes > 0
    assert rep.index_overhead_bytes == 8 * (
        (rep.expert_value_bytes + rep.pretrain_value_bytes) // 4
    )
    assert rep.actual_bytes > rep.predicted_bytes  # model optimism is visible
    print(f"\ncriterion 8 PASS: predicted {rep.predicted_bytes:.0f} B vs value payload "
          f"{modelled_payload} B ({rel_err:.2%} off); index overhead "
          f"{rep.index_overhead_bytes} B surfaced")


def test_c09_streaming_equivalence(tmp_path):
    rng = np.random.default_rng(1009)
    bundles = 0
    for case in range(20):
        seed = int(rng.integers(0, 10_000_000))
        base, experts, layer_map, plan, bundle = build_fixture_bundle(
            seed=seed,
            n_layers=int(rng.integers(2, 4)),
            d=int(rng.integers(4, 9)),
            keep_ratio=float(rng.uniform(0.1, 1.0)),
            threshold_mult=float(rng.uniform(-2.0, 1.5)),
            tasks=tuple(f"t{i}" for i in range(int(rng.integers(2, 4)))),
        )
        out = tmp_path / f"bundle{case}"
        write_bundle(bundle, out)
        tasks = sorted(experts)
        raw = rng.uniform(0, 1, size=len(tasks))
        weights = RoutingWeights(
            weights={t: float(v) for t, v in zip(tasks, raw)},
            pretrain_weight=float(rng.uniform(0, 0.5)),
            beta=1.5,
            k=len(tasks),
            ood_triggered=False,
        )
        batch = reconstruct(read_bundle(out), weights)
        for depth in (0, 1, 2, 4):
            seen = {}
            reconstruct_streaming(out, weights, lambda n, t: seen.__setitem__(n, t), depth)
            assert sorted(seen) == sorted(batch.tensors)
            for name, tensor in seen.items():
                assert_tensors_equal(tensor, batch.tensors[name], f"{case}/{depth}/{name}")
        bundles += 1
    print(f"\ncriterion 9 PASS: streaming == batch for depths 0/1/2/4 on {bundles} bundles")


def test_c10_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(1010)
    for case in range(50):
        seed = int(rng.integers(0, 10_000_000))
        _, _, _, _, bundle = build_fixture_bundle(
            seed=seed,
            n_layers=int(rng.integers(2, 4)),
            d=int(rng.integers(3, 8)),
            keep_ratio=float(rng.uniform(0.05, 1.0)),
            threshold_mult=float(rng.uniform(-2.0, 2.0)),
            tasks=tuple(f"t{i}" for i in range(int(rng.integers(2, 5)))),
            avg_method=("mean", "ties")[case % 2],
            dtype=("f32", "f16", "bf16")[case % 3],
        )
        out = tmp_path / f"bundle{case}"
        written_manifest = write_bundle(bundle, out)
        loaded = read_bundle(out)
        assert_bundles_equal(bundle, loaded)
        assert loaded.manifest.files == written_manifest.files  # digests preserved
    print("\ncriterion 10 PASS: 50 randomized bundles round-trip bit-exactly")


def test_c11_monotone_fidelity():
    grid = (0.10, 0.12, 0.14, 0.16, 0.18, 0.20)
    errors = []
    for keep in grid:
        base, experts, layer_map, plan, bundle = build_fixture_bundle(
            seed=1011, n_layers=3, d=16, keep_ratio=keep, threshold_mult=-1e9
        )
        task = sorted(experts)[0]
        out = reconstruct(bundle, _one_hot(task, sorted(experts)))
        total = 0.0
        for layer in plan.routed_layers:
            for name in bundle.routed[layer].mean_tensors:
                diff = out.tensors[name].to_f32() - experts[task].tensors[name].to_f32()
                total += float(np.sum(diff.astype(np.float64) ** 2))
        errors.append(total**0.5)
    for earlier, later in zip(errors, errors[1:]):
        assert later <= earlier + 1e-12, f"errors not monotone: {errors}"
    print(f"\ncriterion 11 PASS: one-hot error non-increasing over keep grid "
          f"{[round(e, 4) for e in errors]}")


def test_c12_end_to_end_demo(tmp_path):
    start = time.monotonic()
    rng = np.random.default_rng(1012)
    tasks = ("code", "math", "qa")
    vocab = {t: [f"{t}word{i}" for i in range(40)] for t in tasks}
    shared = [f"common{i}" for i in range(20)]

    def sample_doc(task):
        words = [
            str(rng.choice(vocab[task])) if rng.random() < 0.7 else str(rng.choice(shared))
            for _ in range(30)
        ]
        return " ".join(words)

    train_texts, train_labels, held_texts, held_labels = [], [], [], []
    for idx, task in enumerate(tasks):
        docs = [sample_doc(task) for _ in range(200)]
        train_texts += docs[:150]
        train_labels += [idx] * 150
        held_texts += docs[150:]
        held_labels += [idx] * 50

    router = train_demo_router(
        hashed_text_features(train_texts), np.array(train_labels), epochs=300, learning_rate=0.5
    )
    held_probs = demo_router_predict(router, hashed_text_features(held_texts))
    accuracy = float((held_probs.argmax(axis=1) == np.array(held_labels)).mean())
    assert accuracy >= 0.95, f"held-out accuracy {accuracy:.3f}"

    base, experts, layer_map, plan, bundle = build_fixture_bundle(
        seed=1012, tasks=tasks, n_layers=3, d=16, keep_ratio=1.0, threshold_mult=-1e9
    )
    for idx, task in enumerate(tasks):
        probs = demo_router_predict(router, hashed_text_features([sample_doc(task)]))[0]
        assert probs.max() >= 0.5, "demo sample classified as out-of-distribution"
        weights = routing_weights(probs, list(tasks), beta=1.5, k=1, renormalize=True)
        assert weights.weights[task] == 1.0
        out = reconstruct(bundle, weights)
        for layer in plan.routed_layers:
            for name in bundle.routed[layer].mean_tensors:
                assert_tensors_equal(out.tensors[name], experts[task].tensors[name], name)
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"demo took {elapsed:.1f}s"
    print(f"\ncriterion 12 PASS: router held-out accuracy {accuracy:.3f}, one-hot routing "
          f"recovers each expert bit-exactly, total {elapsed:.1f}s")
