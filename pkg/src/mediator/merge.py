"""Execute a merge plan: average low-conflict tensors, decompose the rest.

Averaging comes in two flavours:

* ``mean``: plain elementwise average over the experts;
* ``ties``: band-denoise each expert's delta against the pretrained
  base, elect a per-coordinate sign by the sum of delta values, average
  only the entries agreeing with the elected sign, and add the merged
  delta (scaled by lambda) back onto the base.

Routed layers are decomposed into a dense per-tensor mean over the
experts, top-magnitude-sparsified per-expert deltas against that mean,
and a sparse pretrain-recovery delta.  Means and sums accumulate in
float64 and are rounded to float32 once, so averaging n identical
tensors reproduces them bit-exactly.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .bundle import Manifest, MediatorBundle, RoutedLayer, FORMAT_VERSION
from .conflict import AVG_METHODS, MergePlan
from .delta_ops import (
    ArrayLike,
    SparseDelta,
    _flat_f32,
    denoise,
    sparsify_top_magnitude,
)
from .errors import (
    InconsistentExpertSet,
    InvalidRatio,
    NameSetMismatch,
    ShapeMismatch,
)
from .partition import LayerMap
from .tensor_store import Checkpoint, Tensor, narrow_f32, widen_to_f32


@dataclass(frozen=True)
class BundleConfig:
    """Knobs for bundle construction.

    ``lam`` is the task-vector scaling coefficient (JSON key "lambda").
    ``dtype_policy`` is "preserve" (store results in each tensor's
    original dtype) or "force_f32".
    """

    keep_ratio: float = 0.14
    sigma_mult: float = 1.0
    threshold_mult: float = 1.0
    avg_method: str = "ties"
    lam: float = 1.0
    dtype_policy: str = "preserve"

    def __post_init__(self) -> None:
        if not 0 < self.keep_ratio <= 1:
            raise InvalidRatio(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.sigma_mult < 0:
            raise ValueError(f"sigma_mult must be >= 0, got {self.sigma_mult}")
        if self.avg_method not in AVG_METHODS:
            raise ValueError(f"unknown avg_method {self.avg_method!r}")
        if self.dtype_policy not in ("preserve", "force_f32"):
            raise ValueError(f"unknown dtype_policy {self.dtype_policy!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "BundleConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BundleConfig":
        known = {"keep_ratio", "sigma_mult", "threshold_mult", "avg_method", "lambda", "dtype_policy"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: doc[k] for k in known - {"lambda"} if k in doc}
        if "lambda" in doc:
            kwargs["lam"] = doc["lambda"]
        return cls(**kwargs)


def _gather_f32(layers: Sequence[ArrayLike]) -> list[np.ndarray]:
    if not layers:
        raise ShapeMismatch("need at least one tensor to average")
    arrs = []
    shape = None
    for t in layers:
        flat, this_shape = _flat_f32(t)
        if shape is None:
            shape = this_shape
        elif this_shape != shape:
            raise ShapeMismatch(f"tensors disagree on shape: {shape} vs {this_shape}")
        arrs.append(flat.reshape(this_shape))
    return arrs


def _mean_f32(arrs: Sequence[np.ndarray]) -> np.ndarray:
    acc = arrs[0].astype(np.float64)
    for a in arrs[1:]:
        acc += a
    return (acc / len(arrs)).astype(np.float32)


def average_mean(layers: Sequence[ArrayLike]) -> Tensor:
    """Elementwise arithmetic mean of the experts' tensors."""
    return Tensor.from_f32(_mean_f32(_gather_f32(layers)), "f32")


def average_ties(
    base: ArrayLike, denoised_deltas: Sequence[SparseDelta], lam: float = 1.0
) -> Tensor:
    """Sign-elected disjoint-mean merge of denoised deltas onto a base.

    Per coordinate: the elected sign is the sign of the sum of delta
    values; the merged delta is the mean of the values agreeing with
    that sign (absent and zero entries excluded).  Coordinates where the
    sum is zero, or where every expert is absent, merge to zero.
    """
    base_flat, shape = _flat_f32(base)
    for sd in denoised_deltas:
        if sd.shape != shape:
            raise ShapeMismatch(f"delta shape {sd.shape} does not match base {shape}")
    if not denoised_deltas:
        return Tensor.from_f32(base_flat.reshape(shape), "f32")
    stacked = np.stack([sd.to_dense().reshape(-1) for sd in denoised_deltas])
    total = stacked.sum(axis=0, dtype=np.float64)
    elected = np.sign(total)
    agrees = (np.sign(stacked) == elected) & (stacked != 0)
    count = agrees.sum(axis=0)
    agreeing_sum = np.where(agrees, stacked, 0.0).sum(axis=0, dtype=np.float64)
    merged = np.divide(
        agreeing_sum, count, out=np.zeros_like(agreeing_sum), where=count > 0
    ).astype(np.float32)
    out = base_flat + np.float32(lam) * merged
    return Tensor.from_f32(out.reshape(shape), "f32")


def decompose_routed_layer(
    expert_tensors: Mapping[str, Mapping[str, ArrayLike]],
    pretrained_tensors: Mapping[str, ArrayLike],
    keep_ratio: float,
) -> RoutedLayer:
    """Split a routed layer into mean, expert deltas and pretrain delta.

    The mean is taken over the experts; each expert's delta and the
    pretrained checkpoint's delta are measured against that mean and
    top-magnitude-sparsified at ``keep_ratio``.
    """
    if not expert_tensors:
        raise InconsistentExpertSet("decomposition needs at least one expert")
    if not 0 < keep_ratio <= 1:
        raise InvalidRatio(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    tasks = sorted(expert_tensors)
    names = sorted(pretrained_tensors)
    for task in tasks:
        if sorted(expert_tensors[task]) != names:
            raise InconsistentExpertSet(f"expert {task!r} does not provide every routed tensor")
    mean_tensors: dict[str, Tensor] = {}
    expert_deltas: dict[str, dict[str, SparseDelta]] = {task: {} for task in tasks}
    pretrain_delta: dict[str, SparseDelta] = {}
    for name in names:
        per_expert = _gather_f32([expert_tensors[task][name] for task in tasks])
        pre_flat, pre_shape = _flat_f32(pretrained_tensors[name])
        if pre_shape != per_expert[0].shape:
            raise ShapeMismatch(f"tensor {name!r}: pretrained shape {pre_shape} mismatch")
        mean = _mean_f32(per_expert)
        mean_tensors[name] = Tensor.from_f32(mean, "f32")
        for task, arr in zip(tasks, per_expert):
            expert_deltas[task][name] = sparsify_top_magnitude(arr - mean, keep_ratio)
        pretrain_delta[name] = sparsify_top_magnitude(
            pre_flat.reshape(pre_shape) - mean, keep_ratio
        )
    return RoutedLayer(mean_tensors, expert_deltas, pretrain_delta)


# --- bundle assembly ---------------------------------------------------------


def _validate_inputs(
    pretrained: Checkpoint, experts: Mapping[str, Checkpoint], layer_map: LayerMap
) -> None:
    base_names = set(pretrained.tensors)
    for task, ckpt in experts.items():
        names = set(ckpt.tensors)
        if names != base_names:
            raise InconsistentExpertSet(
                f"expert {task!r} tensor names differ from the base: "
                f"{sorted(names ^ base_names)[:5]}"
            )
        for name in base_names:
            if ckpt.tensors[name].shape != pretrained.tensors[name].shape:
                raise ShapeMismatch(
                    f"expert {task!r} tensor {name!r}: "
                    f"{ckpt.tensors[name].shape} vs {pretrained.tensors[name].shape}"
                )
    unmapped = base_names - set(layer_map.entries)
    if unmapped:
        raise NameSetMismatch(f"layer map does not cover tensors: {sorted(unmapped)[:5]}")


def _quantize_sparse(sd: SparseDelta, dtype: str) -> SparseDelta:
    if dtype == "f32":
        return sd
    return SparseDelta(sd.shape, sd.indices, widen_to_f32(narrow_f32(sd.values, dtype), dtype))


def _run_jobs(jobs: list[Callable[[], None]], threads: int) -> None:
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for future in [pool.submit(job) for job in jobs]:
                future.result()
    else:
        for job in jobs:
            job()


def build_bundle(
    pretrained: Checkpoint,
    experts: Mapping[str, Checkpoint],
    plan: MergePlan,
    layer_map: LayerMap,
    config: BundleConfig,
    threads: int = 1,
) -> MediatorBundle:
    """Apply the merge plan to the checkpoints and assemble a bundle.

    Tensors with an average decision (including attention tensors inside
    routed layers and all globals) land in the averaged checkpoint; the
    remaining tensors of each routed layer are decomposed.  Results are
    narrowed to their storage dtype here so that serialization is pure.
    """
    if not experts:
        raise InconsistentExpertSet("bundle needs at least one expert")
    for task in experts:
        if not task or not all(c.isalnum() or c in "._-" for c in task):
            raise ValueError(f"task name {task!r} is not filesystem-safe")
    _validate_inputs(pretrained, experts, layer_map)
    tasks = sorted(experts)

    def target_dtype(name: str) -> str:
        if config.dtype_policy == "force_f32":
            return "f32"
        return pretrained.tensors[name].dtype

    averaged: dict[str, Tensor] = {}
    routed: dict[int, RoutedLayer] = {}

    def merge_average(name: str, method: str) -> None:
        if method == "mean":
            merged = average_mean([experts[task].tensors[name] for task in tasks])
        else:
            base = pretrained.tensors[name]
            base_f32 = base.to_f32()
            deltas = [
                denoise(experts[task].tensors[name].to_f32() - base_f32, config.sigma_mult)
                for task in tasks
            ]
            merged = average_ties(base, deltas, config.lam)
        averaged[name] = Tensor.from_f32(merged.to_f32(), target_dtype(name))

    def decompose_layer(layer: int, names: list[str]) -> None:
        rl = decompose_routed_layer(
            {task: {n: experts[task].tensors[n] for n in names} for task in tasks},
            {n: pretrained.tensors[n] for n in names},
            config.keep_ratio,
        )
        for name in names:
            dtype = target_dtype(name)
            rl.mean_tensors[name] = Tensor.from_f32(rl.mean_tensors[name].to_f32(), dtype)
            for task in tasks:
                rl.expert_deltas[task][name] = _quantize_sparse(rl.expert_deltas[task][name], dtype)
            rl.pretrain_delta[name] = _quantize_sparse(rl.pretrain_delta[name], dtype)
        routed[layer] = rl

    average_jobs: list[Callable[[], None]] = []
    routed_names: dict[int, list[str]] = {}
    for name in sorted(pretrained.tensors):
        layer, category = layer_map.entries[name]
        decision = plan.decision_for(layer, category)
        if decision.is_route:
            routed_names.setdefault(layer, []).append(name)
        else:
            average_jobs.append(lambda n=name, m=decision.method: merge_average(n, m))
    decompose_jobs: list[Callable[[], None]] = [
        lambda l=layer, ns=names: decompose_layer(l, ns)
        for layer, names in sorted(routed_names.items())
    ]
    _run_jobs(average_jobs + decompose_jobs, threads)
    for layer in plan.routed_layers:
        routed.setdefault(layer, RoutedLayer({}, {task: {} for task in tasks}, {}))

    manifest = Manifest(
        format_version=FORMAT_VERSION,
        tasks=tasks,
        n_layers=layer_map.n_layers,
        keep_ratio=config.keep_ratio,
        sigma_mult=config.sigma_mult,
        threshold_mult=plan.report.threshold_mult,
        avg_method=plan.globals_decision.method,
        lam=config.lam,
        dtype_policy=config.dtype_policy,
        decisions=dict(plan.decisions),
        globals_decision=plan.globals_decision,
        layer_map=dict(layer_map.entries),
    )
    ordered = {name: averaged[name] for name in sorted(averaged)}
    return MediatorBundle(
        manifest=manifest,
        averaged=Checkpoint(ordered, dict(pretrained.metadata)),
        routed=routed,
    )
