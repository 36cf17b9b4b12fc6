"""Layer-wise sign-conflict measurement and average-vs-route planning.

For each layer, every expert contributes a denoised delta vector; a
(pair, coordinate) combination conflicts when the two entries have
opposite signs (zeros agree with everything).  The per-layer ratio d is
the conflicting fraction over all C(n, 2) pairs and all coordinates, so
it always lies in [0, 1].

The layer ratios are modelled as a Gaussian; layers with d strictly
below mean + threshold_mult * std are averaged, the rest are routed.
Attention tensors are always averaged regardless of their layer's
decision, and are excluded from the conflict pool for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .delta_ops import ArrayLike, _flat_f32, denoise, task_arithmetic
from .errors import (
    FewerThanTwoExperts,
    MissingLayerInReport,
    ShapeMismatch,
    TooFewLayers,
)
from .partition import SENTINEL_GLOBAL, LayerMap
from .tensor_store import Checkpoint

AVG_METHODS = ("mean", "ties")


@dataclass(frozen=True)
class ConflictReport:
    """Per-layer conflict ratios with their fitted Gaussian."""

    per_layer: dict[int, float]
    mu: float
    sigma: float
    threshold_mult: float
    threshold: float
    n_experts: int


@dataclass(frozen=True)
class Decision:
    """Merge decision for one layer: average (mean or ties) or route."""

    kind: str
    method: str | None = None

    @classmethod
    def average(cls, method: str) -> "Decision":
        if method not in AVG_METHODS:
            raise ValueError(f"unknown averaging method {method!r}")
        return cls("average", method)

    @classmethod
    def route(cls) -> "Decision":
        return cls("route", None)

    @property
    def is_route(self) -> bool:
        return self.kind == "route"

    def as_string(self) -> str:
        return "route" if self.is_route else f"average:{self.method}"

    @classmethod
    def from_string(cls, text: str) -> "Decision":
        if text == "route":
            return cls.route()
        prefix, _, method = text.partition(":")
        if prefix == "average" and method in AVG_METHODS:
            return cls.average(method)
        raise ValueError(f"unknown decision string {text!r}")


@dataclass(frozen=True)
class MergePlan:
    """Per-layer decisions plus the statistics that produced them."""

    decisions: dict[int, Decision]
    globals_decision: Decision
    report: ConflictReport
    n_experts: int

    def decision_for(self, layer: int, category: str) -> Decision:
        """Effective decision for one tensor.

        Attention tensors and globals are always averaged; other tensors
        follow their layer's decision.
        """
        if layer == SENTINEL_GLOBAL:
            return self.globals_decision
        if category == "attention":
            return Decision.average(self.globals_decision.method)
        try:
            return self.decisions[layer]
        except KeyError:
            raise MissingLayerInReport(f"no decision recorded for layer {layer}") from None

    @property
    def routed_layers(self) -> list[int]:
        return sorted(l for l, d in self.decisions.items() if d.is_route)


def layer_conflict_ratio(layer_deltas: Sequence[ArrayLike]) -> float:
    """Fraction of (pair, coordinate) slots with opposite nonzero signs."""
    if len(layer_deltas) < 2:
        raise FewerThanTwoExperts(
            f"conflict measurement needs >= 2 experts, got {len(layer_deltas)}"
        )
    flats = []
    shape = None
    for delta in layer_deltas:
        flat, this_shape = _flat_f32(delta)
        if shape is None:
            shape = this_shape
        elif this_shape != shape:
            raise ShapeMismatch(f"expert deltas disagree on shape: {shape} vs {this_shape}")
        flats.append(flat)
    signs = np.sign(np.stack(flats)).astype(np.int8)
    n = len(flats)
    conflicts = 0
    for i in range(n):
        for j in range(i + 1, n):
            conflicts += int(np.count_nonzero(signs[i] * signs[j] == -1))
    pairs = n * (n - 1) // 2
    return conflicts / (pairs * flats[0].size)


def fit_conflict_gaussian(d_values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of the layer ratios."""
    if len(d_values) < 2:
        raise TooFewLayers(f"need >= 2 layers to fit the conflict Gaussian, got {len(d_values)}")
    arr = np.asarray(d_values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def analyze_conflicts(
    reference: Checkpoint,
    experts: Mapping[str, Checkpoint],
    layer_map: LayerMap,
    sigma_mult: float = 1.0,
    threshold_mult: float = 1.0,
) -> ConflictReport:
    """Measure per-layer conflict ratios across the experts' deltas.

    Deltas are taken against the reference checkpoint and band-denoised
    per tensor before sign comparison.  Each layer pools all of its
    non-attention tensors into one ratio; a layer with no such tensors
    reports zero conflict.
    """
    if len(experts) < 2:
        raise FewerThanTwoExperts(f"conflict analysis needs >= 2 experts, got {len(experts)}")
    tasks = sorted(experts)
    deltas = {task: task_arithmetic(experts[task], reference) for task in tasks}
    per_layer: dict[int, float] = {}
    for layer in range(layer_map.n_layers):
        names = [
            n for n in layer_map.names_for_layer(layer) if layer_map.category(n) != "attention"
        ]
        if not names:
            per_layer[layer] = 0.0
            continue
        pooled = [
            np.concatenate(
                [denoise(deltas[task].deltas[n], sigma_mult).to_dense().reshape(-1) for n in names]
            )
            for task in tasks
        ]
        per_layer[layer] = layer_conflict_ratio(pooled)
    mu, sigma = fit_conflict_gaussian(list(per_layer.values()))
    return ConflictReport(
        per_layer=per_layer,
        mu=mu,
        sigma=sigma,
        threshold_mult=threshold_mult,
        threshold=mu + threshold_mult * sigma,
        n_experts=len(experts),
    )


def build_merge_plan(
    report: ConflictReport,
    layer_map: LayerMap,
    threshold_mult: float = 1.0,
    avg_method: str = "ties",
) -> MergePlan:
    """Decide average-vs-route per layer from the conflict report.

    A layer is averaged iff its ratio is strictly below
    mu + threshold_mult * sigma; globals are always averaged.
    """
    if avg_method not in AVG_METHODS:
        raise ValueError(f"unknown averaging method {avg_method!r}")
    threshold = report.mu + threshold_mult * report.sigma
    decisions: dict[int, Decision] = {}
    for layer in range(layer_map.n_layers):
        if layer not in report.per_layer:
            raise MissingLayerInReport(f"layer {layer} missing from conflict report")
        if report.per_layer[layer] < threshold:
            decisions[layer] = Decision.average(avg_method)
        else:
            decisions[layer] = Decision.route()
    return MergePlan(
        decisions=decisions,
        globals_decision=Decision.average(avg_method),
        report=replace(report, threshold_mult=threshold_mult, threshold=threshold),
        n_experts=report.n_experts,
    )
