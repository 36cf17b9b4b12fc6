"""Checkpoint-level model merging toolkit.

Pipeline: measure per-layer sign conflicts between finetuned experts,
average the quiet layers, decompose the noisy ones into a dense mean
plus sparse per-expert deltas, store everything as a bundle, and
rebuild dense checkpoints from routing weights on demand.
"""

from .bundle import (
    FORMAT_VERSION,
    Manifest,
    MediatorBundle,
    MemoryReport,
    RoutedLayer,
    memory_report,
    predicted_bytes,
    read_bundle,
    write_bundle,
)
from .conflict import (
    ConflictReport,
    Decision,
    MergePlan,
    analyze_conflicts,
    build_merge_plan,
    fit_conflict_gaussian,
    layer_conflict_ratio,
)
from .delta_ops import (
    DeltaCheckpoint,
    SparseDelta,
    UpdateStats,
    apply_band,
    denoise,
    densify,
    estimate_update_stats,
    sparsify_top_magnitude,
    task_arithmetic,
)
from .merge import (
    BundleConfig,
    average_mean,
    average_ties,
    build_bundle,
    decompose_routed_layer,
)
from .partition import SENTINEL_GLOBAL, LayerMap, PartitionRules, partition_layers
from .reconstruct import LayerSink, reconstruct, reconstruct_streaming
from .routing import (
    DemoRouter,
    RoutingWeights,
    demo_router_predict,
    hashed_text_features,
    routing_weights,
    select_topk,
    temperature_scale,
    train_demo_router,
)
from .tensor_store import (
    Checkpoint,
    Tensor,
    checkpoint_digest,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "BundleConfig",
    "Checkpoint",
    "ConflictReport",
    "Decision",
    "DeltaCheckpoint",
    "DemoRouter",
    "FORMAT_VERSION",
    "LayerMap",
    "LayerSink",
    "Manifest",
    "MediatorBundle",
    "MemoryReport",
    "MergePlan",
    "PartitionRules",
    "RoutedLayer",
    "RoutingWeights",
    "SENTINEL_GLOBAL",
    "SparseDelta",
    "Tensor",
    "UpdateStats",
    "analyze_conflicts",
    "apply_band",
    "average_mean",
    "average_ties",
    "build_bundle",
    "build_merge_plan",
    "checkpoint_digest",
    "decompose_routed_layer",
    "demo_router_predict",
    "denoise",
    "densify",
    "estimate_update_stats",
    "fit_conflict_gaussian",
    "hashed_text_features",
    "layer_conflict_ratio",
    "load_checkpoint",
    "memory_report",
    "partition_layers",
    "predicted_bytes",
    "read_bundle",
    "reconstruct",
    "reconstruct_streaming",
    "routing_weights",
    "save_checkpoint",
    "select_topk",
    "sparsify_top_magnitude",
    "task_arithmetic",
    "temperature_scale",
    "train_demo_router",
    "write_bundle",
]
