"""Materialize a dense checkpoint from a bundle and routing weights.

Each routed tensor is rebuilt as mean + sum(weight_task * delta_task)
+ pretrain_weight * pretrain_delta, with deltas applied in manifest
task order and the pretrain delta last, all in float32; averaged
tensors are copied verbatim.  Zero-weight tasks are skipped, so only
selected expert files are touched.

The streaming variant delivers tensors to a sink callback in ascending
layer order and then globals, while a single reader thread prefetches
up to prefetch_depth upcoming routed-layer directories (depth 0
degrades to plain read-then-merge).  Its output is elementwise
identical to the batch path.
"""

from __future__ import annotations

import queue
import threading
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .bundle import (
    Manifest,
    MediatorBundle,
    RoutedLayer,
    _read_sparse,
    expert_file,
    mean_file,
    pretrain_file,
    read_manifest,
    verify_file,
)
from .delta_ops import SparseDelta
from .errors import MalformedContainer, UnknownTask
from .routing import RoutingWeights
from .tensor_store import Checkpoint, Tensor, load_checkpoint, read_tensor_file

# Receives (tensor name, tensor) exactly once per tensor, in ascending
# layer order and then globals, on the caller's thread.
LayerSink = Callable[[str, Tensor], None]


def _check_tasks(manifest: Manifest, weights: RoutingWeights) -> list[str]:
    unknown = set(weights.weights) - set(manifest.tasks)
    if unknown:
        raise UnknownTask(f"weights reference tasks not in the bundle: {sorted(unknown)}")
    return [t for t in manifest.tasks if weights.weights.get(t, 0.0) != 0.0]


def _merge_tensor(
    mean: Tensor,
    per_task: list[tuple[float, SparseDelta]],
    pretrain: tuple[float, SparseDelta] | None,
) -> Tensor:
    acc = mean.to_f32().copy()
    for weight, sd in per_task:
        acc += np.float32(weight) * sd.to_dense()
    if pretrain is not None:
        weight, sd = pretrain
        acc += np.float32(weight) * sd.to_dense()
    return Tensor.from_f32(acc, mean.dtype)


def _merge_layer(
    rl: RoutedLayer,
    weights: RoutingWeights,
    active_tasks: list[str],
) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name in sorted(rl.mean_tensors):
        per_task = [
            (weights.weights[task], rl.expert_deltas[task][name]) for task in active_tasks
        ]
        pretrain = None
        if weights.pretrain_weight != 0.0:
            pretrain = (weights.pretrain_weight, rl.pretrain_delta[name])
        out[name] = _merge_tensor(rl.mean_tensors[name], per_task, pretrain)
    return out


def reconstruct(bundle: MediatorBundle, weights: RoutingWeights) -> Checkpoint:
    """Dense checkpoint from an in-memory bundle and mixing weights."""
    active = _check_tasks(bundle.manifest, weights)
    tensors: dict[str, Tensor] = dict(bundle.averaged.tensors)
    for layer in sorted(bundle.routed):
        tensors.update(_merge_layer(bundle.routed[layer], weights, active))
    ordered = {name: tensors[name] for name in sorted(tensors)}
    return Checkpoint(ordered, dict(bundle.averaged.metadata))


# --- streaming ---------------------------------------------------------------


def _load_routed_layer(
    root: Path,
    manifest: Manifest,
    layer: int,
    active_tasks: list[str],
    need_pretrain: bool,
) -> RoutedLayer:
    """Read and digest-check one routed layer's files (selected experts only)."""
    for rel in [mean_file(layer)] + [expert_file(layer, t) for t in active_tasks] + (
        [pretrain_file(layer)] if need_pretrain else []
    ):
        entry = manifest.files.get(rel)
        if entry is None:
            raise MalformedContainer(f"manifest has no file table entry for {rel}")
        verify_file(root, rel, entry)
    mean_entries, _ = read_tensor_file(root / mean_file(layer))
    means = {name: Tensor(d, s, a) for name, (d, s, a) in mean_entries.items()}
    shapes = {name: t.shape for name, t in means.items()}
    expert_deltas = {
        task: _read_sparse(root / expert_file(layer, task), shapes) for task in active_tasks
    }
    pretrain = _read_sparse(root / pretrain_file(layer), shapes) if need_pretrain else {}
    return RoutedLayer(means, expert_deltas, pretrain)


def _routed_layer_stream(
    root: Path,
    manifest: Manifest,
    routed_layers: list[int],
    active_tasks: list[str],
    need_pretrain: bool,
    prefetch_depth: int,
) -> Iterator[RoutedLayer]:
    """Yield routed layers in ascending order, reading ahead when asked.

    With depth >= 1 a single reader thread runs ahead of the caller, but
    never holds more than ``prefetch_depth`` undelivered layers (loaded
    or loading): while layer l is being merged, only layers l+1 through
    l+prefetch_depth may be read.
    """
    if prefetch_depth == 0:
        for layer in routed_layers:
            yield _load_routed_layer(root, manifest, layer, active_tasks, need_pretrain)
        return

    work: queue.Queue = queue.Queue()
    permits = threading.Semaphore(prefetch_depth)
    stop = threading.Event()
    done = object()

    def producer() -> None:
        try:
            for layer in routed_layers:
                while not permits.acquire(timeout=0.1):
                    if stop.is_set():
                        return
                if stop.is_set():
                    return
                work.put(_load_routed_layer(root, manifest, layer, active_tasks, need_pretrain))
            work.put(done)
        except BaseException as exc:  # surfaced on the consuming call
            work.put(exc)

    reader = threading.Thread(target=producer, name="bundle-prefetch", daemon=True)
    reader.start()
    try:
        while True:
            item = work.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            permits.release()  # the reader may now fetch one more layer
            yield item
    finally:
        stop.set()
        reader.join(timeout=5.0)


def reconstruct_streaming(
    bundle_dir: str | Path,
    weights: RoutingWeights,
    sink: LayerSink,
    prefetch_depth: int = 1,
) -> None:
    """Stream the reconstruction to a sink, layer by layer, then globals."""
    if prefetch_depth < 0:
        raise ValueError(f"prefetch_depth must be >= 0, got {prefetch_depth}")
    root = Path(bundle_dir)
    manifest = read_manifest(root)
    active = _check_tasks(manifest, weights)
    need_pretrain = weights.pretrain_weight != 0.0

    averaged_entry = manifest.files.get("averaged.safetensors")
    if averaged_entry is None:
        raise MalformedContainer("manifest has no file table entry for averaged.safetensors")
    verify_file(root, "averaged.safetensors", averaged_entry)
    averaged = load_checkpoint(root / "averaged.safetensors")

    layer_names: dict[int, list[str]] = {}
    global_names: list[str] = []
    for name in sorted(manifest.layer_map):
        layer, _ = manifest.layer_map[name]
        if layer < 0:
            global_names.append(name)
        else:
            layer_names.setdefault(layer, []).append(name)

    routed_set = set(manifest.routed_layers)
    stream = _routed_layer_stream(
        root, manifest, manifest.routed_layers, active, need_pretrain, prefetch_depth
    )
    for layer in range(manifest.n_layers):
        merged: dict[str, Tensor] = {}
        if layer in routed_set:
            merged = _merge_layer(next(stream), weights, active)
        for name in layer_names.get(layer, []):
            if name in merged:
                sink(name, merged[name])
            else:
                sink(name, averaged.tensors[name])
    for name in global_names:
        sink(name, averaged.tensors[name])
