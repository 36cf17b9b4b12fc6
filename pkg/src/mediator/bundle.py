"""On-disk bundle format: directory layout, manifest, memory accounting.

Layout::

    <bundle>/
      manifest.json
      averaged.safetensors                  merged tensors + globals
      routed/layer_<l>/mean.safetensors     per-layer expert mean
      routed/layer_<l>/expert_<task>.sparse.safetensors
      routed/layer_<l>/pretrain.sparse.safetensors

A sparse file stores, for each tensor T, the pair "T.indices" (uint64
flat offsets) and "T.values" (stored dtype); the dense shape comes from
the sibling mean file.  The manifest records every tensor file's byte
size and sha256, which readers verify.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .conflict import Decision
from .delta_ops import SparseDelta
from .errors import (
    DigestMismatch,
    IoFailure,
    MalformedContainer,
    UnknownFormatVersion,
)
from .jsonutil import dumps_stable
from .partition import SENTINEL_GLOBAL
from .tensor_store import (
    CHECKPOINT_DTYPES,
    DTYPE_WIDTH,
    Checkpoint,
    Tensor,
    load_checkpoint,
    narrow_f32,
    read_tensor_file,
    widen_to_f32,
    write_tensor_file,
)

FORMAT_VERSION = 1

_SPARSE_DTYPES = tuple(CHECKPOINT_DTYPES) + ("u64",)


@dataclass
class RoutedLayer:
    """Decomposition of one routed layer.

    A dense per-tensor mean over the experts, one sparse delta per
    expert against that mean, and a sparse pretrain-recovery delta
    (pretrained minus mean).
    """

    mean_tensors: dict[str, Tensor]
    expert_deltas: dict[str, dict[str, SparseDelta]]
    pretrain_delta: dict[str, SparseDelta]


@dataclass(frozen=True)
class FileEntry:
    nbytes: int
    sha256: str


@dataclass
class Manifest:
    """Bundle metadata: configuration, decisions, layer map, file table."""

    format_version: int
    tasks: list[str]
    n_layers: int
    keep_ratio: float
    sigma_mult: float
    threshold_mult: float
    avg_method: str
    lam: float
    dtype_policy: str
    decisions: dict[int, Decision]
    globals_decision: Decision
    layer_map: dict[str, tuple[int, str]]
    files: dict[str, FileEntry] = field(default_factory=dict)

    @property
    def routed_layers(self) -> list[int]:
        return sorted(l for l, d in self.decisions.items() if d.is_route)

    def to_json(self) -> str:
        layer_map = {
            name: [None if layer == SENTINEL_GLOBAL else layer, category]
            for name, (layer, category) in sorted(self.layer_map.items())
        }
        doc = {
            "format_version": self.format_version,
            "tasks": list(self.tasks),
            "n_layers": self.n_layers,
            "keep_ratio": float(self.keep_ratio),
            "sigma_mult": float(self.sigma_mult),
            "threshold_mult": float(self.threshold_mult),
            "avg_method": self.avg_method,
            "lambda": float(self.lam),
            "dtype_policy": self.dtype_policy,
            "decisions": {
                "layers": {str(l): self.decisions[l].as_string() for l in sorted(self.decisions)},
                "globals": self.globals_decision.as_string(),
            },
            "layer_map": layer_map,
            "files": {
                rel: {"bytes": entry.nbytes, "sha256": entry.sha256}
                for rel, entry in sorted(self.files.items())
            },
        }
        return dumps_stable(doc)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedContainer(f"manifest is not valid JSON: {exc}") from exc
        try:
            version = int(doc["format_version"])
            if version != FORMAT_VERSION:
                raise UnknownFormatVersion(f"unknown bundle format version {version}")
            decisions = {
                int(l): Decision.from_string(s) for l, s in doc["decisions"]["layers"].items()
            }
            layer_map = {
                name: (SENTINEL_GLOBAL if layer is None else int(layer), str(category))
                for name, (layer, category) in doc["layer_map"].items()
            }
            return cls(
                format_version=version,
                tasks=[str(t) for t in doc["tasks"]],
                n_layers=int(doc["n_layers"]),
                keep_ratio=float(doc["keep_ratio"]),
                sigma_mult=float(doc["sigma_mult"]),
                threshold_mult=float(doc["threshold_mult"]),
                avg_method=str(doc["avg_method"]),
                lam=float(doc["lambda"]),
                dtype_policy=str(doc["dtype_policy"]),
                decisions=decisions,
                globals_decision=Decision.from_string(doc["decisions"]["globals"]),
                layer_map=layer_map,
                files={
                    rel: FileEntry(int(info["bytes"]), str(info["sha256"]))
                    for rel, info in doc["files"].items()
                },
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedContainer(f"manifest is missing or corrupts a field: {exc}") from exc


@dataclass
class MediatorBundle:
    """In-memory bundle: manifest, averaged checkpoint, routed layers."""

    manifest: Manifest
    averaged: Checkpoint
    routed: dict[int, RoutedLayer]


# --- serialization ----------------------------------------------------------


def _layer_dir(layer: int) -> str:
    return f"routed/layer_{layer}"


def expert_file(layer: int, task: str) -> str:
    return f"{_layer_dir(layer)}/expert_{task}.sparse.safetensors"


def mean_file(layer: int) -> str:
    return f"{_layer_dir(layer)}/mean.safetensors"


def pretrain_file(layer: int) -> str:
    return f"{_layer_dir(layer)}/pretrain.sparse.safetensors"


def _sparse_entries(
    deltas: Mapping[str, SparseDelta], value_dtypes: Mapping[str, str]
) -> dict[str, tuple[str, tuple[int, ...], np.ndarray]]:
    entries: dict[str, tuple[str, tuple[int, ...], np.ndarray]] = {}
    for name, sd in deltas.items():
        if name.endswith(".indices") or name.endswith(".values"):
            raise MalformedContainer(
                f"tensor name {name!r} collides with sparse entry suffixes"
            )
        dtype = value_dtypes[name]
        entries[f"{name}.indices"] = ("u64", (sd.nnz,), sd.indices)
        entries[f"{name}.values"] = (dtype, (sd.nnz,), narrow_f32(sd.values, dtype))
    return entries


def _read_sparse(
    path: Path, shapes: Mapping[str, tuple[int, ...]]
) -> dict[str, SparseDelta]:
    entries, _ = read_tensor_file(path, allowed_dtypes=_SPARSE_DTYPES)
    out: dict[str, SparseDelta] = {}
    names = {n[: -len(".indices")] for n in entries if n.endswith(".indices")}
    expected = {f"{n}.indices" for n in names} | {f"{n}.values" for n in names}
    if expected != set(entries):
        raise MalformedContainer(f"{path}: stray or missing sparse entries")
    if names != set(shapes):
        raise MalformedContainer(f"{path}: sparse tensors do not match the layer mean")
    for name in sorted(names):
        idx_dtype, _, idx = entries[f"{name}.indices"]
        val_dtype, _, vals = entries[f"{name}.values"]
        if idx_dtype != "u64":
            raise MalformedContainer(f"{path}: {name}.indices must be u64")
        out[name] = SparseDelta(shapes[name], idx, widen_to_f32(vals, val_dtype))
    return out


def write_bundle(bundle: MediatorBundle, dir_path: str | Path) -> Manifest:
    """Serialize the bundle into an empty (or absent) directory.

    Fills in the manifest's file table (sizes and sha256 digests) and
    returns the completed manifest.
    """
    root = Path(dir_path)
    if root.exists():
        if not root.is_dir():
            raise IoFailure(f"{root} exists and is not a directory")
        if any(root.iterdir()):
            raise IoFailure(f"refusing to write bundle into non-empty directory {root}")
    else:
        try:
            root.mkdir(parents=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {root}: {exc}") from exc

    manifest = bundle.manifest
    files: dict[str, FileEntry] = {}

    def _emit(rel: str, entries, metadata=None) -> None:
        full = root / rel
        full.parent.mkdir(parents=True, exist_ok=True)
        write_tensor_file(full, entries, metadata)
        raw = full.read_bytes()
        files[rel] = FileEntry(len(raw), hashlib.sha256(raw).hexdigest())

    _emit(
        "averaged.safetensors",
        {name: (t.dtype, t.shape, t.data) for name, t in bundle.averaged.tensors.items()},
        bundle.averaged.metadata,
    )
    for layer in sorted(bundle.routed):
        rl = bundle.routed[layer]
        value_dtypes = {name: t.dtype for name, t in rl.mean_tensors.items()}
        _emit(
            mean_file(layer),
            {name: (t.dtype, t.shape, t.data) for name, t in rl.mean_tensors.items()},
        )
        for task in manifest.tasks:
            _emit(expert_file(layer, task), _sparse_entries(rl.expert_deltas[task], value_dtypes))
        _emit(pretrain_file(layer), _sparse_entries(rl.pretrain_delta, value_dtypes))

    manifest.files = files
    try:
        (root / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest: {exc}") from exc
    return manifest


def read_manifest(dir_path: str | Path) -> Manifest:
    path = Path(dir_path) / "manifest.json"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return Manifest.from_json(text)


def verify_file(root: Path, rel: str, entry: FileEntry) -> bytes:
    """Read one bundle file and check it against its manifest entry."""
    path = root / rel
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read bundle file {path}: {exc}") from exc
    if len(raw) != entry.nbytes or hashlib.sha256(raw).hexdigest() != entry.sha256:
        raise DigestMismatch(f"bundle file {rel} does not match its manifest digest")
    return raw


def read_bundle(dir_path: str | Path) -> MediatorBundle:
    """Load and integrity-check a bundle directory."""
    root = Path(dir_path)
    manifest = read_manifest(root)
    for rel, entry in manifest.files.items():
        verify_file(root, rel, entry)

    averaged = load_checkpoint(root / "averaged.safetensors")
    routed: dict[int, RoutedLayer] = {}
    for layer in manifest.routed_layers:
        mean_entries, _ = read_tensor_file(root / mean_file(layer))
        means = {name: Tensor(d, s, a) for name, (d, s, a) in mean_entries.items()}
        shapes = {name: t.shape for name, t in means.items()}
        expert_deltas = {
            task: _read_sparse(root / expert_file(layer, task), shapes)
            for task in manifest.tasks
        }
        pretrain = _read_sparse(root / pretrain_file(layer), shapes)
        routed[layer] = RoutedLayer(means, expert_deltas, pretrain)
    return MediatorBundle(manifest, averaged, routed)


# --- memory accounting ------------------------------------------------------


@dataclass(frozen=True)
class MemoryReport:
    """Predicted vs. actual storage for a written bundle.

    ``predicted_bytes`` applies the cost model
    m_theta * (c_avg + c_route * n_tau * keep_ratio), where c_avg and
    c_route are the dense-byte fractions of averaged tensors and routed
    means.  The model counts averaged tensors plus sparse expert values;
    it ignores the dense routed means, the pretrain delta and the index
    arrays, so those are surfaced separately to make the gap measurable.
    """

    m_theta_bytes: int
    c_avg: float
    c_route: float
    n_tau: int
    keep_ratio: float
    predicted_bytes: float
    actual_bytes: int
    router_bytes: int
    averaged_value_bytes: int
    routed_mean_value_bytes: int
    expert_value_bytes: int
    pretrain_value_bytes: int
    index_overhead_bytes: int
    container_overhead_bytes: int

    def to_dict(self) -> dict:
        return {
            "m_theta_bytes": self.m_theta_bytes,
            "c_avg": self.c_avg,
            "c_route": self.c_route,
            "n_tau": self.n_tau,
            "keep_ratio": self.keep_ratio,
            "predicted_bytes": self.predicted_bytes,
            "actual_bytes": self.actual_bytes,
            "router_bytes": self.router_bytes,
            "averaged_value_bytes": self.averaged_value_bytes,
            "routed_mean_value_bytes": self.routed_mean_value_bytes,
            "expert_value_bytes": self.expert_value_bytes,
            "pretrain_value_bytes": self.pretrain_value_bytes,
            "index_overhead_bytes": self.index_overhead_bytes,
            "container_overhead_bytes": self.container_overhead_bytes,
        }


def predicted_bytes(
    m_theta: float, c_avg: float, c_route: float, n_tau: int, keep_ratio: float
) -> float:
    """Storage predicted by the cost model, in the same unit as m_theta."""
    return m_theta * (c_avg + c_route * n_tau * keep_ratio)


def memory_report(bundle: MediatorBundle, router_bytes: int = 0) -> MemoryReport:
    """Account a written bundle's bytes against the cost model."""
    manifest = bundle.manifest
    if not manifest.files:
        raise ValueError("memory_report needs a written bundle with a file table")
    averaged_value = sum(t.nbytes for t in bundle.averaged.tensors.values())
    mean_value = 0
    expert_value = 0
    pretrain_value = 0
    index_bytes = 0
    for rl in bundle.routed.values():
        widths = {name: DTYPE_WIDTH[t.dtype] for name, t in rl.mean_tensors.items()}
        mean_value += sum(t.nbytes for t in rl.mean_tensors.values())
        for deltas in rl.expert_deltas.values():
            for name, sd in deltas.items():
                expert_value += sd.nnz * widths[name]
                index_bytes += sd.nnz * DTYPE_WIDTH["u64"]
        for name, sd in rl.pretrain_delta.items():
            pretrain_value += sd.nnz * widths[name]
            index_bytes += sd.nnz * DTYPE_WIDTH["u64"]
    m_theta = averaged_value + mean_value
    if m_theta == 0:
        raise ValueError("bundle holds no tensor data")
    c_avg = averaged_value / m_theta
    c_route = mean_value / m_theta
    actual = sum(entry.nbytes for entry in manifest.files.values())
    payload = averaged_value + mean_value + expert_value + pretrain_value + index_bytes
    return MemoryReport(
        m_theta_bytes=m_theta,
        c_avg=c_avg,
        c_route=c_route,
        n_tau=len(manifest.tasks),
        keep_ratio=manifest.keep_ratio,
        predicted_bytes=predicted_bytes(
            m_theta, c_avg, c_route, len(manifest.tasks), manifest.keep_ratio
        ),
        actual_bytes=actual,
        router_bytes=router_bytes,
        averaged_value_bytes=averaged_value,
        routed_mean_value_bytes=mean_value,
        expert_value_bytes=expert_value,
        pretrain_value_bytes=pretrain_value,
        index_overhead_bytes=index_bytes,
        container_overhead_bytes=actual - payload,
    )
