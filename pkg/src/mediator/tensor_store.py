"""Checkpoint I/O in the safetensors container format.

The container layout is: an 8-byte little-endian unsigned header length,
a UTF-8 JSON header mapping tensor names to ``{"dtype", "shape",
"data_offsets"}`` (plus an optional ``"__metadata__"`` string map), then
the raw little-endian tensor buffers, contiguous and in header order.

Supported checkpoint dtypes are f32, f16 and bf16.  numpy has no native
bfloat16, so bf16 tensors are held as their raw uint16 bit patterns and
converted to/from float32 on demand (round-to-nearest-even on narrowing).
All arithmetic elsewhere in the toolkit happens in float32; the stored
dtype only controls serialization.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import IoFailure, MalformedContainer, UnsupportedDtype

CHECKPOINT_DTYPES = ("f32", "f16", "bf16")

DTYPE_WIDTH = {"f32": 4, "f16": 2, "bf16": 2, "u64": 8}

_HEADER_NAME = {"f32": "F32", "f16": "F16", "bf16": "BF16", "u64": "U64"}
_CODE_FOR_HEADER = {v: k for k, v in _HEADER_NAME.items()}

# Storage-form numpy dtypes, explicitly little-endian.
_STORAGE_DTYPE = {
    "f32": np.dtype("<f4"),
    "f16": np.dtype("<f2"),
    "bf16": np.dtype("<u2"),
    "u64": np.dtype("<u8"),
}

_MAX_HEADER_BYTES = 100 * 1024 * 1024


# --- bf16 <-> f32 -----------------------------------------------------------


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    """Widen raw bf16 bit patterns (uint16) to float32 exactly."""
    bits = np.asarray(bits, dtype=np.uint16)
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Narrow float32 to bf16 bit patterns with round-to-nearest-even."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    u = values.view(np.uint32)
    rounded = u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))
    bits = (rounded >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        sign = ((u >> np.uint32(16)) & np.uint32(0x8000)).astype(np.uint16)
        bits = np.where(nan, sign | np.uint16(0x7FC0), bits)
    return bits


def widen_to_f32(storage: np.ndarray, dtype: str) -> np.ndarray:
    """Convert a storage-form array of the given dtype tag to float32."""
    if dtype == "f32":
        return np.asarray(storage, dtype=np.float32)
    if dtype == "f16":
        return np.asarray(storage, dtype=np.float16).astype(np.float32)
    if dtype == "bf16":
        return bf16_to_f32(storage)
    raise UnsupportedDtype(f"cannot widen dtype {dtype!r} to f32")


def narrow_f32(values: np.ndarray, dtype: str) -> np.ndarray:
    """Convert float32 values to the storage form of the given dtype tag."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    if dtype == "f32":
        return values
    if dtype == "f16":
        return values.astype(np.float16)
    if dtype == "bf16":
        return f32_to_bf16(values)
    raise UnsupportedDtype(f"cannot narrow f32 to dtype {dtype!r}")


# --- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class Tensor:
    """A named dense array in storage form.

    ``data`` holds float32/float16 natively and bf16 as uint16 bit
    patterns; it is made read-only on construction.
    """

    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.dtype not in CHECKPOINT_DTYPES:
            raise UnsupportedDtype(f"unsupported tensor dtype {self.dtype!r}")
        shape = tuple(int(d) for d in self.shape)
        if any(d < 1 for d in shape):
            raise MalformedContainer(f"tensor shape {shape} has a dimension < 1")
        arr = np.ascontiguousarray(self.data, dtype=_STORAGE_DTYPE[self.dtype])
        if arr.shape != shape:
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise MalformedContainer(
                    f"buffer holds {arr.size} elements but shape {shape} "
                    f"needs {int(np.prod(shape, dtype=np.int64))}"
                )
            arr = arr.reshape(shape)
        view = arr.view()
        view.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", view)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        return self.numel * DTYPE_WIDTH[self.dtype]

    def to_f32(self) -> np.ndarray:
        """Return the values as float32 (exact widening)."""
        return widen_to_f32(self.data, self.dtype)

    @classmethod
    def from_f32(cls, values: np.ndarray, dtype: str = "f32") -> "Tensor":
        """Build a tensor by narrowing float32 values to ``dtype``."""
        values = np.asarray(values, dtype=np.float32)
        return cls(dtype, values.shape, narrow_f32(values, dtype))


@dataclass
class Checkpoint:
    """An ordered map of named tensors plus free-form string metadata."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        for name in self.tensors:
            if not name:
                raise MalformedContainer("tensor names must be non-empty")
        for key, value in self.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise MalformedContainer("metadata must map strings to strings")

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)


def checkpoint_digest(ckpt: Checkpoint) -> str:
    """Content hash over tensor names, dtypes, shapes and buffers."""
    h = hashlib.sha256()
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        h.update(name.encode("utf-8"))
        h.update(t.dtype.encode("ascii"))
        h.update(repr(t.shape).encode("ascii"))
        h.update(t.data.tobytes())
    return h.hexdigest()


# --- low-level container codec ----------------------------------------------

Entry = tuple[str, tuple[int, ...], np.ndarray]  # (dtype tag, shape, storage array)


def write_tensor_file(
    path: str | Path,
    entries: Mapping[str, Entry],
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Write named storage arrays as a safetensors container.

    Entries are laid out in lexicographic name order with contiguous
    offsets; the header is padded with spaces to an 8-byte boundary so
    buffers start aligned.
    """
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    ordered: list[tuple[str, np.ndarray]] = []
    offset = 0
    for name in sorted(entries):
        dtype, shape, arr = entries[name]
        if dtype not in _HEADER_NAME:
            raise UnsupportedDtype(f"cannot serialize dtype {dtype!r}")
        arr = np.ascontiguousarray(arr, dtype=_STORAGE_DTYPE[dtype])
        nbytes = arr.nbytes
        header[name] = {
            "dtype": _HEADER_NAME[dtype],
            "shape": [int(d) for d in shape],
            "data_offsets": [offset, offset + nbytes],
        }
        ordered.append((name, arr))
        offset += nbytes
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    blob += b" " * (-(8 + len(blob)) % 8)
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for _, arr in ordered:
                f.write(arr.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _parse_header(raw: bytes) -> dict[str, object]:
    def reject_duplicates(pairs):
        out = {}
        for key, value in pairs:
            if key in out:
                raise MalformedContainer(f"duplicate header key {key!r}")
            out[key] = value
        return out

    try:
        parsed = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except MalformedContainer:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedContainer(f"invalid container header: {exc}") from exc
    if not isinstance(parsed, dict):
        raise MalformedContainer("container header must be a JSON object")
    return parsed


def read_tensor_file(
    path: str | Path,
    allowed_dtypes: Iterable[str] = CHECKPOINT_DTYPES,
) -> tuple[dict[str, Entry], dict[str, str]]:
    """Read a safetensors container into storage arrays.

    Returns ``(entries, metadata)`` with entries keyed in lexicographic
    name order.  Enforces the format contract strictly: declared offsets
    must tile the data section exactly.
    """
    allowed = set(allowed_dtypes)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8:
        raise MalformedContainer(f"{path}: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len > len(raw) - 8 or header_len > _MAX_HEADER_BYTES:
        raise MalformedContainer(f"{path}: declared header length {header_len} is impossible")
    header = _parse_header(raw[8 : 8 + header_len])
    payload = raw[8 + header_len :]

    metadata_obj = header.pop("__metadata__", {})
    if not isinstance(metadata_obj, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata_obj.items()
    ):
        raise MalformedContainer(f"{path}: __metadata__ must map strings to strings")

    spans: list[tuple[int, int, str]] = []
    entries: dict[str, Entry] = {}
    for name in sorted(header):
        info = header[name]
        if not isinstance(info, dict):
            raise MalformedContainer(f"{path}: entry {name!r} is not an object")
        try:
            dtype_name = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            start, end = (int(v) for v in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedContainer(f"{path}: entry {name!r} is malformed: {exc}") from exc
        code = _CODE_FOR_HEADER.get(dtype_name)
        if code is None or code not in allowed:
            raise UnsupportedDtype(f"{path}: tensor {name!r} has unsupported dtype {dtype_name!r}")
        if any(d < 0 for d in shape):
            raise MalformedContainer(f"{path}: tensor {name!r} has a negative dimension")
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        expected = numel * DTYPE_WIDTH[code]
        if not (0 <= start <= end <= len(payload)) or end - start != expected:
            raise MalformedContainer(
                f"{path}: tensor {name!r} declares {end - start} bytes, expected {expected}"
            )
        spans.append((start, end, name))
        arr = np.frombuffer(payload, dtype=_STORAGE_DTYPE[code], count=numel, offset=start)
        entries[name] = (code, shape, arr.reshape(shape))

    spans.sort()
    cursor = 0
    for start, end, name in spans:
        if start != cursor:
            raise MalformedContainer(f"{path}: buffer for {name!r} is not contiguous")
        cursor = end
    if cursor != len(payload):
        raise MalformedContainer(f"{path}: {len(payload) - cursor} trailing bytes after tensor data")
    return entries, dict(metadata_obj)


# --- checkpoint-level operations --------------------------------------------


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load a checkpoint; iteration order is lexicographic by name."""
    entries, metadata = read_tensor_file(path, allowed_dtypes=CHECKPOINT_DTYPES)
    tensors: dict[str, Tensor] = {}
    for name, (dtype, shape, arr) in entries.items():
        if not name:
            raise MalformedContainer(f"{path}: empty tensor name")
        if any(d < 1 for d in shape):
            raise MalformedContainer(f"{path}: tensor {name!r} has a zero-sized dimension")
        tensors[name] = Tensor(dtype, shape, arr)
    ckpt = Checkpoint(tensors, metadata)
    ckpt.validate()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path, dtype_policy: str = "preserve") -> None:
    """Write a checkpoint; ``dtype_policy`` is ``preserve`` or ``force_f32``."""
    if dtype_policy not in ("preserve", "force_f32"):
        raise ValueError(f"unknown dtype_policy {dtype_policy!r}")
    ckpt.validate()
    entries: dict[str, Entry] = {}
    for name, t in ckpt.tensors.items():
        if dtype_policy == "force_f32" and t.dtype != "f32":
            entries[name] = ("f32", t.shape, t.to_f32())
        else:
            entries[name] = (t.dtype, t.shape, t.data)
    write_tensor_file(path, entries, ckpt.metadata)
