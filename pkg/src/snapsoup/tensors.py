"""Named float32 tensor maps and the TPAK container format.

A :class:`TensorMap` holds the weights of one model snapshot as an ordered
mapping from parameter name to a float32 numpy array. Iteration order is
always the lexicographic order of names, which makes serialization
deterministic and byte-level golden tests possible.

TPAK layout (all integers little-endian):

* bytes 0-3   magic ``b"TPAK"``
* bytes 4-7   version, u32 (currently 1)
* bytes 8-15  header length H, u64
* 16..16+H    UTF-8 JSON ``{"tensors": {...}, "meta": {...}}`` with tensor
              names in lexicographic order; per tensor: dtype (``"f32"``),
              shape, offset and nbytes relative to the payload start
* rest        raw little-endian float32 data, packed contiguously
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import NonFiniteValueError, TensorFormatError

MAGIC = b"TPAK"
VERSION = 1
_HEADER_PREFIX_LEN = 16


class TensorMap:
    """Immutable ordered map of parameter name -> float32 array.

    Input arrays are cast to float32 on construction. Values must be finite
    unless ``allow_nonfinite`` is set; a single NaN weight would otherwise
    silently poison every downstream average.

    Equality compares names, shapes and exact bits of the data; ``meta`` is
    provenance only and excluded from ``==``.
    """

    __slots__ = ("_entries", "_meta")

    def __init__(
        self,
        tensors: Mapping[str, np.ndarray],
        meta: Mapping[str, str] | None = None,
        *,
        allow_nonfinite: bool = False,
    ):
        entries: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise TensorFormatError(f"tensor name must be a non-empty string, got {name!r}")
            arr = np.asarray(tensors[name], dtype=np.float32)
            if not allow_nonfinite and arr.size and not np.isfinite(arr).all():
                raise NonFiniteValueError(f"tensor {name!r} contains NaN/Inf values")
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            entries[name] = arr
        self._entries = entries
        self._meta = {str(k): str(v) for k, v in (meta or {}).items()}

    @property
    def meta(self) -> dict[str, str]:
        return dict(self._meta)

    def names(self) -> list[str]:
        return list(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def signature(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        """Canonical (name, shape) pairs, the precondition for averaging."""
        return tuple((name, arr.shape) for name, arr in self._entries.items())

    def num_elements(self) -> int:
        return sum(arr.size for arr in self._entries.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.signature() != other.signature():
            return False
        return all(
            self._entries[n].tobytes() == other._entries[n].tobytes() for n in self._entries
        )

    def __hash__(self):
        return hash(self.content_hash())

    def __repr__(self) -> str:
        return f"TensorMap({len(self)} tensors, {self.num_elements()} elements)"

    def content_hash(self) -> str:
        """SHA-256 over the canonical serialized bytes (names, shapes, data)."""
        h = hashlib.sha256()
        for name, arr in self._entries.items():
            h.update(name.encode("utf-8"))
            h.update(repr(arr.shape).encode())
            h.update(arr.astype("<f4", copy=False).tobytes())
        return h.hexdigest()


@dataclass
class CompatibilityReport:
    """Structural discrepancies between two tensor maps.

    ``compatible`` is true iff the name sets and every shape match exactly.
    """

    missing_in_a: list[str] = field(default_factory=list)
    missing_in_b: list[str] = field(default_factory=list)
    shape_mismatches: list[tuple[str, tuple[int, ...], tuple[int, ...]]] = field(
        default_factory=list
    )

    @property
    def compatible(self) -> bool:
        return not (self.missing_in_a or self.missing_in_b or self.shape_mismatches)

    def summary(self) -> str:
        if self.compatible:
            return "compatible"
        parts = []
        if self.missing_in_a:
            parts.append(f"missing in a: {', '.join(self.missing_in_a)}")
        if self.missing_in_b:
            parts.append(f"missing in b: {', '.join(self.missing_in_b)}")
        for name, sa, sb in self.shape_mismatches:
            parts.append(f"shape mismatch {name}: {list(sa)} vs {list(sb)}")
        return "; ".join(parts)


def check_compatibility(a: TensorMap, b: TensorMap) -> CompatibilityReport:
    """Report every name/shape discrepancy between two maps.

    Discrepancies are data, not errors: the report is symmetric up to
    swapping the ``missing_in_*`` lists.
    """
    report = CompatibilityReport()
    names_a, names_b = set(a.names()), set(b.names())
    report.missing_in_b = sorted(names_a - names_b)
    report.missing_in_a = sorted(names_b - names_a)
    for name in sorted(names_a & names_b):
        if a[name].shape != b[name].shape:
            report.shape_mismatches.append((name, a[name].shape, b[name].shape))
    return report


def _encode_header(tm: TensorMap) -> bytes:
    tensors: dict[str, dict] = {}
    offset = 0
    for name, arr in tm.items():
        nbytes = 4 * arr.size
        tensors[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": nbytes,
        }
        offset += nbytes
    header = {"tensors": tensors, "meta": dict(sorted(tm.meta.items()))}
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def tensormap_to_bytes(tm: TensorMap) -> bytes:
    """Serialize to TPAK bytes; identical logical maps yield identical bytes."""
    header = _encode_header(tm)
    chunks = [
        MAGIC,
        VERSION.to_bytes(4, "little"),
        len(header).to_bytes(8, "little"),
        header,
    ]
    for _, arr in tm.items():
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


def save_tensormap(tm: TensorMap, path: str | Path, *, allow_nonfinite: bool = False) -> None:
    """Write ``tm`` to ``path`` in TPAK format (atomic via temp file + rename)."""
    if not allow_nonfinite:
        for name, arr in tm.items():
            if arr.size and not np.isfinite(arr).all():
                raise NonFiniteValueError(f"tensor {name!r} contains NaN/Inf values")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(tensormap_to_bytes(tm))
    tmp.replace(path)


def tensormap_from_bytes(data: bytes, *, allow_nonfinite: bool = False) -> TensorMap:
    if len(data) < _HEADER_PREFIX_LEN or data[:4] != MAGIC:
        raise TensorFormatError("bad magic: not a TPAK file")
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise TensorFormatError(f"unsupported TPAK version {version}")
    header_len = int.from_bytes(data[8:16], "little")
    payload_start = _HEADER_PREFIX_LEN + header_len
    if len(data) < payload_start:
        raise TensorFormatError("truncated file: header length exceeds file size")
    try:
        header = json.loads(data[_HEADER_PREFIX_LEN:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"malformed header JSON: {exc}") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise TensorFormatError("malformed header: missing 'tensors' index")

    payload = data[payload_start:]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for name in sorted(header["tensors"]):
        info = header["tensors"][name]
        if info.get("dtype") != "f32":
            raise TensorFormatError(f"unsupported dtype {info.get('dtype')!r} (v1 is f32-only)")
        shape = tuple(int(d) for d in info["shape"])
        if any(d < 0 for d in shape):
            raise TensorFormatError(f"negative dimension in shape of {name!r}")
        count = math.prod(shape)
        offset, nbytes = int(info["offset"]), int(info["nbytes"])
        if nbytes != 4 * count:
            raise TensorFormatError(f"nbytes of {name!r} does not match shape")
        if offset != expected_offset:
            raise TensorFormatError(f"payload not contiguous at {name!r}")
        if offset + nbytes > len(payload):
            raise TensorFormatError("payload length mismatch")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = arr
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise TensorFormatError("payload length mismatch")
    meta = header.get("meta", {})
    return TensorMap(tensors, meta=meta, allow_nonfinite=allow_nonfinite)


def load_tensormap(path: str | Path, *, allow_nonfinite: bool = False) -> TensorMap:
    """Load a TPAK file; inverse of :func:`save_tensormap`, bit-exact."""
    return tensormap_from_bytes(Path(path).read_bytes(), allow_nonfinite=allow_nonfinite)
