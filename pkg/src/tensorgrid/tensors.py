"""Tensors, datasets, metadata and their canonical binary encoding.

Every integer on the wire is little-endian. A tensor encodes as

    dtype code u8 | ndim u8 | dims u32 each | row-major payload

so the encoded size is exactly ``2 + 4 * ndim + len(payload)``.

A dataset blob does not embed the dataset's own name; the storage key
carries it. Layout:

    u16 tensor count | per tensor: name (u16 len + utf-8) | tensor bytes
    u16 meta count   | per field:  name | kind u8 | u16 count | values

with scalar-f64 values as f64, scalar-i64 as i64, and string-list entries
as u16-length-prefixed utf-8.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadDType,
    BadShape,
    DuplicateName,
    ShapeMismatch,
    Truncated,
)

MAX_DIMS = 8


class DType(enum.IntEnum):
    f32 = 1
    f64 = 2
    i32 = 3
    i64 = 4
    u8 = 5

    @property
    def width(self) -> int:
        return _WIDTHS[self]

    @property
    def np_dtype(self) -> np.dtype:
        return _NP_DTYPES[self]


_WIDTHS = {DType.f32: 4, DType.f64: 8, DType.i32: 4, DType.i64: 8, DType.u8: 1}

# explicit little-endian numpy dtypes: payloads are bit-exact across hosts
_NP_DTYPES = {
    DType.f32: np.dtype("<f4"),
    DType.f64: np.dtype("<f8"),
    DType.i32: np.dtype("<i4"),
    DType.i64: np.dtype("<i8"),
    DType.u8: np.dtype("u1"),
}

_BY_NP_KIND = {np.dtype(k): v for v, k in _NP_DTYPES.items()}


def _check_shape(shape: tuple[int, ...]) -> None:
    if len(shape) == 0:
        raise BadShape("zero-dim tensors are forbidden; use shape [1] for scalars")
    if len(shape) > MAX_DIMS:
        raise BadShape(f"ndim {len(shape)} exceeds the {MAX_DIMS}-dim limit")
    for d in shape:
        if d < 1:
            raise BadShape(f"dims must be >= 1, got {d}")


def _numel(shape: tuple[int, ...]) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


@dataclass(frozen=True)
class Tensor:
    """Immutable dtype + shape + contiguous row-major payload."""

    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    def numel(self) -> int:
        return _numel(self.shape)

    def nbytes(self) -> int:
        return len(self.data)

    def to_numpy(self) -> np.ndarray:
        arr = np.frombuffer(self.data, dtype=self.dtype.np_dtype)
        return arr.reshape(self.shape)


def make_tensor(dtype: DType, shape, data: bytes) -> Tensor:
    """Validate and build a tensor; raises ShapeMismatch/BadShape."""
    dtype = DType(dtype)
    shape = tuple(int(d) for d in shape)
    _check_shape(shape)
    expected = _numel(shape) * dtype.width
    if len(data) != expected:
        raise ShapeMismatch(
            f"payload is {len(data)} bytes, shape {list(shape)} of {dtype.name} needs {expected}"
        )
    return Tensor(dtype, shape, bytes(data))


def tensor_from_array(arr: np.ndarray) -> Tensor:
    """Build a tensor from a numpy array (copies into canonical layout)."""
    a = np.ascontiguousarray(arr)
    try:
        code = _BY_NP_KIND[np.dtype(a.dtype.str.replace(">", "<"))]
    except KeyError:
        raise BadDType(f"unsupported numpy dtype {arr.dtype}") from None
    if a.ndim == 0:
        a = a.reshape(1)
    a = a.astype(code.np_dtype, copy=False)
    return make_tensor(code, a.shape, a.tobytes())


def serialize_tensor(t: Tensor) -> bytes:
    header = struct.pack("<BB", int(t.dtype), len(t.shape))
    dims = struct.pack(f"<{len(t.shape)}I", *t.shape)
    return header + dims + t.data


def parse_tensor_at(buf: bytes, off: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``off``; returns (tensor, next offset).

    Tensors are self-delimiting, which is what lets dataset blobs simply
    concatenate them.
    """
    if len(buf) - off < 2:
        raise Truncated("tensor header needs 2 bytes")
    code, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    try:
        dtype = DType(code)
    except ValueError:
        raise BadDType(f"unknown dtype code {code}") from None
    if ndim == 0 or ndim > MAX_DIMS:
        raise BadShape(f"ndim {ndim} outside [1, {MAX_DIMS}]")
    if len(buf) - off < 4 * ndim:
        raise Truncated("tensor dims truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    _check_shape(shape)
    nbytes = _numel(shape) * dtype.width
    if len(buf) - off < nbytes:
        raise Truncated(f"tensor payload needs {nbytes} bytes, {len(buf) - off} left")
    data = bytes(buf[off : off + nbytes])
    return Tensor(dtype, shape, data), off + nbytes


def deserialize_tensor(b: bytes) -> Tensor:
    t, end = parse_tensor_at(b, 0)
    if end != len(b):
        raise Truncated(f"{len(b) - end} trailing bytes after tensor")
    return t


# --- datasets ----------------------------------------------------------------


class MetaKind(enum.IntEnum):
    scalar_f64 = 1
    scalar_i64 = 2
    string_list = 3


@dataclass(frozen=True)
class MetaField:
    name: str
    kind: MetaKind
    values: tuple

    def __post_init__(self):
        if not self.name:
            raise DuplicateName("meta field names must be non-empty")
        vals = tuple(self.values)
        if self.kind == MetaKind.scalar_f64:
            vals = tuple(float(v) for v in vals)
        elif self.kind == MetaKind.scalar_i64:
            vals = tuple(int(v) for v in vals)
        else:
            if not all(isinstance(v, str) for v in vals):
                raise TypeError("string-list fields take strings")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Dataset:
    """Named group of tensors plus metadata, addressable by one key."""

    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    meta: dict[str, MetaField] = field(default_factory=dict)

    def add_tensor(self, name: str, t: Tensor) -> "Dataset":
        if name in self.tensors:
            raise DuplicateName(f"tensor {name!r} already in dataset {self.name!r}")
        tensors = dict(self.tensors)
        tensors[name] = t
        return Dataset(self.name, tensors, dict(self.meta))

    def add_meta(self, field_: MetaField) -> "Dataset":
        if field_.name in self.meta:
            raise DuplicateName(f"meta {field_.name!r} already in dataset {self.name!r}")
        meta = dict(self.meta)
        meta[field_.name] = field_
        return Dataset(self.name, dict(self.tensors), meta)


def dataset_add_tensor(ds: Dataset, name: str, t: Tensor) -> Dataset:
    return ds.add_tensor(name, t)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ShapeMismatch("string longer than u16 length prefix allows")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    if len(buf) - off < 2:
        raise Truncated("string length truncated")
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    if len(buf) - off < n:
        raise Truncated("string body truncated")
    return buf[off : off + n].decode("utf-8"), off + n


def serialize_dataset(ds: Dataset) -> bytes:
    out = [struct.pack("<H", len(ds.tensors))]
    for name in ds.tensors:
        out.append(_pack_str(name))
        out.append(serialize_tensor(ds.tensors[name]))
    out.append(struct.pack("<H", len(ds.meta)))
    for name, f in ds.meta.items():
        out.append(_pack_str(name))
        out.append(struct.pack("<BH", int(f.kind), len(f.values)))
        if f.kind == MetaKind.scalar_f64:
            out.append(struct.pack(f"<{len(f.values)}d", *f.values))
        elif f.kind == MetaKind.scalar_i64:
            out.append(struct.pack(f"<{len(f.values)}q", *f.values))
        else:
            for s in f.values:
                out.append(_pack_str(s))
    return b"".join(out)


def deserialize_dataset(name: str, blob: bytes) -> Dataset:
    off = 0
    if len(blob) < 2:
        raise Truncated("dataset tensor count truncated")
    (n_tensors,) = struct.unpack_from("<H", blob, off)
    off += 2
    tensors: dict[str, Tensor] = {}
    for _ in range(n_tensors):
        tname, off = _unpack_str(blob, off)
        t, off = parse_tensor_at(blob, off)
        if tname in tensors:
            raise DuplicateName(f"tensor {tname!r} repeated in dataset blob")
        tensors[tname] = t
    if len(blob) - off < 2:
        raise Truncated("dataset meta count truncated")
    (n_meta,) = struct.unpack_from("<H", blob, off)
    off += 2
    meta: dict[str, MetaField] = {}
    for _ in range(n_meta):
        mname, off = _unpack_str(blob, off)
        if len(blob) - off < 3:
            raise Truncated("meta field header truncated")
        kind_code, count = struct.unpack_from("<BH", blob, off)
        off += 3
        try:
            kind = MetaKind(kind_code)
        except ValueError:
            raise BadDType(f"unknown meta kind {kind_code}") from None
        if kind == MetaKind.scalar_f64:
            need = 8 * count
            if len(blob) - off < need:
                raise Truncated("meta f64 values truncated")
            values = struct.unpack_from(f"<{count}d", blob, off)
            off += need
        elif kind == MetaKind.scalar_i64:
            need = 8 * count
            if len(blob) - off < need:
                raise Truncated("meta i64 values truncated")
            values = struct.unpack_from(f"<{count}q", blob, off)
            off += need
        else:
            vals = []
            for _ in range(count):
                s, off = _unpack_str(blob, off)
                vals.append(s)
            values = tuple(vals)
        if mname in meta:
            raise DuplicateName(f"meta {mname!r} repeated in dataset blob")
        meta[mname] = MetaField(mname, kind, values)
    if off != len(blob):
        raise Truncated(f"{len(blob) - off} trailing bytes after dataset")
    return Dataset(name, tensors, meta)
