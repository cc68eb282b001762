"""Multi-tensor stream values.

Element types, per-tensor specs, stream capabilities (the negotiation
contract between linked elements), immutable frames, sparse COO coding,
and the element-wise arithmetic chain used for client-side pre-processing.

All values are frozen after construction and safe to share across threads;
every operation here is a pure function.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

MAX_RANK = 8
MAX_TENSORS = 16
MAX_ELEMENTS = 2**32 - 1  # COO indices are u32 linear offsets

#: pts/duration value meaning "unknown"
UNKNOWN_NS = -1


class CapsError(ValueError):
    """Invalid capability string or capability structure.

    ``pos`` is the character offset of the offending token when the error
    came from the string parser, else -1.
    """

    def __init__(self, message: str, pos: int = -1):
        super().__init__(message if pos < 0 else f"{message} (at offset {pos})")
        self.pos = pos


class FrameError(ValueError):
    """Invalid tensor frame payload or frame operation."""


class TensorElemType(Enum):
    """Tensor element type; the enum value is the stable wire code."""

    int8 = 0
    uint8 = 1
    int16 = 2
    uint16 = 3
    int32 = 4
    uint32 = 5
    int64 = 6
    uint64 = 7
    float32 = 8
    float64 = 9

    @property
    def size(self) -> int:
        return _ELEM_SIZES[self]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.name)

    @property
    def is_float(self) -> bool:
        return self in (TensorElemType.float32, TensorElemType.float64)

    @classmethod
    def from_code(cls, code: int) -> "TensorElemType":
        try:
            return cls(code)
        except ValueError:
            raise FrameError(f"unknown element type code {code}") from None

    @classmethod
    def from_name(cls, name: str) -> "TensorElemType":
        try:
            return cls[name]
        except KeyError:
            raise CapsError(f"unknown tensor type {name!r}") from None


_ELEM_SIZES = {
    TensorElemType.int8: 1,
    TensorElemType.uint8: 1,
    TensorElemType.int16: 2,
    TensorElemType.uint16: 2,
    TensorElemType.int32: 4,
    TensorElemType.uint32: 4,
    TensorElemType.int64: 8,
    TensorElemType.uint64: 8,
    TensorElemType.float32: 4,
    TensorElemType.float64: 8,
}


class Format(Enum):
    """Stream format: fixed schema, per-frame schema, or COO-compressed."""

    STATIC = "static"
    FLEXIBLE = "flexible"
    SPARSE = "sparse"

    @property
    def code(self) -> int:
        return _FORMAT_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Format":
        for fmt, c in _FORMAT_CODES.items():
            if c == code:
                return fmt
        raise FrameError(f"unknown format code {code}")


_FORMAT_CODES = {Format.STATIC: 0, Format.FLEXIBLE: 1, Format.SPARSE: 2}


@dataclass(frozen=True)
class TensorSpec:
    """Shape and element type of one tensor in a stream.

    ``dims`` are unitless extents, innermost dimension first (an RGB
    300x300 image is ``[3, 300, 300, 1]``), rank 1..8, every extent >= 1.
    """

    elem_type: TensorElemType
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not 1 <= len(dims) <= MAX_RANK:
            raise CapsError(f"rank {len(dims)} outside 1..{MAX_RANK}")
        if any(d < 1 for d in dims):
            raise CapsError(f"dimension extents must be >= 1, got {dims}")

    @property
    def count(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return self.count * self.elem_type.size

    def dim_string(self) -> str:
        return ":".join(str(d) for d in self.dims)

    @classmethod
    def from_dim_string(cls, elem_type: TensorElemType, text: str) -> "TensorSpec":
        parts = text.split(":")
        try:
            dims = tuple(int(p) for p in parts)
        except ValueError:
            raise CapsError(f"bad dimension string {text!r}") from None
        return cls(elem_type, dims)


@dataclass(frozen=True)
class TensorsCaps:
    """Stream capability: what kind of frames flow over a link.

    ``media`` distinguishes native tensor streams (``other/tensors``) from
    the opaque schemaless marker ``other/flexbuf``; flexbuf payloads are
    carried but never interpreted.
    """

    format: Format = Format.STATIC
    specs: tuple[TensorSpec, ...] = ()
    framerate: Fraction | None = None
    media: str = "tensors"

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if self.media not in ("tensors", "flexbuf"):
            raise CapsError(f"unsupported media {self.media!r}")
        if self.media == "flexbuf":
            if self.specs:
                raise CapsError("other/flexbuf caps carry no tensor specs")
            return
        if self.format is Format.FLEXIBLE:
            if self.specs:
                raise CapsError("flexible caps carry no tensor specs")
        else:
            if not 1 <= len(self.specs) <= MAX_TENSORS:
                raise CapsError(
                    f"{self.format.value} caps need 1..{MAX_TENSORS} tensor specs"
                )

    @property
    def num_tensors(self) -> int:
        return len(self.specs)

    @property
    def is_flexbuf(self) -> bool:
        return self.media == "flexbuf"


FLEXIBLE_CAPS = TensorsCaps(format=Format.FLEXIBLE)
FLEXBUF_CAPS = TensorsCaps(format=Format.FLEXIBLE, media="flexbuf")

_CAPS_KEYS = ("format", "num_tensors", "dimensions", "types", "framerate")


def _split_caps_fields(text: str) -> list[tuple[int, str]]:
    """Split on top-level commas, honoring double quotes. Yields (pos, field)."""
    fields = []
    start = 0
    in_quote = False
    for i, ch in enumerate(text):
        if ch == '"':
            in_quote = not in_quote
        elif ch == "," and not in_quote:
            fields.append((start, text[start:i]))
            start = i + 1
    if in_quote:
        raise CapsError("unterminated quote", text.find('"'))
    fields.append((start, text[start:]))
    return fields


def _unquote(value: str) -> str:
    if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
        return value[1:-1]
    return value


def parse_caps(text: str) -> TensorsCaps:
    """Parse a capability string.

    Grammar: ``other/tensors`` followed by comma-separated ``key=value``
    pairs (keys: format, num_tensors, dimensions, types, framerate), or the
    bare marker ``other/flexbuf``.  ``dimensions`` separates extents with
    ``:`` and tensors with ``,`` (quote the value when it lists more than
    one tensor); ``types`` likewise.
    """
    if not text or not text.strip():
        raise CapsError("empty capability string", 0)
    fields = _split_caps_fields(text.strip())
    pos0, media = fields[0]
    media = media.strip()
    if media == "other/flexbuf":
        if len(fields) > 1:
            raise CapsError("other/flexbuf takes no parameters", fields[1][0])
        return FLEXBUF_CAPS
    if media != "other/tensors":
        raise CapsError(f"unknown media type {media!r}", pos0)

    seen: dict[str, str] = {}
    for pos, fld in fields[1:]:
        if "=" not in fld:
            raise CapsError(f"expected key=value, got {fld.strip()!r}", pos)
        key, _, value = fld.partition("=")
        key = key.strip()
        if key not in _CAPS_KEYS:
            raise CapsError(f"unknown caps key {key!r}", pos)
        if key in seen:
            raise CapsError(f"duplicate caps key {key!r}", pos)
        seen[key] = _unquote(value.strip())

    fmt_name = seen.get("format", "static")
    try:
        fmt = Format(fmt_name)
    except ValueError:
        raise CapsError(f"unknown format {fmt_name!r}") from None

    framerate = None
    if "framerate" in seen:
        framerate = _parse_framerate(seen["framerate"])

    if fmt is Format.FLEXIBLE:
        if "dimensions" in seen or "types" in seen or "num_tensors" in seen:
            raise CapsError("flexible caps cannot list tensor specs")
        return TensorsCaps(format=fmt, framerate=framerate)

    if "dimensions" not in seen or "types" not in seen:
        raise CapsError(f"{fmt.value} caps need dimensions= and types=")
    dim_strs = seen["dimensions"].split(",")
    type_strs = seen["types"].split(",")
    if len(dim_strs) != len(type_strs):
        raise CapsError(
            f"dimensions lists {len(dim_strs)} tensors but types lists {len(type_strs)}"
        )
    if "num_tensors" in seen:
        try:
            declared = int(seen["num_tensors"])
        except ValueError:
            raise CapsError(f"bad num_tensors {seen['num_tensors']!r}") from None
        if declared != len(dim_strs):
            raise CapsError(
                f"num_tensors={declared} does not match {len(dim_strs)} dimensions entries"
            )
    specs = tuple(
        TensorSpec.from_dim_string(TensorElemType.from_name(t.strip()), d.strip())
        for d, t in zip(dim_strs, type_strs)
    )
    return TensorsCaps(format=fmt, specs=specs, framerate=framerate)


def _parse_framerate(text: str) -> Fraction:
    m = re.fullmatch(r"(\d+)(?:/(\d+))?", text.strip())
    if not m:
        raise CapsError(f"bad framerate {text!r}")
    num = int(m.group(1))
    den = int(m.group(2)) if m.group(2) else 1
    if den == 0:
        raise CapsError("framerate denominator is zero")
    return Fraction(num, den)


def caps_to_string(caps: TensorsCaps) -> str:
    """Render caps canonically: fixed key order, single-tensor lists unquoted."""
    if caps.is_flexbuf:
        return "other/flexbuf"
    parts = [f"other/tensors,format={caps.format.value}"]
    if caps.format is not Format.FLEXIBLE:
        parts.append(f"num_tensors={caps.num_tensors}")
        dims = ",".join(s.dim_string() for s in caps.specs)
        types = ",".join(s.elem_type.name for s in caps.specs)
        if caps.num_tensors > 1:
            dims = f'"{dims}"'
            types = f'"{types}"'
        parts.append(f"dimensions={dims}")
        parts.append(f"types={types}")
    if caps.framerate is not None:
        parts.append(f"framerate={caps.framerate.numerator}/{caps.framerate.denominator}")
    return ",".join(parts)


def caps_compatible(producer: TensorsCaps, consumer: TensorsCaps) -> bool:
    """Can a producer's stream be linked to a consumer?

    True when the consumer is flexible (accepts per-frame schemas), or
    formats and specs match exactly.  Sparse streams only link to sparse
    consumers (a sparse decoder presents a flexible input).  Flexbuf is an
    opaque marker and matches anything.
    """
    if producer.is_flexbuf or consumer.is_flexbuf:
        return True
    if consumer.format is Format.FLEXIBLE:
        return True
    if producer.format is not consumer.format:
        return False
    return producer.specs == consumer.specs


@dataclass(frozen=True)
class TensorFrame:
    """One stream buffer: 1..16 tensors plus timing and sequence metadata.

    ``pts`` and ``duration`` are nanoseconds (pts relative to the owning
    pipeline's base-time), ``UNKNOWN_NS`` when not known.  ``client_id`` is
    transport metadata used by the query server pair; 0 means untagged.
    Payloads are immutable bytes; sharing a frame between threads is safe.
    """

    format: Format
    specs: tuple[TensorSpec, ...]
    payloads: tuple[bytes, ...]
    pts: int = UNKNOWN_NS
    duration: int = UNKNOWN_NS
    seq: int = 0
    client_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "payloads", tuple(bytes(p) for p in self.payloads))
        if not 1 <= len(self.specs) <= MAX_TENSORS:
            raise FrameError(f"frame needs 1..{MAX_TENSORS} tensors, got {len(self.specs)}")
        if len(self.specs) != len(self.payloads):
            raise FrameError("specs/payloads length mismatch")
        for i, (spec, payload) in enumerate(zip(self.specs, self.payloads)):
            if self.format is Format.SPARSE:
                _check_sparse_payload_size(spec, payload, i)
            elif len(payload) != spec.nbytes:
                raise FrameError(
                    f"tensor {i}: payload is {len(payload)} bytes, spec wants {spec.nbytes}"
                )

    @property
    def num_tensors(self) -> int:
        return len(self.specs)

    @property
    def nbytes(self) -> int:
        return sum(len(p) for p in self.payloads)

    def array(self, i: int = 0) -> np.ndarray:
        """Flat (1-D) read-only view of dense tensor ``i``."""
        if self.format is Format.SPARSE:
            raise FrameError("decode sparse frames before reading arrays")
        return np.frombuffer(self.payloads[i], dtype=self.specs[i].elem_type.dtype)

    def caps(self, framerate: Fraction | None = None) -> TensorsCaps:
        """Caps describing this frame (flexible frames report flexible caps)."""
        if self.format is Format.FLEXIBLE:
            return TensorsCaps(format=Format.FLEXIBLE, framerate=framerate)
        return TensorsCaps(format=self.format, specs=self.specs, framerate=framerate)


def _check_sparse_payload_size(spec: TensorSpec, payload: bytes, i: int) -> None:
    if len(payload) < 4:
        raise FrameError(f"tensor {i}: sparse payload shorter than its nnz header")
    nnz = int.from_bytes(payload[:4], "little")
    want = 4 + nnz * (4 + spec.elem_type.size)
    if len(payload) != want:
        raise FrameError(
            f"tensor {i}: sparse payload is {len(payload)} bytes, nnz={nnz} wants {want}"
        )


def frame_from_arrays(
    arrays: Sequence[np.ndarray],
    dims: Sequence[Sequence[int]] | None = None,
    *,
    format: Format = Format.STATIC,
    pts: int = UNKNOWN_NS,
    duration: int = UNKNOWN_NS,
    seq: int = 0,
) -> TensorFrame:
    """Build a dense frame from numpy arrays.

    ``dims`` overrides the per-tensor extents; by default each array is
    treated as a flat tensor of its element count.
    """
    arrays = [np.ascontiguousarray(a) for a in arrays]
    specs = []
    for k, a in enumerate(arrays):
        et = TensorElemType.from_name(a.dtype.name)
        d = tuple(dims[k]) if dims is not None else (a.size,)
        specs.append(TensorSpec(et, d))
        if specs[-1].count != a.size:
            raise FrameError(f"tensor {k}: dims {d} do not cover {a.size} elements")
    return TensorFrame(
        format=format,
        specs=tuple(specs),
        payloads=tuple(a.tobytes() for a in arrays),
        pts=pts,
        duration=duration,
        seq=seq,
    )


@dataclass(frozen=True)
class SparseTensor:
    """COO view of one tensor: strictly increasing row-major linear indices."""

    spec: TensorSpec
    indices: tuple[int, ...]
    values: bytes

    @property
    def nnz(self) -> int:
        return len(self.indices)


def sparse_encode(frame: TensorFrame) -> TensorFrame:
    """COO-encode a dense frame: per tensor, zeros are omitted.

    "Zero" is the all-zero byte pattern, so the round trip is bit-exact
    even for oddities like negative float zero.  Payload layout per
    tensor: ``nnz u32 | indices u32*nnz | values``.  pts/duration/seq are
    preserved.
    """
    if frame.format is Format.SPARSE:
        raise FrameError("frame is already sparse")
    payloads = []
    for i, spec in enumerate(frame.specs):
        if spec.count > MAX_ELEMENTS:
            raise FrameError(
                f"tensor {i}: {spec.count} elements exceed the u32 index space"
            )
        esize = spec.elem_type.size
        rows = np.frombuffer(frame.payloads[i], dtype=np.uint8).reshape(spec.count, esize)
        idx = np.flatnonzero(rows.any(axis=1)).astype(np.uint32)
        payloads.append(
            len(idx).to_bytes(4, "little") + idx.tobytes() + rows[idx].tobytes()
        )
    return replace(frame, format=Format.SPARSE, payloads=tuple(payloads))


def sparse_decode(frame: TensorFrame) -> TensorFrame:
    """Inverse of :func:`sparse_encode`; dense zeros everywhere else.

    Rejects out-of-range and non-increasing indices.
    """
    if frame.format is not Format.SPARSE:
        raise FrameError("frame is not sparse")
    payloads = []
    for i, spec in enumerate(frame.specs):
        st = sparse_tensor_from_payload(spec, frame.payloads[i])
        esize = spec.elem_type.size
        dense = np.zeros((spec.count, esize), dtype=np.uint8)
        if st.nnz:
            dense[np.asarray(st.indices, dtype=np.int64)] = np.frombuffer(
                st.values, dtype=np.uint8
            ).reshape(st.nnz, esize)
        payloads.append(dense.tobytes())
    return replace(frame, format=Format.STATIC, payloads=tuple(payloads))


def sparse_tensor_from_payload(spec: TensorSpec, payload: bytes) -> SparseTensor:
    """Parse and validate one COO payload against its logical dense spec."""
    if len(payload) < 4:
        raise FrameError("sparse payload shorter than its nnz header")
    nnz = int.from_bytes(payload[:4], "little")
    esize = spec.elem_type.size
    if len(payload) != 4 + nnz * (4 + esize):
        raise FrameError(f"sparse payload length mismatch for nnz={nnz}")
    idx = np.frombuffer(payload, dtype=np.uint32, count=nnz, offset=4)
    values = payload[4 + 4 * nnz :]
    if nnz:
        if int(idx[-1]) >= spec.count:
            raise FrameError(f"sparse index {int(idx[-1])} out of range for {spec.count} elements")
        if nnz > 1 and not np.all(idx[1:] > idx[:-1]):
            raise FrameError("sparse indices are not strictly increasing")
    return SparseTensor(spec, tuple(int(k) for k in idx), values)


# --- arithmetic chain ------------------------------------------------------

_ARITH_KINDS = ("typecast", "add", "mul", "div")

ArithValue = Union[float, TensorElemType]


@dataclass(frozen=True)
class ArithOp:
    kind: str
    value: ArithValue

    def __post_init__(self):
        if self.kind not in _ARITH_KINDS:
            raise ValueError(f"unknown arithmetic op {self.kind!r}")
        if self.kind == "typecast" and not isinstance(self.value, TensorElemType):
            raise ValueError("typecast needs a TensorElemType")
        if self.kind == "div" and float(self.value) == 0.0:
            raise ValueError("division by zero constant")


def parse_arithmetic_chain(text: str) -> tuple[ArithOp, ...]:
    """Parse ``typecast:float32,add:-127.5,div:127.5`` style option strings."""
    ops = []
    text = text.strip()
    if not text:
        return ()
    for part in text.split(","):
        kind, sep, arg = part.strip().partition(":")
        if not sep:
            raise ValueError(f"arithmetic op {part!r} needs a ':' argument")
        if kind == "typecast":
            ops.append(ArithOp("typecast", TensorElemType.from_name(arg)))
        elif kind in ("add", "mul", "div"):
            ops.append(ArithOp(kind, float(arg)))
        else:
            raise ValueError(f"unknown arithmetic op {kind!r}")
    return tuple(ops)


def _cast_saturating(arr: np.ndarray, target: TensorElemType) -> np.ndarray:
    if target.is_float:
        return arr.astype(target.dtype)
    info = np.iinfo(target.dtype)
    if arr.dtype.kind == "f":
        rounded = np.rint(arr)  # round half to even
        out = np.clip(rounded, float(info.min), float(info.max))
        casted = out.astype(target.dtype)
        # float bounds can exceed the integer range by one ulp at the top
        casted = np.where(rounded >= float(info.max), info.max, casted)
        casted = np.where(rounded <= float(info.min), info.min, casted)
        return np.where(np.isnan(arr), target.dtype.type(0), casted).astype(target.dtype)
    src = np.iinfo(arr.dtype)
    lo = max(int(info.min), int(src.min))
    hi = min(int(info.max), int(src.max))
    return np.clip(arr, lo, hi).astype(target.dtype)


def arithmetic_transform(frame: TensorFrame, chain: Iterable[ArithOp]) -> TensorFrame:
    """Apply the op chain element-wise, in order, to every tensor.

    add/mul/div accumulate in double precision; values materialize into the
    current element type at each ``typecast`` and once at the end of the
    chain (saturating when narrowing to integers; floats round half to
    even).  An empty chain is the identity.
    """
    chain = tuple(chain)
    if frame.format is Format.SPARSE:
        raise FrameError("decode sparse frames before arithmetic")
    if not chain:
        return frame
    specs = []
    payloads = []
    for spec, payload in zip(frame.specs, frame.payloads):
        arr = np.frombuffer(payload, dtype=spec.elem_type.dtype)
        etype = spec.elem_type
        pending = False  # arr holds float64 accumulation not yet materialized
        for op in chain:
            if op.kind == "typecast":
                etype = op.value
                arr = _cast_saturating(arr, etype)
                pending = False
            else:
                if not pending:
                    arr = arr.astype(np.float64)
                    pending = True
                if op.kind == "add":
                    arr = arr + float(op.value)
                elif op.kind == "mul":
                    arr = arr * float(op.value)
                else:
                    arr = arr / float(op.value)
        if pending:
            arr = _cast_saturating(arr, etype)
        specs.append(TensorSpec(etype, spec.dims))
        payloads.append(arr.tobytes())
    return replace(frame, specs=tuple(specs), payloads=tuple(payloads))


def to_flexible(frame: TensorFrame) -> TensorFrame:
    """Retag a dense frame as flexible; payload bytes are untouched."""
    if frame.format is Format.SPARSE:
        raise FrameError("sparse frames cannot be retagged flexible")
    if frame.format is Format.FLEXIBLE:
        return frame
    return replace(frame, format=Format.FLEXIBLE)


def to_static(frame: TensorFrame, caps: TensorsCaps) -> TensorFrame:
    """Retag a flexible frame as static, checking it against fixed caps."""
    if caps.format is not Format.STATIC:
        raise CapsError("to_static needs static caps")
    if frame.format is Format.SPARSE:
        raise FrameError("decode sparse frames before to_static")
    if frame.specs != caps.specs:
        raise FrameError(
            f"frame specs {[s.dim_string() for s in frame.specs]} do not match caps "
            f"{[s.dim_string() for s in caps.specs]}"
        )
    if frame.format is Format.STATIC:
        return frame
    return replace(frame, format=Format.STATIC)
