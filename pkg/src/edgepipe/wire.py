"""Bit-exact wire format for every inter-pipeline message.

One little-endian envelope carries data frames, query handshakes, clock
sync exchanges, and stream teardown over both raw TCP and MQTT payloads:

    magic 'EAIF' | version u8 | msg_type u8 | flags u16 | total_len u64 |
    seq u64 | client_id u64 | pts i64 | duration i64 |
    [pub_base_utc_ns i64]  (sync flag) |
    [caps_len u32 + UTF-8] (caps flag) |
    n_tensors u32 | per tensor: elem_type u8, rank u8, reserved u16,
    dims u32*rank, data_len u64, data

Sparse tensor data is ``nnz u32 | indices u32*nnz | values``.  With the
compressed flag, every tensor's data bytes are raw deflate (RFC 1951)
streams; the encoder falls back to stored payloads whenever deflate fails
to shrink one of them, so data_len never exceeds the dense size.

Discovery adverts and retained stream metadata are UTF-8 JSON documents,
also defined here.  See docs/wire-format.md for hex-dump examples.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from enum import IntEnum
from fractions import Fraction
from typing import Iterator

import numpy as np

from .tensors import (
    MAX_TENSORS,
    UNKNOWN_NS,
    Format,
    TensorElemType,
    TensorFrame,
    TensorSpec,
    TensorsCaps,
    caps_to_string,
)

MAGIC = b"EAIF"
VERSION = 1

#: fixed header: magic(4) version(1) msg_type(1) flags(2) total_len(8)
#: seq(8) client_id(8) pts(8) duration(8)
_FIXED = struct.Struct("<4sBBHQQQqq")
HEADER_LEN = _FIXED.size  # 48
#: prefix needed to learn total_len (magic..total_len)
PREFIX_LEN = 16

FLAG_FORMAT_MASK = 0x0003
FLAG_COMPRESSED = 0x0004
FLAG_CAPS = 0x0008
FLAG_SYNC = 0x0010

#: decoder refuses messages larger than this (a Full-HD multi-tensor frame
#: is ~6.2 MB dense; leave generous headroom)
MAX_MESSAGE_LEN = 64 * 1024 * 1024


class MsgType(IntEnum):
    DATA = 0
    HELLO = 1
    ACCEPT = 2
    REJECT = 3
    SYNC_REQ = 4
    SYNC_RESP = 5
    BYE = 6


class WireError(ValueError):
    """Base class for codec failures."""


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class Truncated(WireError):
    pass


class LengthMismatch(WireError):
    pass


class UnknownType(WireError):
    pass


@dataclass(frozen=True)
class WireMessage:
    """Decoded envelope.  ``compressed`` mirrors the on-wire flag; payloads
    in this struct are always the inflated (dense/COO) bytes."""

    msg_type: MsgType
    seq: int = 0
    client_id: int = 0
    pts: int = UNKNOWN_NS
    duration: int = UNKNOWN_NS
    format: Format = Format.STATIC
    compressed: bool = False
    pub_base_utc_ns: int | None = None
    caps: str | None = None
    tensors: tuple[tuple[TensorSpec, bytes], ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "tensors", tuple((s, bytes(p)) for s, p in self.tensors)
        )
        if len(self.tensors) > MAX_TENSORS:
            raise WireError(f"{len(self.tensors)} tensors exceed the limit of {MAX_TENSORS}")
        if self.msg_type == MsgType.DATA and not self.tensors:
            raise WireError("data messages carry at least one tensor")


def message_from_frame(
    frame: TensorFrame,
    *,
    msg_type: MsgType = MsgType.DATA,
    caps: str | None = None,
    pub_base_utc_ns: int | None = None,
    compress: bool = False,
    client_id: int | None = None,
) -> WireMessage:
    return WireMessage(
        msg_type=msg_type,
        seq=frame.seq,
        client_id=frame.client_id if client_id is None else client_id,
        pts=frame.pts,
        duration=frame.duration,
        format=frame.format,
        compressed=compress,
        pub_base_utc_ns=pub_base_utc_ns,
        caps=caps,
        tensors=tuple(zip(frame.specs, frame.payloads)),
    )


def frame_from_message(msg: WireMessage) -> TensorFrame:
    if not msg.tensors:
        raise WireError("message carries no tensors")
    return TensorFrame(
        format=msg.format,
        specs=tuple(s for s, _ in msg.tensors),
        payloads=tuple(p for _, p in msg.tensors),
        pts=msg.pts,
        duration=msg.duration,
        seq=msg.seq,
        client_id=msg.client_id,
    )


def _deflate(data: bytes) -> bytes:
    co = zlib.compressobj(6, zlib.DEFLATED, -zlib.MAX_WBITS)
    return co.compress(data) + co.flush()


def _inflate(data: bytes) -> bytes:
    try:
        return zlib.decompress(data, -zlib.MAX_WBITS)
    except zlib.error as e:
        raise WireError(f"bad deflate stream: {e}") from None


def encode_message(msg: WireMessage) -> bytes:
    """Serialize a message; total function on valid input.

    When ``msg.compressed`` is set, tensor payloads are deflated; if any
    payload fails to shrink, the whole message is stored uncompressed and
    the flag is cleared on the wire.
    """
    payloads = [p for _, p in msg.tensors]
    compressed = msg.compressed
    if compressed and payloads:
        squeezed = [_deflate(p) for p in payloads]
        if all(len(c) < len(p) for c, p in zip(squeezed, payloads)):
            payloads = squeezed
        else:
            compressed = False
    elif not payloads:
        compressed = False

    flags = msg.format.code & FLAG_FORMAT_MASK
    if compressed:
        flags |= FLAG_COMPRESSED
    if msg.caps is not None:
        flags |= FLAG_CAPS
    if msg.pub_base_utc_ns is not None:
        flags |= FLAG_SYNC

    out = bytearray(
        _FIXED.pack(
            MAGIC, VERSION, int(msg.msg_type), flags, 0,
            msg.seq, msg.client_id, msg.pts, msg.duration,
        )
    )
    if msg.pub_base_utc_ns is not None:
        out += struct.pack("<q", msg.pub_base_utc_ns)
    if msg.caps is not None:
        raw = msg.caps.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
    out += struct.pack("<I", len(msg.tensors))
    for (spec, _), payload in zip(msg.tensors, payloads):
        out += struct.pack(
            "<BBH", spec.elem_type.value, len(spec.dims), 0
        )
        out += struct.pack(f"<{len(spec.dims)}I", *spec.dims)
        out += struct.pack("<Q", len(payload))
        out += payload
    struct.pack_into("<Q", out, 8, len(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.pos = 0
        self.limit = limit

    def take(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise Truncated(f"need {n} bytes at offset {self.pos}, message ends at {self.limit}")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_TENSOR_HDR = struct.Struct("<BBH")


def peek_length(data: bytes) -> int:
    """Validate the message prefix and return its total length.

    Needs at least PREFIX_LEN bytes; used for length-prefixed TCP framing.
    """
    if len(data) < PREFIX_LEN:
        raise Truncated(f"prefix needs {PREFIX_LEN} bytes, have {len(data)}")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4])!r}")
    if data[4] != VERSION:
        raise UnsupportedVersion(f"version {data[4]} unsupported")
    (total,) = _U64.unpack_from(data, 8)
    if total < HEADER_LEN + 4:
        raise LengthMismatch(f"total_len {total} below minimum message size")
    if total > MAX_MESSAGE_LEN:
        raise LengthMismatch(f"total_len {total} exceeds {MAX_MESSAGE_LEN}")
    return total


def decode_message(data: bytes) -> WireMessage:
    """Decode one message from the start of ``data``.

    Bytes beyond the embedded total_len are ignored, so callers may pass a
    buffer holding several concatenated messages.
    """
    total = peek_length(data)
    if len(data) < total:
        raise Truncated(f"message wants {total} bytes, have {len(data)}")
    r = _Reader(data, total)
    _, _, msg_type_code, flags, _, seq, client_id, pts, duration = r.unpack(_FIXED)
    try:
        msg_type = MsgType(msg_type_code)
    except ValueError:
        raise UnknownType(f"unknown msg_type {msg_type_code}") from None
    fmt_code = flags & FLAG_FORMAT_MASK
    try:
        fmt = Format.from_code(fmt_code)
    except Exception:
        raise WireError(f"reserved format code {fmt_code}") from None
    compressed = bool(flags & FLAG_COMPRESSED)

    pub_base = None
    if flags & FLAG_SYNC:
        (pub_base,) = r.unpack(_I64)
    caps = None
    if flags & FLAG_CAPS:
        (caps_len,) = r.unpack(_U32)
        try:
            caps = r.take(caps_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise WireError(f"caps block is not UTF-8: {e}") from None

    (n_tensors,) = r.unpack(_U32)
    if n_tensors > MAX_TENSORS:
        raise WireError(f"{n_tensors} tensors exceed the limit of {MAX_TENSORS}")
    tensors = []
    for i in range(n_tensors):
        code, rank, reserved = r.unpack(_TENSOR_HDR)
        if reserved != 0:
            raise WireError(f"tensor {i}: reserved field is {reserved}")
        if not 1 <= rank <= 8:
            raise WireError(f"tensor {i}: rank {rank} outside 1..8")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if any(d < 1 for d in dims):
            raise WireError(f"tensor {i}: zero extent in dims {dims}")
        try:
            spec = TensorSpec(TensorElemType.from_code(code), dims)
        except ValueError as e:
            raise WireError(str(e)) from None
        (data_len,) = r.unpack(_U64)
        payload = r.take(data_len)
        if compressed:
            payload = _inflate(payload)
        if fmt is Format.SPARSE:
            _validate_coo(spec, payload, i)
        elif len(payload) != spec.nbytes:
            raise LengthMismatch(
                f"tensor {i}: {len(payload)} payload bytes, spec wants {spec.nbytes}"
            )
        tensors.append((spec, bytes(payload)))
    if r.pos != total:
        raise LengthMismatch(f"total_len {total} but message body ends at {r.pos}")
    if msg_type == MsgType.DATA and not tensors:
        raise WireError("data message without tensors")
    return WireMessage(
        msg_type=msg_type,
        seq=seq,
        client_id=client_id,
        pts=pts,
        duration=duration,
        format=fmt,
        compressed=compressed,
        pub_base_utc_ns=pub_base,
        caps=caps,
        tensors=tuple(tensors),
    )


def _validate_coo(spec: TensorSpec, payload: bytes, i: int) -> None:
    if len(payload) < 4:
        raise LengthMismatch(f"tensor {i}: sparse payload below 4 bytes")
    (nnz,) = _U32.unpack_from(payload)
    want = 4 + nnz * (4 + spec.elem_type.size)
    if len(payload) != want:
        raise LengthMismatch(f"tensor {i}: sparse payload is {len(payload)}, nnz wants {want}")
    if nnz:
        idx = np.frombuffer(payload, dtype=np.uint32, count=nnz, offset=4)
        if int(idx[-1]) >= spec.count:
            raise WireError(f"tensor {i}: sparse index out of range")
        if nnz > 1 and not np.all(idx[1:] > idx[:-1]):
            raise WireError(f"tensor {i}: sparse indices not strictly increasing")


def iter_messages(data: bytes) -> Iterator[WireMessage]:
    """Decode a buffer of concatenated messages, in order."""
    pos = 0
    view = memoryview(data)
    while pos < len(data):
        msg = decode_message(bytes(view[pos:]))
        pos += peek_length(view[pos : pos + PREFIX_LEN])
        yield msg


# --- clock sync ------------------------------------------------------------


@dataclass(frozen=True)
class SyncExchange:
    """Four wall-clock readings of one NTP-style exchange (nanoseconds):
    requester send, responder receive, responder send, requester receive."""

    t1: int
    t2: int
    t3: int
    t4: int


def ntp_offset(x: SyncExchange) -> tuple[int, int]:
    """Standard NTP estimate from one exchange.

    Returns (offset, delay): offset is the responder clock minus the
    requester clock; delay is the round trip net of responder hold time.
    """
    offset = ((x.t2 - x.t1) + (x.t3 - x.t4)) // 2
    delay = (x.t4 - x.t1) - (x.t3 - x.t2)
    return offset, delay


_SYNC_SPEC_REQ = TensorSpec(TensorElemType.int64, (1,))
_SYNC_SPEC_RESP = TensorSpec(TensorElemType.int64, (3,))


def make_sync_request(t1: int, seq: int = 0) -> WireMessage:
    """Sync request carrying the requester's send time as an int64 tensor."""
    return WireMessage(
        msg_type=MsgType.SYNC_REQ,
        seq=seq,
        tensors=((_SYNC_SPEC_REQ, struct.pack("<q", t1)),),
    )


def make_sync_response(t1: int, t2: int, t3: int, seq: int = 0) -> WireMessage:
    """Sync response echoing t1 plus the responder's receive/send times."""
    return WireMessage(
        msg_type=MsgType.SYNC_RESP,
        seq=seq,
        tensors=((_SYNC_SPEC_RESP, struct.pack("<3q", t1, t2, t3)),),
    )


def parse_sync_request(msg: WireMessage) -> int:
    if msg.msg_type != MsgType.SYNC_REQ or not msg.tensors:
        raise WireError("not a sync request")
    (t1,) = struct.unpack("<q", msg.tensors[0][1][:8])
    return t1


def parse_sync_response(msg: WireMessage) -> tuple[int, int, int]:
    if msg.msg_type != MsgType.SYNC_RESP or not msg.tensors:
        raise WireError("not a sync response")
    return struct.unpack("<3q", msg.tensors[0][1][:24])


# --- discovery adverts ------------------------------------------------------

ADVERT_STATUSES = ("ready", "busy")


class AdvertError(ValueError):
    """Malformed service advert document."""


@dataclass(frozen=True)
class ServiceAdvert:
    """Retained discovery record mapping an operation to a data endpoint."""

    operation: str
    host: str
    port: int
    caps_in: str = ""
    caps_out: str = ""
    status: str = "ready"
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.operation:
            raise AdvertError("operation must be non-empty")
        if "+" in self.operation or "#" in self.operation:
            raise AdvertError(f"operation {self.operation!r} contains wildcards")
        if not 1 <= int(self.port) <= 65535:
            raise AdvertError(f"port {self.port} outside 1..65535")
        if self.status not in ADVERT_STATUSES:
            raise AdvertError(f"status {self.status!r} not in {ADVERT_STATUSES}")


def encode_advert(ad: ServiceAdvert) -> bytes:
    doc = {
        "op": ad.operation,
        "host": ad.host,
        "port": ad.port,
        "caps_in": ad.caps_in,
        "caps_out": ad.caps_out,
        "status": ad.status,
        "extra": dict(ad.extra),
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def decode_advert(data: bytes) -> ServiceAdvert | None:
    """Parse an advert document; an empty payload is the withdrawn sentinel
    (returns None).  Unknown keys are tolerated and ignored."""
    if not data:
        return None
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise AdvertError(f"malformed advert JSON: {e}") from None
    if not isinstance(doc, dict):
        raise AdvertError("advert JSON is not an object")
    for key in ("op", "host", "port"):
        if key not in doc:
            raise AdvertError(f"advert missing required key {key!r}")
    extra = doc.get("extra") or {}
    if not isinstance(extra, dict):
        raise AdvertError("advert extra must be an object")
    try:
        return ServiceAdvert(
            operation=str(doc["op"]),
            host=str(doc["host"]),
            port=int(doc["port"]),
            caps_in=str(doc.get("caps_in", "")),
            caps_out=str(doc.get("caps_out", "")),
            status=str(doc.get("status", "ready")),
            extra={str(k): str(v) for k, v in extra.items()},
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, AdvertError):
            raise
        raise AdvertError(f"malformed advert field: {e}") from None


# --- retained stream metadata ------------------------------------------------


def encode_stream_meta(
    caps: TensorsCaps | str,
    base_utc_ns: int,
    framerate: Fraction | None = None,
) -> bytes:
    """Retained `{topic}/_meta` document published by stream publishers."""
    caps_str = caps if isinstance(caps, str) else caps_to_string(caps)
    if framerate is None and not isinstance(caps, str) and caps.framerate is not None:
        framerate = caps.framerate
    doc = {
        "caps": caps_str,
        "framerate": None
        if framerate is None
        else f"{framerate.numerator}/{framerate.denominator}",
        "base_utc_ns": base_utc_ns,
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def decode_stream_meta(data: bytes) -> dict:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WireError(f"malformed stream meta: {e}") from None
    if not isinstance(doc, dict) or "caps" not in doc:
        raise WireError("stream meta missing caps")
    return doc


def build_data_message(
    frame: TensorFrame,
    *,
    pub_base_utc_ns: int | None,
    compress: bool = False,
    caps: str | None = None,
) -> bytes:
    """Encode one published data frame exactly as stream publishers do.

    Shared by the pipeline publisher element and the standalone sensor API
    so both produce byte-identical traffic for identical inputs.
    """
    return encode_message(
        message_from_frame(
            frame, pub_base_utc_ns=pub_base_utc_ns, compress=compress, caps=caps
        )
    )
