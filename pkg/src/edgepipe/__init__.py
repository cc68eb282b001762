"""Among-device AI stream pipelines.

Local pipe-and-filter graphs exchange multi-tensor streams across devices
through capability-based publish/subscribe and inference-offloading (query)
transports, with broker-backed discovery, failover, and cross-device
timestamp synchronization.
"""

from .tensors import (
    FLEXBUF_CAPS,
    FLEXIBLE_CAPS,
    UNKNOWN_NS,
    ArithOp,
    CapsError,
    Format,
    FrameError,
    SparseTensor,
    TensorElemType,
    TensorFrame,
    TensorSpec,
    TensorsCaps,
    arithmetic_transform,
    caps_compatible,
    caps_to_string,
    frame_from_arrays,
    parse_arithmetic_chain,
    parse_caps,
    sparse_decode,
    sparse_encode,
    to_flexible,
    to_static,
)
from .wire import (
    MsgType,
    ServiceAdvert,
    SyncExchange,
    WireError,
    WireMessage,
    decode_advert,
    decode_message,
    encode_advert,
    encode_message,
    frame_from_message,
    iter_messages,
    message_from_frame,
    ntp_offset,
)

__version__ = "0.1.0"
