"""
Round messages and their wire encoding.

Frame (little-endian): b"FSFL" | u8 type | u64 round | u32 payload length | payload
The payload is an FSCT container:
    broadcast  g_s.* and g_m.* parameter arrays
    report     meta.site_id, meta.sample_count, meta.kind, meta.epoch and
               grad.g_s.* / grad.g_m.* arrays
    shutdown   empty container
"""

import socket
import struct
from dataclasses import dataclass, field
from typing import Dict, Union

import numpy as np

import fsct
from config import WIRE_MAGIC
from errors import FormatError, ProtocolError

MSG_BROADCAST = 1
MSG_REPORT = 2
MSG_SHUTDOWN = 3
REPORT_KINDS = ("pretrain", "labeled", "unlabeled")

FRAME_HEADER = struct.Struct("<4sBQI")
GLOBAL_PREFIXES = ("g_s.", "g_m.")
GRAD_PREFIX = "grad."


@dataclass
class ModelBroadcast:
    round: int
    params: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class GradientReport:
    round: int
    site_id: str
    sample_count: int
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    kind: str = "pretrain"          # which local step produced the gradients
    epoch: int = 0                  # the site's epoch for this round


@dataclass
class Shutdown:
    round: int


RoundMessage = Union[ModelBroadcast, GradientReport, Shutdown]


def is_global(name: str) -> bool:
    return name.startswith(GLOBAL_PREFIXES)


def _check_global(names, what: str) -> None:
    stray = [n for n in names if not is_global(n)]
    if stray:
        raise ProtocolError(f"{what} carries non-global arrays: {', '.join(sorted(stray)[:5])}")


# =============================================================================
# Encoding
# =============================================================================


def encode(msg: RoundMessage) -> bytes:
    if isinstance(msg, ModelBroadcast):
        _check_global(msg.params, "Broadcast")
        kind, payload = MSG_BROADCAST, fsct.dumps(msg.params)
    elif isinstance(msg, GradientReport):
        _check_global(msg.grads, "Gradient report")
        arrays = {"meta.site_id": fsct.text_array(msg.site_id),
                  "meta.sample_count": np.array(float(msg.sample_count)),
                  "meta.kind": fsct.text_array(msg.kind),
                  "meta.epoch": np.array(float(msg.epoch))}
        arrays.update({GRAD_PREFIX + name: g for name, g in msg.grads.items()})
        kind, payload = MSG_REPORT, fsct.dumps(arrays)
    elif isinstance(msg, Shutdown):
        kind, payload = MSG_SHUTDOWN, fsct.dumps({})
    else:
        raise TypeError(f"Not a round message: {type(msg).__name__}")
    if msg.round < 0:
        raise ProtocolError(f"Negative round number {msg.round}")
    return FRAME_HEADER.pack(WIRE_MAGIC, kind, msg.round, len(payload)) + payload


def decode_header(header: bytes):
    if len(header) != FRAME_HEADER.size:
        raise FormatError(f"Truncated frame header ({len(header)} bytes)")
    magic, kind, round_index, length = FRAME_HEADER.unpack(header)
    if magic != WIRE_MAGIC:
        raise FormatError(f"Bad frame magic {magic!r}, expected {WIRE_MAGIC!r}")
    if kind not in (MSG_BROADCAST, MSG_REPORT, MSG_SHUTDOWN):
        raise FormatError(f"Unknown message type {kind}")
    return kind, round_index, length


def decode(frame: bytes) -> RoundMessage:
    kind, round_index, length = decode_header(frame[:FRAME_HEADER.size])
    payload = frame[FRAME_HEADER.size:]
    if len(payload) != length:
        raise FormatError(f"Frame payload is {len(payload)} bytes, header says {length}")
    arrays = fsct.loads(payload)
    if kind == MSG_BROADCAST:
        _check_global(arrays, "Broadcast")
        return ModelBroadcast(round_index, arrays)
    if kind == MSG_SHUTDOWN:
        return Shutdown(round_index)
    try:
        site_id = fsct.array_text(arrays.pop("meta.site_id"))
        count = int(arrays.pop("meta.sample_count"))
        step_kind = fsct.array_text(arrays.pop("meta.kind"))
        epoch = int(arrays.pop("meta.epoch"))
    except KeyError as exc:
        raise FormatError(f"Gradient report without {exc}") from exc
    stray = [n for n in arrays if not n.startswith(GRAD_PREFIX)]
    if stray:
        raise ProtocolError(f"Gradient report carries unexpected arrays: {', '.join(stray[:5])}")
    grads = {n[len(GRAD_PREFIX):]: a for n, a in arrays.items()}
    _check_global(grads, "Gradient report")
    if step_kind not in REPORT_KINDS:
        raise FormatError(f"Unknown report kind '{step_kind}'")
    return GradientReport(round_index, site_id, count, grads, step_kind, epoch)


def frame_names(frame: bytes) -> list:
    """Array names inside one encoded frame (privacy scan)."""
    return fsct.array_names(frame[FRAME_HEADER.size:])


# =============================================================================
# Socket IO
# =============================================================================


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ProtocolError(f"Peer closed the connection after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, FRAME_HEADER.size)
    _, _, length = decode_header(header)
    return header + _recv_exact(sock, length)


def send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)
