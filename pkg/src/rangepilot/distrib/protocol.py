"""Framed binary messages exchanged between the training server and rollout clients.

Frame layout (little-endian)::

    magic "APRP" | u16 version | u8 type | u32 payload length | payload | u32 CRC32C

The CRC covers the header and the payload. Reals travel as 32-bit floats and
counts as u32. Per-agent records are stored column by column.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from .. import binfmt
from ..binfmt import BadMagicError, ChecksumError, FormatError, Reader, TruncatedError, VersionError, Writer

MAGIC = b"APRP"
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<4sHBI")
TRAILER = struct.Struct("<I")
MAX_PAYLOAD = 1 << 28

__all__ = [
    "MAGIC", "PROTOCOL_VERSION", "MessageType", "ClientHello", "HelloAck", "StepUpload", "ActionDownload",
    "Goodbye", "Shutdown", "encode_frame", "decode_frame", "read_frame", "send_message",
    "FormatError", "BadMagicError", "VersionError", "TruncatedError", "ChecksumError", "UnknownTypeError",
]


class UnknownTypeError(FormatError):
    pass


class MessageType(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    STEP_UPLOAD = 3
    ACTION_DOWNLOAD = 4
    GOODBYE = 5
    SHUTDOWN = 6


@dataclass
class ClientHello:
    client_id: int
    num_processes: int
    agents_per_process: int
    obs_layout_version: int
    obs_dim: int
    mode: int = 0
    protocol_version: int = PROTOCOL_VERSION

    type = MessageType.HELLO

    def __post_init__(self):
        if self.num_processes < 1 or self.agents_per_process < 1:
            raise ValueError("num_processes and agents_per_process must be >= 1")

    @property
    def num_agents(self) -> int:
        return self.num_processes * self.agents_per_process


@dataclass
class HelloAck:
    accepted: bool
    reason: str = ""

    type = MessageType.HELLO_ACK


def _u32(a):
    return np.asarray(a, dtype=np.uint32)


def _rows(a, n: int, width: int | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 2:
        return a
    return a.reshape(n, width if width is not None else (a.size // n if n else 0))


@dataclass
class StepUpload:
    """One tick of per-agent results from a client.

    ``terminal_obs`` holds a row only for agents whose ``flags`` carry the
    truncation bit, in the order those agents appear.
    """
    client_id: int
    tick: int
    agent_index: np.ndarray  # (n,) u32
    episode_id: np.ndarray  # (n,) u32
    obs: np.ndarray  # (n, obs_dim) f32
    reward: np.ndarray  # (n,) f32
    flags: np.ndarray  # (n,) u8
    terminal_obs: np.ndarray = field(default=None)  # (k, obs_dim) f32

    type = MessageType.STEP_UPLOAD

    def __post_init__(self):
        self.agent_index = _u32(self.agent_index)
        self.episode_id = _u32(self.episode_id)
        self.obs = _rows(self.obs, len(self.agent_index))
        self.reward = np.asarray(self.reward, dtype=np.float32)
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        if self.terminal_obs is None:
            self.terminal_obs = np.zeros((0, self.obs.shape[1]), np.float32)
        self.terminal_obs = _rows(self.terminal_obs, -1 if self.obs.shape[1] else 0, self.obs.shape[1])
        if len(np.unique(self.agent_index)) != len(self.agent_index):
            raise ValueError("agent_index must be unique within an upload")


@dataclass
class ActionDownload:
    client_id: int
    tick: int
    agent_index: np.ndarray  # (n,) u32
    action: np.ndarray  # (n, act_dim) f32, pre-clamp
    log_prob: np.ndarray  # (n,) f32
    value: np.ndarray  # (n,) f32

    type = MessageType.ACTION_DOWNLOAD

    def __post_init__(self):
        self.agent_index = _u32(self.agent_index)
        self.action = _rows(self.action, len(self.agent_index))
        self.log_prob = np.asarray(self.log_prob, dtype=np.float32)
        self.value = np.asarray(self.value, dtype=np.float32)


@dataclass
class Goodbye:
    client_id: int
    reason: str = ""

    type = MessageType.GOODBYE


@dataclass
class Shutdown:
    reason: str = ""

    type = MessageType.SHUTDOWN


# -- payload codecs ---------------------------------------------------------------

def _put_hello(w: Writer, m: ClientHello):
    w.u16(m.protocol_version)
    w.u64(m.client_id)
    w.u32(m.num_processes)
    w.u32(m.agents_per_process)
    w.u16(m.obs_layout_version)
    w.u32(m.obs_dim)
    w.u8(m.mode)


def _get_hello(r: Reader) -> ClientHello:
    version, cid, procs, per, layout, dim, mode = (r.u16(), r.u64(), r.u32(), r.u32(), r.u16(), r.u32(), r.u8())
    return ClientHello(cid, procs, per, layout, dim, mode, version)


def _put_ack(w: Writer, m: HelloAck):
    w.u8(1 if m.accepted else 0)
    w.string(m.reason)


def _get_ack(r: Reader) -> HelloAck:
    return HelloAck(bool(r.u8()), r.string())


def _put_upload(w: Writer, m: StepUpload):
    n, dim = m.obs.shape
    w.u64(m.client_id)
    w.u64(m.tick)
    w.u32(n)
    w.u32(dim)
    w.u32(len(m.terminal_obs))
    w.array(m.agent_index, np.uint32)
    w.array(m.episode_id, np.uint32)
    w.array(m.reward, np.float32)
    w.array(m.flags, np.uint8)
    w.array(m.obs, np.float32)
    w.array(m.terminal_obs, np.float32)


def _get_upload(r: Reader) -> StepUpload:
    cid, tick, n, dim, k = r.u64(), r.u64(), r.u32(), r.u32(), r.u32()
    idx = r.array(np.uint32, n)
    eid = r.array(np.uint32, n)
    rew = r.array(np.float32, n)
    flags = r.array(np.uint8, n)
    obs = r.array(np.float32, n * dim).reshape(n, dim)
    term = r.array(np.float32, k * dim).reshape(k, dim)
    return StepUpload(cid, tick, idx, eid, obs, rew, flags, term)


def _put_download(w: Writer, m: ActionDownload):
    n, dim = m.action.shape
    w.u64(m.client_id)
    w.u64(m.tick)
    w.u32(n)
    w.u32(dim)
    w.array(m.agent_index, np.uint32)
    w.array(m.action, np.float32)
    w.array(m.log_prob, np.float32)
    w.array(m.value, np.float32)


def _get_download(r: Reader) -> ActionDownload:
    cid, tick, n, dim = r.u64(), r.u64(), r.u32(), r.u32()
    idx = r.array(np.uint32, n)
    act = r.array(np.float32, n * dim).reshape(n, dim)
    return ActionDownload(cid, tick, idx, act, r.array(np.float32, n), r.array(np.float32, n))


def _put_goodbye(w: Writer, m: Goodbye):
    w.u64(m.client_id)
    w.string(m.reason)


def _get_goodbye(r: Reader) -> Goodbye:
    return Goodbye(r.u64(), r.string())


def _put_shutdown(w: Writer, m: Shutdown):
    w.string(m.reason)


def _get_shutdown(r: Reader) -> Shutdown:
    return Shutdown(r.string())


_CODECS = {
    MessageType.HELLO: (_put_hello, _get_hello),
    MessageType.HELLO_ACK: (_put_ack, _get_ack),
    MessageType.STEP_UPLOAD: (_put_upload, _get_upload),
    MessageType.ACTION_DOWNLOAD: (_put_download, _get_download),
    MessageType.GOODBYE: (_put_goodbye, _get_goodbye),
    MessageType.SHUTDOWN: (_put_shutdown, _get_shutdown),
}


# -- framing -----------------------------------------------------------------------

def encode_frame(message) -> bytes:
    w = Writer()
    _CODECS[message.type][0](w, message)
    payload = w.getvalue()
    return binfmt.seal(HEADER.pack(MAGIC, PROTOCOL_VERSION, int(message.type), len(payload)) + payload)


def _check_header(header: bytes) -> tuple[int, int]:
    magic, version, mtype, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad frame magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise VersionError(f"protocol version {version}, expected {PROTOCOL_VERSION}")
    if length > MAX_PAYLOAD:
        raise FormatError(f"payload length {length} exceeds limit")
    return mtype, length


def _decode_payload(mtype: int, payload: bytes):
    try:
        kind = MessageType(mtype)
    except ValueError:
        raise UnknownTypeError(f"unknown message type {mtype}") from None
    r = Reader(payload)
    try:
        msg = _CODECS[kind][1](r)
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid {kind.name} payload: {exc}") from exc
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes in {kind.name} payload")
    return msg


def decode_frame(data: bytes):
    """Decode exactly one frame. Checks run magic, length, checksum, type, in that order."""
    data = bytes(data)
    if len(data) < HEADER.size:
        raise TruncatedError(f"short frame: {len(data)} bytes")
    mtype, length = _check_header(data[:HEADER.size])
    total = HEADER.size + length + TRAILER.size
    if len(data) < total:
        raise TruncatedError(f"short frame: {len(data)} of {total} bytes")
    if len(data) > total:
        raise FormatError(f"{len(data) - total} bytes after frame")
    binfmt.unseal(data)
    return _decode_payload(mtype, data[HEADER.size:HEADER.size + length])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise TruncatedError(f"connection closed mid-frame ({len(buf)} of {n} bytes)")
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket):
    """Read one frame from a stream socket and decode it."""
    header = _recv_exact(sock, HEADER.size)
    _, length = _check_header(header)
    rest = _recv_exact(sock, length + TRAILER.size)
    return decode_frame(header + rest)


def send_message(sock: socket.socket, message) -> None:
    sock.sendall(encode_frame(message))
