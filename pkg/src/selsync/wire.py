"""Envelope kinds and the length-prefixed wire format.

Frame layout: 4-byte big-endian payload length, 1-byte kind tag, 2-byte
sender index (0xFFFF is the server), 8-byte step, then the payload.
Parameter and gradient payloads are little-endian float64 in flat layout
order; flag payloads are exactly ceil(N/8) bytes, one bit per worker,
LSB-first within each byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, TransportError

PULL_REQUEST = 0
GLOBAL_PARAMS = 1
PUSH_PARAMS = 2
PUSH_GRAD = 3
FLAG_BITS = 4
DATA_SHARE = 5
ITERATION_REPORT = 6
SHUTDOWN = 7

KIND_NAMES = {
    PULL_REQUEST: "PullRequest",
    GLOBAL_PARAMS: "GlobalParams",
    PUSH_PARAMS: "PushParams",
    PUSH_GRAD: "PushGrad",
    FLAG_BITS: "FlagBits",
    DATA_SHARE: "DataShare",
    ITERATION_REPORT: "IterationReport",
    SHUTDOWN: "Shutdown",
}

PS_SENDER = 0xFFFF

# kinds whose payload bytes count toward the communication totals; the
# metrics channel and shutdown control traffic are out of band
COUNTED_KINDS = frozenset({PULL_REQUEST, GLOBAL_PARAMS, PUSH_PARAMS, PUSH_GRAD, FLAG_BITS, DATA_SHARE})

_HEADER = struct.Struct(">IBHQ")
HEADER_SIZE = _HEADER.size
MAX_PAYLOAD = 1 << 30


@dataclass
class Envelope:
    kind: int
    sender: int
    step: int
    payload: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if self.kind not in KIND_NAMES:
            raise ProtocolError(f"unknown envelope kind {self.kind}")
        if not (0 <= self.sender <= 0xFFFF):
            raise ProtocolError(f"sender index {self.sender} does not fit in 2 bytes")
        if self.step < 0:
            raise ProtocolError(f"step must be non-negative, got {self.step}")

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[self.kind]


def encode_frame(env: Envelope) -> bytes:
    if len(env.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(env.payload)} bytes exceeds the frame limit")
    return _HEADER.pack(len(env.payload), env.kind, env.sender, env.step) + env.payload


def frame_size(env: Envelope) -> int:
    """On-the-wire size of the envelope: fixed header plus payload."""
    return _HEADER.size + len(env.payload)


def json_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def payload_json(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed report payload: {exc}") from exc


def decode_frame(buf: bytes) -> Envelope:
    """Decode one complete frame; raises if the buffer is short or oversized."""
    if len(buf) < _HEADER.size:
        raise TransportError(f"frame truncated at {len(buf)} bytes")
    length, kind, sender, step = _HEADER.unpack_from(buf)
    if len(buf) != _HEADER.size + length:
        raise TransportError(f"frame length mismatch: header says {length} payload bytes")
    return Envelope(kind, sender, step, buf[_HEADER.size :])


def read_frame(read_exactly) -> Envelope:
    """Read one frame via a callable that returns exactly n bytes (or raises)."""
    header = read_exactly(_HEADER.size)
    length, kind, sender, step = _HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise TransportError(f"declared payload of {length} bytes exceeds the frame limit")
    payload = read_exactly(length) if length else b""
    return Envelope(kind, sender, step, payload)


def vector_to_bytes(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def bytes_to_vector(payload: bytes, expected: int | None = None) -> np.ndarray:
    if len(payload) % 8 != 0:
        raise ProtocolError(f"vector payload of {len(payload)} bytes is not a float64 multiple")
    out = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if expected is not None and out.size != expected:
        raise ProtocolError(f"expected {expected} values, payload holds {out.size}")
    return out


def flag_word_size(n_workers: int) -> int:
    return (n_workers + 7) // 8


def flag_word(n_workers: int, set_ids) -> bytes:
    word = bytearray(flag_word_size(n_workers))
    for i in set_ids:
        if not (0 <= i < n_workers):
            raise ProtocolError(f"flag bit {i} out of range for {n_workers} workers")
        word[i // 8] |= 1 << (i % 8)
    return bytes(word)


def or_words(words, n_workers: int) -> bytes:
    size = flag_word_size(n_workers)
    out = bytearray(size)
    for w in words:
        if len(w) != size:
            raise ProtocolError(f"flag word of {len(w)} bytes, expected {size}")
        for i, b in enumerate(w):
            out[i] |= b
    return bytes(out)


def any_flag(word: bytes) -> bool:
    return any(word)


def flags_in_word(word: bytes, n_workers: int) -> list[bool]:
    return [bool(word[i // 8] >> (i % 8) & 1) for i in range(n_workers)]


def samples_to_bytes(features: np.ndarray, labels: np.ndarray) -> bytes:
    """4-byte big-endian row count, features as little-endian float64, labels as int64."""
    k = features.shape[0]
    return (
        struct.pack(">I", k)
        + np.ascontiguousarray(features, dtype="<f8").tobytes()
        + np.ascontiguousarray(labels, dtype="<i8").tobytes()
    )


def bytes_to_samples(payload: bytes, dim: int) -> tuple[np.ndarray, np.ndarray]:
    if len(payload) < 4:
        raise ProtocolError("sample payload shorter than its count header")
    (k,) = struct.unpack_from(">I", payload)
    need = 4 + k * dim * 8 + k * 8
    if len(payload) != need:
        raise ProtocolError(f"sample payload is {len(payload)} bytes, expected {need}")
    feats = np.frombuffer(payload, dtype="<f8", count=k * dim, offset=4)
    labels = np.frombuffer(payload, dtype="<i8", count=k, offset=4 + k * dim * 8)
    return feats.reshape(k, dim).astype(np.float64), labels.astype(np.int64)
