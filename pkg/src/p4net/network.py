"""Simulated peer-to-peer transport and in-group proxy aggregation.

Wire format (all integers little-endian)::

    offset  size  field
    0       4     magic  b"P4NT"
    4       2     version (u16, currently 1)
    6       1     kind (u8, see MessageKind)
    7       4     sender (u32)
    11      4     receiver (u32)
    15      4     round (u32)
    19      4     payload count (u32)
    23      ...   per tensor: rows (u32), cols (u32), rows*cols f64 values, row-major

The header is 23 bytes and a ``r x c`` tensor adds ``8 + 8*r*c`` bytes.
"""
from __future__ import annotations

import enum
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ParseError, ShapeError
from .numerics import RandomSource

MAGIC = b"P4NT"
VERSION = 1
_HEADER = struct.Struct("<4sHBIIII")
_DIMS = struct.Struct("<II")
HEADER_SIZE = _HEADER.size


class MessageKind(enum.IntEnum):
    PROBE_REQUEST = 1
    PROBE_WEIGHTS = 2
    GRADIENT_SHARE = 3
    MODEL_BROADCAST = 4
    GROUP_UPDATE = 5


def _as_tensor(t) -> np.ndarray:
    a = np.asarray(t, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"payload tensors must be 1-D or 2-D, got {a.shape}")
    return np.ascontiguousarray(a)


@dataclass(frozen=True)
class Message:
    """One protocol envelope. Vectors are carried as ``1 x n`` tensors."""

    kind: MessageKind
    sender: int
    receiver: int
    round: int
    payload: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        object.__setattr__(self, "payload", tuple(_as_tensor(t) for t in self.payload))
        for name in ("sender", "receiver", "round"):
            v = getattr(self, name)
            if not 0 <= v < 2**32:
                raise ParameterError(f"{name} {v} does not fit in u32")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        return (
            (self.kind, self.sender, self.receiver, self.round)
            == (other.kind, other.sender, other.receiver, other.round)
            and len(self.payload) == len(other.payload)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.payload, other.payload))
        )

    __hash__ = None

    def nbytes(self) -> int:
        return HEADER_SIZE + sum(_DIMS.size + 8 * t.size for t in self.payload)


def serialize(msg: Message) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.sender, msg.receiver, msg.round, len(msg.payload))]
    for t in msg.payload:
        parts.append(_DIMS.pack(*t.shape))
        parts.append(t.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def deserialize(buf: bytes) -> Message:
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE:
        raise ParseError("buffer shorter than header", field="header", offset=len(buf))
    magic, version, kind, sender, receiver, rnd, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", field="magic", offset=0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", field="version", offset=4)
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise ParseError(f"unknown message kind {kind}", field="kind", offset=6) from None
    pos = HEADER_SIZE
    tensors = []
    for k in range(count):
        if pos + _DIMS.size > len(buf):
            raise ParseError(f"truncated dims of tensor {k}", field="payload.dims", offset=pos)
        rows, cols = _DIMS.unpack_from(buf, pos)
        pos += _DIMS.size
        end = pos + 8 * rows * cols
        if end > len(buf):
            raise ParseError(f"truncated data of tensor {k}", field="payload.data", offset=pos)
        tensors.append(np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64))
        pos = end
    if pos != len(buf):
        raise ParseError(f"{len(buf) - pos} trailing bytes", field="payload", offset=pos)
    return Message(kind, sender, receiver, rnd, tuple(tensors))


@dataclass
class Bus:
    """In-process, bulk-synchronous message bus.

    Messages are serialized on send and decoded on receipt; each receiver has
    one FIFO queue so order within a sender/receiver pair is preserved.
    """

    drop_probability: float = 0.0
    rng: RandomSource | None = None
    record: bool = False
    queues: dict = field(default_factory=lambda: defaultdict(deque))
    sent: int = 0
    dropped: int = 0
    bytes_sent: int = 0
    log: list = field(default_factory=list)
    _last_round: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ParameterError("drop_probability must be in [0, 1]")
        if self.drop_probability > 0 and self.rng is None:
            raise ParameterError("a lossy bus needs a random source")

    def send(self, msg: Message) -> None:
        last = self._last_round.get(msg.sender, 0)
        if msg.round < last:
            raise ParameterError(f"sender {msg.sender} went back from round {last} to {msg.round}")
        self._last_round[msg.sender] = msg.round
        data = serialize(msg)
        self.sent += 1
        self.bytes_sent += len(data)
        if self.record:
            self.log.append(data)
        if self.drop_probability > 0 and self.rng.uniform() < self.drop_probability:
            self.dropped += 1
            return
        self.queues[msg.receiver].append(data)

    def receive(self, receiver: int) -> list[Message]:
        q = self.queues[receiver]
        out = [deserialize(q.popleft()) for _ in range(len(q))]
        return out

    def pending(self) -> int:
        return sum(len(q) for q in self.queues.values())


def elect_aggregator(members, round_: int, period: int = 10) -> int:
    """Round-robin aggregator: sorted members, index ``(round // period) mod size``."""
    members = sorted(members)
    if not members:
        raise ParameterError("cannot elect an aggregator in an empty group")
    if period < 1:
        raise ParameterError("rotation period must be at least 1")
    return members[(round_ // period) % len(members)]


def aggregate_proxy(updates) -> np.ndarray:
    """Coordinate-wise mean of parameter vectors.

    Values are summed in sorted order per coordinate so the result does not
    depend on the order the updates arrived in.
    """
    stack = [np.asarray(u, dtype=np.float64) for u in updates]
    if not stack:
        raise ParameterError("need at least one update")
    shape = stack[0].shape
    if any(u.shape != shape for u in stack):
        raise ShapeError("updates have mismatched shapes")
    return np.sort(np.stack(stack), axis=0).sum(axis=0) / len(stack)


def run_round(updates: dict, bus: Bus, round_: int, period: int = 10, ledgers: dict | None = None) -> dict:
    """Aggregate one group's locally trained proxies through its elected aggregator.

    Args:
        updates: member id -> flattened, DP-trained proxy parameters.
        bus: transport.
        round_: communication round index.
        period: aggregator rotation period in rounds.
        ledgers: member id -> PrivacyLedger; exhausted members are left out
            and live members are charged one round.

    Returns:
        Member id -> new proxy parameters for every member that took part.
    """
    live = sorted(updates)
    if ledgers is not None:
        live = [c for c in live if not ledgers[c].exhausted]
    if not live:
        return {}
    if ledgers is not None:
        for c in live:
            ledgers[c].charge()
    agg = elect_aggregator(live, round_, period)
    for c in live:
        if c != agg:
            bus.send(Message(MessageKind.GRADIENT_SHARE, c, agg, round_, (updates[c],)))
    received = {agg: np.asarray(updates[agg], dtype=np.float64)}
    for msg in bus.receive(agg):
        received[msg.sender] = msg.payload[0].ravel()
    mean = aggregate_proxy([received[c] for c in sorted(received)])
    out = {agg: mean}
    for c in live:
        if c != agg:
            bus.send(Message(MessageKind.MODEL_BROADCAST, agg, c, round_, (mean,)))
    for c in live:
        if c != agg:
            msgs = bus.receive(c)
            # a dropped broadcast leaves the member on its own update
            out[c] = msgs[-1].payload[0].ravel() if msgs else np.asarray(updates[c], dtype=np.float64)
    return out
