"""Binary messages exchanged between workers and the model store.

Layout (little-endian)::

    u32 length of everything that follows
    u8  kind
    u32 worker id
    u32 record count
    records...

Record bodies by kind:

    PUSH, PULL_REPLY      u32 tuner id, state
    PULL_REQUEST          u32 tuner id
    DYNAMIC_PUSH          u32 tuner id, u32 agent id, state (old epochs), state (current)
    DYNAMIC_PULL_REQUEST  u32 tuner id, u32 agent id
    DYNAMIC_PULL_REPLY    u32 tuner id, u32 agent id, state

A state is ``u32 length`` followed by that many bytes: a one-byte layout tag
(0 context-free, 1 contextual) and the state's flat record. Length 0 stands
for "no state" (unknown tuner).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .contextual import CoMomentState
from .stats import ArmStats

__all__ = ["Kind", "Record", "Message", "encode_state", "decode_state", "encode", "decode", "WireError"]

_U32 = struct.Struct("<I")
_HEAD = struct.Struct("<BII")


class WireError(ValueError):
    pass


class Kind(IntEnum):
    PUSH = 1
    PULL_REQUEST = 2
    PULL_REPLY = 3
    DYNAMIC_PUSH = 4
    DYNAMIC_PULL_REQUEST = 5
    DYNAMIC_PULL_REPLY = 6


_STATES_PER_KIND = {
    Kind.PUSH: 1,
    Kind.PULL_REQUEST: 0,
    Kind.PULL_REPLY: 1,
    Kind.DYNAMIC_PUSH: 2,
    Kind.DYNAMIC_PULL_REQUEST: 0,
    Kind.DYNAMIC_PULL_REPLY: 1,
}
_HAS_AGENT = {Kind.DYNAMIC_PUSH, Kind.DYNAMIC_PULL_REQUEST, Kind.DYNAMIC_PULL_REPLY}


@dataclass
class Record:
    tuner_id: int
    states: tuple = ()
    agent_id: int | None = None


@dataclass
class Message:
    kind: Kind
    worker_id: int
    records: list = field(default_factory=list)


def encode_state(state) -> bytes:
    if state is None:
        return _U32.pack(0)
    if isinstance(state, ArmStats):
        body = b"\x00" + state.to_bytes()
    elif isinstance(state, CoMomentState):
        body = b"\x01" + state.to_bytes()
    else:
        raise WireError(f"cannot serialize {type(state).__name__}")
    return _U32.pack(len(body)) + body


def decode_state(buf: bytes, offset: int):
    (length,) = _U32.unpack_from(buf, offset)
    offset += _U32.size
    if length == 0:
        return None, offset
    body = buf[offset : offset + length]
    if len(body) != length:
        raise WireError("truncated state")
    tag, payload = body[0], body[1:]
    if tag == 0:
        state = ArmStats.from_bytes(payload)
    elif tag == 1:
        state = CoMomentState.from_bytes(payload)
    else:
        raise WireError(f"unknown state layout tag {tag}")
    return state, offset + length


def encode(msg: Message) -> bytes:
    kind = Kind(msg.kind)
    parts = [_HEAD.pack(kind, msg.worker_id, len(msg.records))]
    want = _STATES_PER_KIND[kind]
    for rec in msg.records:
        parts.append(_U32.pack(rec.tuner_id))
        if kind in _HAS_AGENT:
            if rec.agent_id is None:
                raise WireError(f"{kind.name} records need an agent id")
            parts.append(_U32.pack(rec.agent_id))
        if len(rec.states) != want:
            raise WireError(f"{kind.name} records carry {want} states, got {len(rec.states)}")
        parts.extend(encode_state(s) for s in rec.states)
    body = b"".join(parts)
    return _U32.pack(len(body)) + body


def decode(buf: bytes) -> Message:
    if len(buf) < _U32.size + _HEAD.size:
        raise WireError("message too short")
    (length,) = _U32.unpack_from(buf, 0)
    if length != len(buf) - _U32.size:
        raise WireError(f"length prefix {length} does not match body of {len(buf) - _U32.size} bytes")
    raw_kind, worker_id, count = _HEAD.unpack_from(buf, _U32.size)
    try:
        kind = Kind(raw_kind)
    except ValueError as exc:
        raise WireError(f"unknown message kind {raw_kind}") from exc
    offset = _U32.size + _HEAD.size
    records = []
    for _ in range(count):
        (tuner_id,) = _U32.unpack_from(buf, offset)
        offset += _U32.size
        agent_id = None
        if kind in _HAS_AGENT:
            (agent_id,) = _U32.unpack_from(buf, offset)
            offset += _U32.size
        states = []
        for _ in range(_STATES_PER_KIND[kind]):
            state, offset = decode_state(buf, offset)
            states.append(state)
        records.append(Record(tuner_id, tuple(states), agent_id))
    if offset != len(buf):
        raise WireError("trailing bytes after last record")
    return Message(kind, worker_id, records)
