import struct

import numpy as np
import pytest

from adaptune.contextual import CoMomentState
from adaptune.stats import ArmStats
from adaptune.wire import Kind, Message, Record, WireError, decode, encode


def arm_state(rng, arms=3):
    s = ArmStats.empty(arms)
    for _ in range(20):
        s = s.observe(int(rng.integers(arms)), float(rng.standard_normal()))
    return s


def ctx_state(rng, arms=2, f=3):
    s = CoMomentState.empty(f, arms)
    for _ in range(20):
        s = s.observe(int(rng.integers(arms)), rng.standard_normal(f), float(rng.standard_normal()))
    return s


def same(a, b):
    return (a is None and b is None) or a.equals(b)


@pytest.mark.parametrize("kind", list(Kind))
def test_roundtrip_every_kind(kind, rng):
    states = {Kind.PUSH: 1, Kind.PULL_REPLY: 1, Kind.DYNAMIC_PUSH: 2, Kind.DYNAMIC_PULL_REPLY: 1}.get(kind, 0)
    agent = 9 if kind >= Kind.DYNAMIC_PUSH else None
    recs = [
        Record(1, tuple(arm_state(rng) for _ in range(states)), agent),
        Record(2, tuple(ctx_state(rng) for _ in range(states)), agent),
    ]
    msg = Message(kind, 4, recs)
    back = decode(encode(msg))
    assert back.kind == kind and back.worker_id == 4 and len(back.records) == 2
    for a, b in zip(recs, back.records):
        assert a.tuner_id == b.tuner_id and a.agent_id == b.agent_id
        assert all(same(x, y) for x, y in zip(a.states, b.states))


def test_header_layout(rng):
    data = encode(Message(Kind.PULL_REQUEST, 7, [Record(3), Record(5)]))
    length, kind, worker, count = struct.unpack_from("<IBII", data)
    assert length == len(data) - 4 and kind == 2 and worker == 7 and count == 2
    assert struct.unpack_from("<II", data, 13) == (3, 5)


def test_unknown_tuner_state_is_empty_payload():
    data = encode(Message(Kind.PULL_REPLY, 1, [Record(8, (None,))]))
    assert decode(data).records[0].states == (None,)


def test_bad_length_prefix(rng):
    data = bytearray(encode(Message(Kind.PUSH, 1, [Record(1, (arm_state(rng),))])))
    with pytest.raises(WireError):
        decode(bytes(data[:-1]))
    with pytest.raises(WireError):
        decode(bytes(data) + b"\x00")


def test_unknown_kind():
    body = struct.pack("<BII", 99, 0, 0)
    with pytest.raises(WireError):
        decode(struct.pack("<I", len(body)) + body)


def test_state_count_checked(rng):
    with pytest.raises(WireError):
        encode(Message(Kind.DYNAMIC_PUSH, 1, [Record(1, (arm_state(rng),), 0)]))
    with pytest.raises(WireError):
        encode(Message(Kind.DYNAMIC_PULL_REQUEST, 1, [Record(1)]))


def test_floats_little_endian(rng):
    s = ArmStats.empty(1).observe(0, 1.5)
    data = encode(Message(Kind.PUSH, 0, [Record(1, (s,))]))
    assert np.frombuffer(data[-16:-8], dtype="<f8")[0] == 1.5
