import inspect
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from p4net.errors import ParameterError, ParseError, ShapeError
from p4net.network import (HEADER_SIZE, Bus, Message, MessageKind, aggregate_proxy, deserialize,
                           elect_aggregator, run_round, serialize)
from p4net.numerics import RandomSource
from p4net.privacy import PrivacyLedger

u32 = st.integers(0, 2**32 - 1)
tensors = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=0, max_side=5),
                     elements=st.floats(allow_nan=False))
messages = st.builds(Message, st.sampled_from(list(MessageKind)), u32, u32, u32,
                     st.lists(tensors, max_size=3).map(tuple))


@given(messages)
def test_roundtrip(msg):
    data = serialize(msg)
    assert len(data) == msg.nbytes()
    assert deserialize(data) == msg


def test_byte_layout():
    msg = Message(MessageKind.GRADIENT_SHARE, 1, 2, 3, (np.array([[1.0, 2.0], [3.0, 4.0]]),))
    data = serialize(msg)
    assert HEADER_SIZE == 23
    assert len(data) == 23 + 8 + 4 * 8
    assert data[:4] == b"P4NT"
    assert struct.unpack_from("<HBIIII", data, 4) == (1, 3, 1, 2, 3, 1)
    assert struct.unpack_from("<II", data, 23) == (2, 2)
    assert struct.unpack_from("<4d", data, 31) == (1.0, 2.0, 3.0, 4.0)


def test_vectors_travel_as_row_tensors():
    msg = Message(MessageKind.MODEL_BROADCAST, 0, 1, 0, (np.arange(3.0),))
    assert deserialize(serialize(msg)).payload[0].shape == (1, 3)
    with pytest.raises(ShapeError):
        Message(MessageKind.MODEL_BROADCAST, 0, 1, 0, (np.zeros((2, 2, 2)),))
    with pytest.raises(ParameterError):
        Message(MessageKind.MODEL_BROADCAST, -1, 1, 0)


@pytest.mark.parametrize("mutate, field", [
    (lambda b: b[:10], "header"),
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x02\x00" + b[6:], "version"),
    (lambda b: b[:6] + b"\x09" + b[7:], "kind"),
    (lambda b: b[:27], "payload.dims"),
    (lambda b: b[:-1], "payload.data"),
    (lambda b: b + b"\x00", "payload"),
])
def test_malformed_buffers(mutate, field):
    good = serialize(Message(MessageKind.GRADIENT_SHARE, 1, 2, 3, (np.ones((2, 2)),)))
    with pytest.raises(ParseError) as err:
        deserialize(mutate(good))
    assert err.value.field == field


def test_every_truncation_is_a_parse_error():
    good = serialize(Message(MessageKind.PROBE_WEIGHTS, 1, 2, 3, (np.ones((1, 3)), np.ones((2, 1)))))
    for cut in range(len(good)):
        with pytest.raises(ParseError):
            deserialize(good[:cut])


def test_election():
    members = [7, 2, 9, 4]
    assert {elect_aggregator(members, r, 10) for r in range(10)} == {2}
    assert {elect_aggregator(members, r, 10) for r in range(10, 20)} == {4}
    assert all(elect_aggregator([5], r, 3) == 5 for r in range(30))
    counts = np.bincount([elect_aggregator(range(4), r, 10) for r in range(40)])
    assert counts.tolist() == [10, 10, 10, 10]
    with pytest.raises(ParameterError):
        elect_aggregator([], 0)


def test_aggregate():
    np.testing.assert_array_equal(aggregate_proxy([[1.0, 3.0], [3.0, 5.0]]), [2.0, 4.0])
    np.testing.assert_array_equal(aggregate_proxy([[1.5, 2.0]] * 3), [1.5, 2.0])
    rng = np.random.default_rng(0)
    ups = list(rng.normal(size=(7, 5)))
    np.testing.assert_array_equal(aggregate_proxy(ups), aggregate_proxy(ups[::-1]))
    with pytest.raises(ShapeError):
        aggregate_proxy([[1.0], [1.0, 2.0]])


@pytest.mark.parametrize("size", [1, 2, 3, 5])
def test_round_counts_and_bit_identity(size):
    rng = np.random.default_rng(size)
    updates = {c: rng.normal(size=6) for c in range(10, 10 + size)}
    bus = Bus()
    for r in range(25):
        out = run_round(updates, bus, r, period=4)
        assert bus.sent == 2 * (size - 1) * (r + 1)
        vals = list(out.values())
        assert all(np.array_equal(vals[0], v) for v in vals)
    assert bus.dropped == 0 and bus.pending() == 0


def test_exhausted_members_are_left_out():
    ledgers = {0: PrivacyLedger(5), 1: PrivacyLedger(0), 2: PrivacyLedger(5)}
    bus = Bus()
    out = run_round({c: np.full(2, float(c)) for c in range(3)}, bus, 0, ledgers=ledgers)
    assert sorted(out) == [0, 2] and bus.sent == 2
    np.testing.assert_array_equal(out[0], [1.0, 1.0])
    assert ledgers[0].rounds_used == 1 and ledgers[1].rounds_used == 0
    assert run_round({1: np.zeros(2)}, bus, 1, ledgers=ledgers) == {}


def test_lossy_bus_and_round_order():
    bus = Bus(drop_probability=1.0, rng=RandomSource(0))
    out = run_round({0: np.zeros(2), 1: np.ones(2)}, bus, 0)
    # the share and the broadcast are both lost; each side keeps what it had
    assert bus.dropped == 2 and bus.sent == 2
    np.testing.assert_array_equal(out[0], np.zeros(2))
    np.testing.assert_array_equal(out[1], np.ones(2))
    with pytest.raises(ParameterError):
        Bus(drop_probability=0.5)
    b = Bus()
    b.send(Message(MessageKind.GROUP_UPDATE, 0, 1, 5))
    with pytest.raises(ParameterError):
        b.send(Message(MessageKind.GROUP_UPDATE, 0, 1, 4))


def test_private_models_have_no_path_to_the_bus():
    import re

    from p4net import runner
    from p4net.runner import ClientState
    body = inspect.getsource(ClientState.share).split('"""')[-1]
    assert "proxy" in body and "private" not in body
    # every payload built by the orchestration comes from share(), a probe row, or the global model
    for call in re.findall(r"Message\((.*?)\)\)", inspect.getsource(runner), flags=re.S):
        assert "private" not in call
