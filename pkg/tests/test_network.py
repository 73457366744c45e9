import socket
import time

import numpy as np
import pytest

import errors
import field as ff
from network import (
    HEADER, MAX_BATCH_ID, BatchIdSequence, FaultPlan, Frame, MsgType, PartyConfig, SimulatedNetwork,
    broadcast_from, broadcast_open, connect_mesh, decode_frame, encode_frame, exchange,
)
from runtime import _free_ports
from tests.helpers import run_parties, run_parties_collect


def test_frame_layout():
    frame = Frame(MsgType.OPEN_SHARES, (1 << 40) + 7, ff.as_batch([1, 2, 3]))
    data = encode_frame(frame)
    assert HEADER.size == 16
    assert len(data) == 16 + 3 * 4
    assert data[0] == 1
    back = decode_frame(data)
    assert back.msg_type == MsgType.OPEN_SHARES
    assert back.batch_id == frame.batch_id
    assert back.payload.tolist() == [1, 2, 3]


def test_batch_ids_strictly_increase():
    seq = BatchIdSequence()
    ids = seq.take(65537) + seq.take(3) + [seq.take_one()]
    assert ids[0] == 1
    assert len(set(ids)) == len(ids) == 65541
    assert all(b > a for a, b in zip(ids, ids[1:]))
    assert seq.issued == 65541
    assert seq.take(0) == []
    with pytest.raises(ValueError):
        seq.take(-1)


def test_batch_ids_refuse_to_wrap():
    seq = BatchIdSequence(start=MAX_BATCH_ID - 1)
    assert seq.take(2) == [MAX_BATCH_ID - 1, MAX_BATCH_ID]
    with pytest.raises(errors.BatchIdExhausted):
        seq.take_one()
    frame = Frame(MsgType.CONTROL, MAX_BATCH_ID, ff.as_batch([1]))
    assert decode_frame(encode_frame(frame)).batch_id == MAX_BATCH_ID


def test_batch_ids_are_unique_across_threads():
    from concurrent.futures import ThreadPoolExecutor
    seq = BatchIdSequence()
    with ThreadPoolExecutor(max_workers=8) as pool:
        chunks = list(pool.map(lambda _: seq.take(50), range(40)))
    flat = [b for chunk in chunks for b in chunk]
    assert sorted(flat) == list(range(1, 2001))
    assert all(chunk == list(range(chunk[0], chunk[0] + 50)) for chunk in chunks)


def test_sessions_hand_out_ids_in_the_same_order():
    net = SimulatedNetwork(3)
    sessions = net.sessions()
    drawn = [s.next_batch_ids(2) + s.next_batch_ids(1) for s in sessions]
    net.close()
    assert drawn == [[1, 2, 3]] * 3


def test_malformed_frames_are_rejected():
    good = encode_frame(Frame(MsgType.COMMIT, 1, ff.as_batch([5, 6])))
    with pytest.raises(errors.MalformedShareMessage):
        decode_frame(good[:-1])
    with pytest.raises(errors.MalformedShareMessage):
        decode_frame(bytes([9]) + good[1:])


def test_exchange_and_broadcasts():
    net = SimulatedNetwork(3)
    sessions = net.sessions()

    def party(s):
        everyone = exchange(s, MsgType.NONCE, 1, ff.as_batch([s.party * 10]))
        total = broadcast_open(s, ff.as_batch([s.party + 1, 1]), 2)
        announced = broadcast_from(s, 1, 3, ff.as_batch([77]) if s.party == 1 else None)
        return sorted((p, int(v[0])) for p, v in everyone.items()), total.tolist(), announced.tolist()

    results = run_parties(party, sessions)
    net.close()
    for everyone, total, announced in results:
        assert everyone == [(0, 0), (1, 10), (2, 20)]
        assert total == [6, 3]
        assert announced == [77]


def test_traffic_counters_are_exact():
    net = SimulatedNetwork(2)
    sessions = net.sessions()
    run_parties(lambda s: broadcast_open(s, ff.as_batch([1, 2, 3, 4]), 9), sessions)
    net.close()
    frame_size = 16 + 4 * 4
    for s in sessions:
        snap = s.counters.snapshot()
        peer = 1 - s.party
        assert snap["bytes_sent"] == {peer: frame_size}
        assert snap["bytes_received"] == {peer: frame_size}


def test_frames_match_by_batch_id_not_arrival_order():
    plan = FaultPlan().reorder(0, 1, MsgType.OPEN_SHARES, hold_batches=1)
    net = SimulatedNetwork(2, plan)
    sessions = net.sessions()

    def party(s):
        first = broadcast_open(s, ff.as_batch([s.party + 1]), 100)
        second = broadcast_open(s, ff.as_batch([10 * (s.party + 1)]), 101)
        return int(first[0]), int(second[0])

    results = run_parties(party, sessions)
    net.close()
    assert results == [(3, 30), (3, 30)]
    assert len(plan.applied) == 1


def test_delay_is_absorbed():
    plan = FaultPlan().delay(1, 0, MsgType.OPEN_SHARES, seconds=0.2)
    net = SimulatedNetwork(2, plan)
    sessions = net.sessions()
    started = time.monotonic()
    results = run_parties(lambda s: broadcast_open(s, ff.as_batch([s.party]), 5).tolist(), sessions)
    net.close()
    assert results == [[1], [1]]
    assert time.monotonic() - started >= 0.2


def test_bit_flip_changes_the_opened_value():
    plan = FaultPlan().bit_flip(1, 0, MsgType.OPEN_SHARES, nth=0, lane=0, bit=0)
    net = SimulatedNetwork(2, plan)
    sessions = net.sessions()
    results = run_parties(lambda s: int(broadcast_open(s, ff.as_batch([2 * s.party]), 5)[0]), sessions)
    net.close()
    assert results == [3, 2]


def test_duplicate_frame_is_malformed():
    net = SimulatedNetwork(2)
    sessions = net.sessions(io_timeout=1.0)
    frame = Frame(MsgType.CONTROL, 4, ff.as_batch([1]))
    sessions[0].send(1, frame)
    sessions[0].send(1, frame)
    with pytest.raises(errors.MalformedShareMessage):
        sessions[1].mailbox.expect(0, MsgType.CONTROL, 5).result(timeout=1.0)
    net.close()


def test_missing_peer_times_out():
    net = SimulatedNetwork(2)
    sessions = net.sessions(io_timeout=0.2)
    with pytest.raises(errors.PeerTimeout):
        broadcast_open(sessions[0], ff.as_batch([1]), 1)
    net.close()


def test_lane_count_mismatch():
    net = SimulatedNetwork(2)
    sessions = net.sessions(io_timeout=2.0)

    def party(s):
        return broadcast_open(s, ff.as_batch([1] * (s.party + 1)), 1)

    outcomes = run_parties_collect(party, sessions)
    net.close()
    assert any(isinstance(o, errors.LaneCountMismatch) for o in outcomes)


def test_endpoint_config_validation():
    with pytest.raises(ValueError):
        PartyConfig(0, 3, {0: ("127.0.0.1", 1), 1: ("127.0.0.1", 2)})
    with pytest.raises(ValueError):
        PartyConfig(5, 2, {0: ("127.0.0.1", 1), 1: ("127.0.0.1", 2)})


@pytest.mark.slow
def test_socket_mesh_exchanges_frames():
    n = 3
    endpoints = {i: ("127.0.0.1", p) for i, p in enumerate(_free_ports(n))}

    def party(i):
        session = connect_mesh(PartyConfig(i, n, endpoints, connect_timeout=5.0, io_timeout=5.0))
        try:
            return session.connection_count, broadcast_open(session, ff.as_batch([i, 1]), 42).tolist()
        finally:
            time.sleep(0.2)
            session.close()

    results = run_parties(party, list(range(n)))
    assert results == [(2, [3, 3])] * n


@pytest.mark.slow
def test_socket_mesh_times_out_without_peers():
    endpoints = {i: ("127.0.0.1", p) for i, p in enumerate(_free_ports(2))}
    with pytest.raises(errors.ConnectTimeout):
        connect_mesh(PartyConfig(1, 2, endpoints, connect_timeout=0.3))
