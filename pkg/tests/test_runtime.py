import numpy as np
import pytest

import errors
from backend import BackendRegistry, KernelOp
from network import FaultPlan, MsgType, PartySession
from oracle import interpret
from preprocessing_io import InputBundle
from runtime import output_digest, run_local
from scheduler import TraceValidator
from tests.helpers import compile_fixture, deal_for

CASES = [
    ("straight_line.ll", {"x": [3, 4], "y": [5]}, 1),
    ("diamond.ll", {"x": [3, 4], "k": 9}, 1),
    ("diamond.ll", {"x": [3, 4], "k": 2}, 1),
    ("loop.ll", {"x": [7], "n": 6}, 6),
    ("nested_loop.ll", {"x": [5], "n": 3, "m": 4}, 4),
    ("loop_after_loop.ll", {"x": [2, 3], "n": 3}, 3),
    ("idioms.ll", {"x": [11, 13], "bits": [1, 1]}, 1),
]


def run(name, inputs, n=2, trips=1, seed=0, **kw):
    graph = compile_fixture(name)
    stores, _ = deal_for(graph, n, seed, loop_trips=trips, slice_size=kw.get("slice_size", 262140))
    return graph, run_local(graph, stores, InputBundle.from_mapping(inputs), **kw)


@pytest.mark.parametrize("name, inputs, trips", CASES)
def test_two_party_run_matches_oracle(name, inputs, trips):
    graph, results = run(name, inputs, trips=trips)
    expect = interpret(graph, inputs)
    assert [r.outputs for r in results] == [expect, expect]
    assert results[0].digest == results[1].digest == output_digest(expect)
    assert all(r.mac_checks >= 1 for r in results)


@pytest.mark.parametrize("n", [3, 4])
def test_more_parties(n):
    inputs = {"x": [3, 4], "y": [5]}
    graph, results = run("straight_line.ll", inputs, n=n, seed=n)
    assert {tuple(r.outputs) for r in results} == {tuple(interpret(graph, inputs))}


@pytest.mark.parametrize("workers", [2, 4])
def test_worker_count_does_not_change_outputs(workers):
    inputs = {"x": [5], "n": 3, "m": 4}
    graph, results = run("nested_loop.ll", inputs, trips=4, workers=workers, trace=True)
    assert results[0].outputs == interpret(graph, inputs)
    validator = TraceValidator(graph)
    for r in results:
        assert validator.violations(r.trace.events) == []


def test_straight_line_accounting():
    _, results = run("straight_line.ll", {"x": [3, 4], "y": [5]})
    for r in results:
        assert r.consumed == {"scalar": 2, "tiles": 0, "masks": 3}
        assert sum(r.traffic["bytes_sent"].values()) > 0
        assert r.issued > 0


def test_tiled_linear_layer():
    rng = np.random.default_rng(8)
    inputs = {"x": rng.integers(0, 1000, 64).tolist(), "W": rng.integers(0, 1000, 64 * 32).tolist(),
              "b": rng.integers(0, 1000, 32).tolist()}
    graph, results = run("linear_layer.ll", inputs, slice_size=640, workers=2)
    expect = interpret(graph, inputs)
    assert len(expect) == 32
    assert all(r.outputs == expect for r in results)
    assert results[0].consumed["tiles"] == 4


def test_frequent_mac_checks():
    inputs = {"x": [7], "n": 5}
    graph, results = run("loop.ll", inputs, trips=5, mac_threshold=1)
    assert results[0].outputs == interpret(graph, inputs)
    assert all(r.mac_checks > 2 for r in results)


def test_reordered_and_delayed_frames_do_not_change_outputs():
    plan = FaultPlan().reorder(0, 1, MsgType.OPEN_SHARES, hold_batches=1).delay(1, 0, MsgType.OPEN_SHARES,
                                                                                seconds=0.02)
    inputs = {"x": [2, 3], "n": 3}
    graph, results = run("loop_after_loop.ll", inputs, trips=3, fault_plan=plan, workers=2)
    assert results[1].outputs == interpret(graph, inputs)


def test_tampered_opening_fails_the_mac_check():
    plan = FaultPlan().bit_flip(1, 0, MsgType.OPEN_SHARES, nth=0, lane=0, bit=3)
    with pytest.raises(errors.MacCheckFailed):
        run("straight_line.ll", {"x": [3, 4], "y": [5]}, fault_plan=plan, io_timeout=5.0)


def test_loop_running_past_provisioned_triples():
    with pytest.raises(errors.TripleExhausted):
        run("loop.ll", {"x": [7], "n": 5}, trips=2, io_timeout=5.0)


def test_private_branch_fails_at_runtime():
    with pytest.raises(errors.SecretControlFlow):
        run("secret_branch.ll", {"x": [4], "flag": [1]}, io_timeout=5.0)


def test_unknown_transport():
    graph = compile_fixture("straight_line.ll")
    stores, _ = deal_for(graph)
    with pytest.raises(ValueError):
        run_local(graph, stores, None, transport="carrier-pigeon")


@pytest.mark.slow
def test_socket_transport():
    inputs = {"x": [3, 4], "y": [5]}
    graph, results = run("straight_line.ll", inputs, n=3, transport="socket", io_timeout=10.0)
    assert all(r.outputs == interpret(graph, inputs) for r in results)
    assert all(r.connections == 2 for r in results)


@pytest.mark.slow
def test_socket_and_simulated_runs_agree():
    inputs = {"x": [5], "n": 3, "m": 4}
    graph = compile_fixture("nested_loop.ll")
    stores, _ = deal_for(graph, 2, seed=6, loop_trips=4)
    sim = run_local(graph, stores, InputBundle.from_mapping(inputs), workers=2)
    stores, _ = deal_for(graph, 2, seed=6, loop_trips=4)
    wired = run_local(graph, stores, InputBundle.from_mapping(inputs), workers=2, transport="socket", io_timeout=10.0)
    assert [r.outputs for r in sim] == [r.outputs for r in wired]
    assert [r.digest for r in sim] == [r.digest for r in wired]
    assert [r.consumed for r in sim] == [r.consumed for r in wired]


def test_every_party_draws_the_same_batch_ids(monkeypatch):
    drawn = {}
    take = PartySession.next_batch_ids

    def recording(self, count=1):
        ids = take(self, count)
        drawn.setdefault(self.party, []).extend(ids)
        return ids

    monkeypatch.setattr(PartySession, "next_batch_ids", recording)
    inputs = {"x": [5], "n": 3, "m": 4}
    graph, results = run("nested_loop.ll", inputs, trips=4, workers=2)
    assert results[0].outputs == interpret(graph, inputs)
    assert drawn[0] == drawn[1]
    assert drawn[0] == list(range(1, len(drawn[0]) + 1))


def test_private_products_go_through_the_backend(monkeypatch):
    ops = []
    execute = BackendRegistry.execute

    def recording(self, req):
        ops.append(req.op)
        return execute(self, req)

    monkeypatch.setattr(BackendRegistry, "execute", recording)
    inputs = {"x": [3, 4], "y": [5]}
    graph, results = run("straight_line.ll", inputs)
    assert results[0].outputs == interpret(graph, inputs)
    assert ops.count(KernelOp.BEAVER) == 4
