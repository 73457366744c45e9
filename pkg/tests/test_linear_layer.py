import numpy as np
import pytest

import errors
import field as ff
from dealer import fake_dealer
from graph_builder import TripleDemand
from linear_layer import plan_tiles, run_linear_layer, run_tile
from network import SimulatedNetwork
from spdz import check_mac_consistency, reconstruct, share_batch
from tests.helpers import run_parties


def test_plan_tiles():
    plan = plan_tiles(64, 32, 640)
    assert plan.tiles == [(0, 10), (10, 10), (20, 10), (30, 2)]
    assert plan.rows_per_tile == 10
    assert plan_tiles(64, 32, 1 << 20).tiles == [(0, 32)]
    with pytest.raises(errors.SliceTooSmall):
        plan_tiles(64, 32, 63)
    with pytest.raises(ValueError):
        plan_tiles(0, 4)


def _layer_setup(din, dout, slice_size, n=2, seed=11):
    rng = np.random.default_rng(seed)
    demand = TripleDemand()
    for _, rows in plan_tiles(din, dout, slice_size).tiles:
        demand.matrix[(rows, din)] = demand.matrix.get((rows, din), 0) + 1
    stores, alpha = fake_dealer(n, demand, seed)
    x = ff.random_batch(rng, din)
    w = ff.random_batch(rng, din * dout)
    b = ff.random_batch(rng, dout)
    expect = ff.batch_add(ff.matvec_mod(w.reshape(dout, din), x), b)
    return rng, stores, alpha, x, w, b, expect


@pytest.mark.parametrize("order", [None, [3, 2, 1, 0], [1, 3, 0, 2]])
def test_private_layer_any_completion_order(order):
    din, dout, slice_size = 8, 14, 32
    rng, stores, alpha, x, w, b, expect = _layer_setup(din, dout, slice_size)
    xs, ws = share_batch(x, 2, alpha, rng), share_batch(w, 2, alpha, rng)
    net = SimulatedNetwork(2)
    sessions = net.sessions([s.alpha_share for s in stores], stores)

    def party(s):
        return run_linear_layer((din, dout), xs[s.party], ws[s.party], b, s, slice_size=slice_size,
                                completion_order=order, batch_ids=[100 + t for t in range(4)])

    out = run_parties(party, sessions)
    net.close()
    assert reconstruct(out).tolist() == expect.tolist()
    assert check_mac_consistency(out, alpha)
    assert stores[0].consumed()["tiles"] == 4


def test_private_bias():
    din, dout, slice_size = 5, 3, 100
    rng, stores, alpha, x, w, b, expect = _layer_setup(din, dout, slice_size, n=3)
    xs, ws, bs = (share_batch(v, 3, alpha, rng) for v in (x, w, b))
    net = SimulatedNetwork(3)
    sessions = net.sessions([s.alpha_share for s in stores], stores)
    out = run_parties(lambda s: run_linear_layer((din, dout), xs[s.party], ws[s.party], bs[s.party], s,
                                                 slice_size=slice_size), sessions)
    net.close()
    assert reconstruct(out).tolist() == expect.tolist()
    assert check_mac_consistency(out, alpha)


def test_layer_with_public_weights_needs_no_triples(two_party_sessions, alpha):
    rng = np.random.default_rng(2)
    din, dout = 6, 4
    x = ff.random_batch(rng, din)
    w = ff.random_batch(rng, din * dout)
    b = ff.random_batch(rng, dout)
    xs = share_batch(x, 2, alpha, rng)
    out = [run_linear_layer((din, dout), xs[s.party], w, b, s) for s in two_party_sessions]
    expect = ff.batch_add(ff.matvec_mod(w.reshape(dout, din), x), b)
    assert reconstruct(out).tolist() == expect.tolist()
    assert check_mac_consistency(out, alpha)
    assert two_party_sessions[0].counters.total_sent() == 0


def test_public_layer_is_cleartext(two_party_sessions):
    out = run_linear_layer((2, 2), ff.as_batch([1, 2]), ff.as_batch([1, 0, 0, 1]), ff.as_batch([5, 5]),
                           two_party_sessions[0])
    assert out.tolist() == [6, 7]


def test_tile_rejects_wrong_triple_shape(two_party_sessions, alpha):
    stores, _ = fake_dealer(2, TripleDemand(matrix={(3, 4): 1}), seed=1)
    rng = np.random.default_rng(0)
    x = share_batch(ff.random_batch(rng, 4), 2, alpha, rng)[0]
    w = share_batch(ff.random_batch(rng, 8), 2, alpha, rng)[0]
    with pytest.raises(errors.TripleShapeMismatch):
        run_tile((0, 2), x, w, ff.as_batch([0, 0]), stores[0].matrix[(3, 4)][0], two_party_sessions[0], 1)
