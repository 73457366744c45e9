import numpy as np
import pytest

import errors
import field as ff
from dealer import fake_dealer
from graph_builder import TripleDemand
from network import FaultPlan, MsgType, SimulatedNetwork
from spdz import (
    ShareBatch, add_local, add_public_const, beaver_multiply_batch, check_mac_consistency, load_store, mac_check,
    mul_public_const, open_shares, public_sub, reconstruct, save_store, share_batch, share_value, sub_public_const,
)
from tests.helpers import run_parties, run_parties_collect


def test_shares_reconstruct_and_authenticate(rng, alpha):
    values = ff.random_batch(rng, 50)
    shares = share_batch(values, 3, alpha, rng)
    assert reconstruct(shares).tolist() == values.tolist()
    assert check_mac_consistency(shares, alpha)


def test_scalar_share(rng, alpha):
    shares = share_value(42, 2, alpha, rng)
    assert reconstruct(shares) == 42
    assert check_mac_consistency(shares, alpha)


def test_public_constant_rule(rng, alpha):
    key = [alpha - 11, 11]
    shares = share_batch(ff.as_batch([10, 20]), 2, alpha, rng)
    plus = [add_public_const(s, 5, i, key[i]) for i, s in enumerate(shares)]
    minus = [sub_public_const(s, 5, i, key[i]) for i, s in enumerate(shares)]
    flipped = [public_sub(100, s, i, key[i]) for i, s in enumerate(shares)]
    assert reconstruct(plus).tolist() == [15, 25]
    assert reconstruct(minus).tolist() == [5, 15]
    assert reconstruct(flipped).tolist() == [90, 80]
    for batch in (plus, minus, flipped):
        assert check_mac_consistency(batch, alpha)


def test_local_linear_ops_keep_macs(rng, alpha):
    a = share_batch(ff.as_batch([3, 4]), 2, alpha, rng)
    b = share_batch(ff.as_batch([5, 6]), 2, alpha, rng)
    summed = [add_local(x, y) for x, y in zip(a, b)]
    scaled = [mul_public_const(x, 7) for x in a]
    assert reconstruct(summed).tolist() == [8, 10]
    assert reconstruct(scaled).tolist() == [21, 28]
    assert check_mac_consistency(summed, alpha) and check_mac_consistency(scaled, alpha)


def _party_material(n, scalar, seed=3):
    stores, alpha = fake_dealer(n, TripleDemand(scalar=scalar), seed)
    net = SimulatedNetwork(n)
    return net, net.sessions([s.alpha_share for s in stores], stores), alpha


@pytest.mark.parametrize("n", [2, 3])
def test_beaver_multiplication_and_mac_check(n):
    rng = np.random.default_rng(5)
    net, sessions, alpha = _party_material(n, 8)
    x = ff.random_batch(rng, 8)
    y = ff.random_batch(rng, 8)
    xs = share_batch(x, n, alpha, rng)
    ys = share_batch(y, n, alpha, rng)

    def party(session):
        i = session.party
        z = beaver_multiply_batch(xs[i], ys[i], session.store.take_scalar(8), session, 11)
        opened = open_shares(session, z, 12)
        logged, macs = session.open_log.collect()
        mac_check(session, logged, macs, checkpoint=1)
        return opened

    results = run_parties(party, sessions)
    net.close()
    for r in results:
        assert r.tolist() == ff.batch_mul(x, y).tolist()


def test_tampered_share_fails_the_mac_check():
    rng = np.random.default_rng(9)
    net, sessions, alpha = _party_material(2, 0)
    shares = share_batch(ff.as_batch([1, 2, 3]), 2, alpha, rng)

    def party(session):
        mine = shares[session.party]
        if session.party == 1:
            planes = mine.planes.copy()
            planes[0, 1] = (int(planes[0, 1]) + 1) % ff.P
            mine = ShareBatch(planes)
        open_shares(session, mine, 7)
        logged, macs = session.open_log.collect()
        return mac_check(session, logged, macs, checkpoint=1)

    outcomes = run_parties_collect(party, sessions)
    net.close()
    assert all(isinstance(o, errors.MacCheckFailed) for o in outcomes)


def test_empty_mac_check_sends_nothing(two_party_sessions):
    session = two_party_sessions[0]
    empty = np.zeros(0, dtype=ff.DTYPE)
    assert mac_check(session, empty, empty, checkpoint=1)
    assert session.counters.total_sent() == 0


def test_triple_store_accounting_and_exhaustion():
    stores, _ = fake_dealer(2, TripleDemand(scalar=5, matrix={(2, 3): 1}, masks=4), seed=1)
    store = stores[0]
    store.take_scalar(3)
    with pytest.raises(errors.TripleExhausted):
        store.take_scalar(3)
    store.take_matrix(2, 3)
    with pytest.raises(errors.TripleExhausted):
        store.take_matrix(2, 3)
    with pytest.raises(errors.TripleShapeMismatch):
        store.take_matrix(3, 3)
    store.take_masks(4)
    with pytest.raises(errors.MaskExhausted):
        store.take_masks(1)
    assert store.consumed() == {"scalar": 3, "tiles": 1, "masks": 4}


def test_triple_claims_are_single_use():
    stores, _ = fake_dealer(2, TripleDemand(scalar=2), seed=1)
    triple = stores[0].take_scalar(2)
    triple.claim()
    with pytest.raises(errors.MpcError):
        triple.claim()


def test_dealt_triples_are_correct():
    stores, alpha = fake_dealer(3, TripleDemand(scalar=6, matrix={(4, 5): 2}, masks=3), seed=7)
    a = reconstruct([s.scalar_a for s in stores])
    b = reconstruct([s.scalar_b for s in stores])
    c = reconstruct([s.scalar_c for s in stores])
    assert c.tolist() == ff.batch_mul(a, b).tolist()
    assert check_mac_consistency([s.scalar_c for s in stores], alpha)
    assert sum(s.alpha_share for s in stores) % ff.P == alpha
    for k in range(2):
        parts = [s.matrix[(4, 5)][k] for s in stores]
        ma = reconstruct([p.a for p in parts]).reshape(4, 5)
        mb = reconstruct([p.b for p in parts])
        mc = reconstruct([p.c for p in parts])
        assert mc.tolist() == ff.matvec_mod(ma, mb).tolist()
    masks = reconstruct([s.masks for s in stores])
    assert stores[0].clear_masks.tolist() == masks.tolist()
    assert stores[1].clear_masks is None


def test_store_file_round_trip(tmp_path):
    stores, _ = fake_dealer(2, TripleDemand(scalar=4, matrix={(2, 3): 2}, masks=5), seed=2)
    path = str(tmp_path / "party0.triples")
    save_store(stores[0], path)
    back = load_store(path)
    assert back.party == 0 and back.n == 2 and back.alpha_share == stores[0].alpha_share
    assert back.scalar_c.values.tolist() == stores[0].scalar_c.values.tolist()
    assert back.matrix[(2, 3)][1].c.macs.tolist() == stores[0].matrix[(2, 3)][1].c.macs.tolist()
    assert back.clear_masks.tolist() == stores[0].clear_masks.tolist()


def test_store_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.triples"
    path.write_bytes(b"MPCX" + bytes(40))
    with pytest.raises(errors.VersionMismatch):
        load_store(str(path))


CHI2_15DF_999 = 37.70


def _share_cells(x, rng, samples=100_000, n=3):
    """Joint 4x4 histogram of the first n-1 shares of a fixed value"""
    shares = share_batch(np.full(samples, x, dtype=ff.DTYPE), n, 12345, rng)
    side, p = np.uint64(4), np.uint64(ff.P)
    first = (shares[0].values * side // p).astype(np.int64)
    second = (shares[1].values * side // p).astype(np.int64)
    return np.bincount(first * 4 + second, minlength=16)


def test_partial_shares_do_not_depend_on_the_secret():
    rng = np.random.default_rng(31)
    zero, other = _share_cells(0, rng), _share_cells(ff.P - 1, rng)
    expected = zero.sum() / 16
    assert ((zero - expected) ** 2 / expected).sum() < CHI2_15DF_999
    assert ((zero - other) ** 2 / (zero + other)).sum() < CHI2_15DF_999


def _open_and_check(plan, values, alpha_seed):
    stores, alpha = fake_dealer(2, TripleDemand(), alpha_seed)
    net = SimulatedNetwork(2, plan)
    sessions = net.sessions([s.alpha_share for s in stores], stores, io_timeout=5.0)
    shares = share_batch(values, 2, alpha, np.random.default_rng(alpha_seed))

    def party(session):
        open_shares(session, shares[session.party], 1)
        logged, macs = session.open_log.collect()
        return mac_check(session, logged, macs, checkpoint=1)

    outcomes = run_parties_collect(party, sessions)
    net.close()
    return outcomes


def test_every_single_bit_flip_is_caught():
    rng = np.random.default_rng(41)
    for trial in range(100):
        values = ff.random_batch(rng, 6)
        plan = FaultPlan().bit_flip(1, 0, MsgType.OPEN_SHARES, nth=0, lane=int(rng.integers(6)),
                                    bit=int(rng.integers(32)))
        outcomes = _open_and_check(plan, values, trial)
        assert any(isinstance(o, errors.MacCheckFailed) for o in outcomes), trial
        assert all(o is not True for o in outcomes), trial


def test_honest_openings_never_abort():
    rng = np.random.default_rng(43)
    for trial in range(100):
        assert _open_and_check(None, ff.random_batch(rng, 6), trial) == [True, True]
