"""Fake preprocessing: an insecure dealer that knows α and every triple

Only for benchmarks and tests of the online phase. Run as a script it prints
a warning banner before writing anything.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional, Tuple

import numpy as np

import field as ff
from config import INPUT_OWNER, LOG_LEVEL, SLICE_SIZE
from graph_builder import CircuitGraph, TripleDemand, count_triple_demand, load_circuit
from spdz import MatrixTriple, ShareBatch, TripleStore, save_store, share_batch

logger = logging.getLogger(__name__)

BANNER = (
    "*" * 72 + "\n"
    "* INSECURE FAKE DEALER: it knows the MAC key and every secret it deals. *\n"
    "* Use the generated stores for testing and benchmarking only.          *\n"
    + "*" * 72
)


# ===== DEALING =====

def _split_key(alpha: int, n: int, rng: np.random.Generator) -> List[int]:
    shares = [ff.random_element(rng) for _ in range(n - 1)]
    return shares + [ff.sub(alpha, sum(shares) % ff.P)]


def fake_dealer(n: int, demand: TripleDemand, seed: int = 0, owner: int = INPUT_OWNER,
                alpha: Optional[int] = None) -> Tuple[List[TripleStore], int]:
    """One TripleStore per party covering demand; returns the stores and α"""
    if n < 2:
        raise ValueError("at least two parties are needed")
    if not 0 <= owner < n:
        raise ValueError(f"input owner {owner} outside 0..{n - 1}")
    rng = np.random.default_rng(seed)
    alpha = ff.random_element(rng) if alpha is None else ff.reduce(alpha)
    key_shares = _split_key(alpha, n, rng)
    stores = [TripleStore(party=i, n=n, alpha_share=key_shares[i]) for i in range(n)]

    a = ff.random_batch(rng, demand.scalar)
    b = ff.random_batch(rng, demand.scalar)
    c = ff.batch_mul(a, b)
    for name, clear in (("scalar_a", a), ("scalar_b", b), ("scalar_c", c)):
        for store, sb in zip(stores, share_batch(clear, n, alpha, rng)):
            setattr(store, name, sb)

    for (rows, cols), count in sorted(demand.matrix.items()):
        for store in stores:
            store.matrix[(rows, cols)] = []
        for _ in range(count):
            ma = ff.random_batch(rng, rows * cols)
            mb = ff.random_batch(rng, cols)
            mc = ff.matvec_mod(ma.reshape(rows, cols), mb)
            parts = [share_batch(x, n, alpha, rng) for x in (ma, mb, mc)]
            for i, store in enumerate(stores):
                store.matrix[(rows, cols)].append(MatrixTriple(rows, cols, parts[0][i], parts[1][i], parts[2][i]))

    masks = ff.random_batch(rng, demand.masks)
    for store, sb in zip(stores, share_batch(masks, n, alpha, rng)):
        store.masks = sb
    stores[owner].clear_masks = masks

    logger.info("dealt %d scalar triple(s), %d matrix triple(s) and %d mask(s) to %d parties",
                demand.scalar, demand.tiles, demand.masks, n)
    return stores, alpha


def store_path(out_dir: str, party: int) -> str:
    return os.path.join(out_dir, f"party{party}.triples")


def write_stores(stores: List[TripleStore], out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for store in stores:
        path = store_path(out_dir, store.party)
        save_store(store, path)
        paths.append(path)
    return paths


def padded(demand: TripleDemand, spare: int) -> TripleDemand:
    """demand plus spare extra scalar triples and masks"""
    return TripleDemand(scalar=demand.scalar + spare, matrix=dict(demand.matrix), masks=demand.masks + spare)


def deal_for_circuit(graph: CircuitGraph, n: int, out_dir: str, slice_size: int = SLICE_SIZE, loop_trips: int = 1,
                     spare: int = 0, seed: int = 0, owner: int = INPUT_OWNER) -> List[str]:
    """Deal and write stores covering the circuit's demand; returns the store paths"""
    demand = padded(count_triple_demand(graph, loop_trips, slice_size), spare)
    stores, _ = fake_dealer(n, demand, seed, owner)
    return write_stores(stores, out_dir)


# ===== SCRIPT =====

def main(argv=None):
    """Deal stores for a compiled circuit"""
    parser = argparse.ArgumentParser(description="Fake dealer for the SPDZ online phase (insecure)")
    parser.add_argument("circuit", help="Compiled circuit file")
    parser.add_argument("--parties", type=int, default=2, help="Number of parties")
    parser.add_argument("--slice", type=int, default=SLICE_SIZE, help="Weights per linear-layer tile")
    parser.add_argument("--seed", type=int, default=0, help="Dealer seed")
    parser.add_argument("--loop-trips", type=int, default=1, help="Iterations to provision per loop")
    parser.add_argument("--spare", type=int, default=0, help="Extra scalar triples and masks")
    parser.add_argument("--owner", type=int, default=INPUT_OWNER, help="Party that owns the private inputs")
    parser.add_argument("--out-dir", default=".", help="Directory for partyN.triples files")
    args = parser.parse_args(argv)

    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    print(BANNER, file=sys.stderr)
    graph = load_circuit(args.circuit)
    for path in deal_for_circuit(graph, args.parties, args.out_dir, args.slice, args.loop_trips, args.spare,
                                 args.seed, args.owner):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
