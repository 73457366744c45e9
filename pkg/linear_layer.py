"""y = W·x + b over shares, tiled by contiguous row blocks of W

Each tile consumes one matrix triple shaped (rows, DIN) and opens D = W_tile - A
together with E = x - B in a single frame. Tiles are independent, so they are
posted at once and finished in whatever order their openings complete.
"""
import logging
import threading
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

import errors
import field as ff
from backend import KernelOp, KernelRequest, default_registry
from config import SLICE_SIZE
from network import PartySession
from spdz import MatrixTriple, Opening, ShareBatch, add_local, add_public_const, sub_local

logger = logging.getLogger(__name__)

Operand = Union[np.ndarray, ShareBatch]


@dataclass
class TilePlan:
    din: int
    dout: int
    slice_size: int
    tiles: List[Tuple[int, int]]

    @property
    def rows_per_tile(self) -> int:
        return self.tiles[0][1] if self.tiles else 0


@dataclass
class TileResult:
    row_start: int
    row_count: int
    shares: ShareBatch


def plan_tiles(din: int, dout: int, slice_size: int = SLICE_SIZE) -> TilePlan:
    """Row blocks of at most slice_size weights each; the last block may be short"""
    if din < 1 or dout < 1:
        raise ValueError(f"layer dimensions must be positive, got {din}x{dout}")
    if slice_size < din:
        raise errors.SliceTooSmall(f"slice size {slice_size} cannot hold one row of {din} weights")
    rows = max(1, slice_size // din)
    tiles = [(start, min(rows, dout - start)) for start in range(0, dout, rows)]
    return TilePlan(din=din, dout=dout, slice_size=slice_size, tiles=tiles)


def _add_bias(z: ShareBatch, bias: Operand, party: int, alpha_share: int) -> ShareBatch:
    if isinstance(bias, ShareBatch):
        return add_local(z, bias)
    return add_public_const(z, bias, party, alpha_share)


# ===== ONE TILE =====

class PendingTile:
    """A tile whose D and E are being opened"""

    def __init__(self, index: int, row_start: int, rows: int, din: int, triple: MatrixTriple, opening: Opening):
        self.index = index
        self.row_start = row_start
        self.rows = rows
        self.din = din
        self.triple = triple
        self.opening = opening

    def finish(self, bias: Operand, registry=None, timeout: Optional[float] = None) -> TileResult:
        registry = registry or default_registry()
        session = self.opening.session
        opened = self.opening.result(timeout)
        rows, din = self.rows, self.din
        d = opened[:rows * din].reshape(rows, din)
        e = opened[rows * din:]
        t = self.triple
        z = add_local(t.c, registry.execute(KernelRequest(KernelOp.MATVEC_PUBLIC_LEFT, [d, t.b], rows,
                                                          dims=(rows, din))))
        z = add_local(z, registry.execute(KernelRequest(KernelOp.MATVEC_SHARED_LEFT, [t.a, e], rows,
                                                        dims=(rows, din))))
        z = add_public_const(z, ff.matvec_mod(d, e), session.party, session.alpha_share)
        z = _add_bias(z, bias, session.party, session.alpha_share)
        return TileResult(self.row_start, rows, z)

    def when_ready(self, fn: Callable[["PendingTile"], None]):
        self.opening.when_ready(lambda _: fn(self))


def begin_tile(index: int, tile: Tuple[int, int], x: ShareBatch, w_tile: ShareBatch, triple: MatrixTriple,
               session: PartySession, batch_id: int) -> PendingTile:
    row_start, rows = tile
    din = x.count
    if triple.shape != (rows, din):
        raise errors.TripleShapeMismatch(f"tile {index} is {rows}x{din}, triple is {triple.rows}x{triple.cols}")
    triple.claim()
    masked = ShareBatch.concat([sub_local(w_tile, triple.a), sub_local(x, triple.b)])
    return PendingTile(index, row_start, rows, din, triple, Opening(session, masked, batch_id))


def run_tile(tile: Tuple[int, int], x: ShareBatch, w_tile: ShareBatch, bias: Operand, triple: MatrixTriple,
             session: PartySession, batch_id: int, registry=None, index: int = 0) -> TileResult:
    """Blocking form of one tile: open D and E, then combine locally"""
    return begin_tile(index, tile, x, w_tile, triple, session, batch_id).finish(bias, registry)


# ===== WHOLE LAYER =====

def _local_layer(din: int, dout: int, x: Operand, w: Operand, b: Operand, session: PartySession,
                 registry) -> Operand:
    """Layers where at most one of x and W is private need no triples"""
    party, alpha = session.party, session.alpha_share
    if not isinstance(x, ShareBatch) and not isinstance(w, ShareBatch):
        y = ff.matvec_mod(np.asarray(w[:din * dout]).reshape(dout, din), x[:din])
        if isinstance(b, ShareBatch):
            return add_public_const(b[:dout], y, party, alpha)
        return ff.batch_add(y, b[:dout])
    if isinstance(x, ShareBatch):
        matrix = np.asarray(w[:din * dout]).reshape(dout, din)
        y = registry.execute(KernelRequest(KernelOp.MATVEC_PUBLIC_LEFT, [matrix, x[:din]], dout, dims=(dout, din)))
    else:
        y = registry.execute(KernelRequest(KernelOp.MATVEC_SHARED_LEFT, [w[:din * dout], x[:din]], dout,
                                           dims=(dout, din)))
    return _add_bias(y, b[:dout], party, alpha)


class LinearLayerRun:
    """Posts every tile, finishes them as openings complete and assembles rows in order"""

    def __init__(self, plan: TilePlan, x: ShareBatch, w: ShareBatch, b: Operand, session: PartySession,
                 triples: List[MatrixTriple], batch_ids: Sequence[int], submit=None, registry=None,
                 completion_order: Optional[Sequence[int]] = None):
        if len(triples) != len(plan.tiles):
            raise errors.TripleExhausted(f"{len(plan.tiles)} tile(s) but {len(triples)} matrix triple(s)")
        self.plan = plan
        self.x, self.w, self.b = x, w, b
        self.session = session
        self.triples = triples
        self.batch_ids = list(batch_ids)
        self.submit = submit or (lambda fn: fn())
        self.registry = registry or default_registry()
        self.completion_order = list(completion_order) if completion_order is not None else None
        self.future: Future = Future()
        self.finished_order: List[int] = []
        self._results: List[Optional[TileResult]] = [None] * len(plan.tiles)
        self._left = len(plan.tiles)
        self._lock = threading.Lock()

    def _bias(self, start: int, rows: int) -> Operand:
        return self.b[start:start + rows]

    def start(self) -> Future:
        din = self.plan.din
        x = self.x[:din]
        pending = []
        for i, tile in enumerate(self.plan.tiles):
            start, rows = tile
            w_tile = self.w[start * din:(start + rows) * din]
            pending.append(begin_tile(i, tile, x, w_tile, self.triples[i], self.session, self.batch_ids[i]))
        logger.debug("linear layer %dx%d: %d tile(s) posted", self.plan.din, self.plan.dout, len(pending))

        if self.completion_order is not None:
            order = self.completion_order
            if sorted(order) != list(range(len(pending))):
                raise ValueError(f"completion order {order} is not a permutation of the tiles")
            arrived = [0]
            lock = threading.Lock()

            def one_arrived(_):
                with lock:
                    arrived[0] += 1
                    last = arrived[0] == len(pending)
                if last:
                    self.submit(lambda: [self._finish(pending[i]) for i in order])

            for p in pending:
                p.when_ready(one_arrived)
        else:
            for p in pending:
                p.when_ready(lambda tile: self.submit(lambda: self._finish(tile)))
        return self.future

    def _finish(self, tile: PendingTile):
        if self.future.done():
            return
        try:
            result = tile.finish(self._bias(tile.row_start, tile.rows), self.registry)
        except Exception as e:
            self._fail(e)
            return
        with self._lock:
            self._results[tile.index] = result
            self.finished_order.append(tile.index)
            self._left -= 1
            last = self._left == 0
        if last:
            out = ShareBatch.zeros(self.plan.dout)
            for r in self._results:
                out.planes[:, r.row_start:r.row_start + r.row_count] = r.shares.planes
            if not self.future.done():
                self.future.set_result(out)

    def _fail(self, exc: Exception):
        with self._lock:
            if self.future.done():
                return
            self.future.set_exception(exc)


def start_linear_layer(dims: Tuple[int, int], x: Operand, w: Operand, b: Operand, session: PartySession,
                       triples: Optional[List[MatrixTriple]] = None, batch_ids: Optional[Sequence[int]] = None,
                       submit=None, registry=None, completion_order: Optional[Sequence[int]] = None,
                       slice_size: int = SLICE_SIZE) -> Future:
    """Future of the layer output; private x and W go through tiled matrix triples"""
    din, dout = dims
    registry = registry or default_registry(slice_size)
    if not (isinstance(x, ShareBatch) and isinstance(w, ShareBatch)):
        fut: Future = Future()
        fut.set_result(_local_layer(din, dout, x, w, b, session, registry))
        return fut
    plan = plan_tiles(din, dout, slice_size)
    if triples is None:
        triples = [session.store.take_matrix(rows, din) for _, rows in plan.tiles]
    if batch_ids is None:
        batch_ids = session.next_batch_ids(len(plan.tiles))
    run = LinearLayerRun(plan, x, w, b[:dout], session, triples, batch_ids, submit=submit, registry=registry,
                         completion_order=completion_order)
    return run.start()


def run_linear_layer(dims: Tuple[int, int], x: Operand, w: Operand, b: Operand, session: PartySession,
                     triples: Optional[List[MatrixTriple]] = None, batch_ids: Optional[Sequence[int]] = None,
                     registry=None, completion_order: Optional[Sequence[int]] = None,
                     slice_size: int = SLICE_SIZE, timeout: Optional[float] = None) -> Operand:
    """Blocking evaluation of one layer"""
    fut = start_linear_layer(dims, x, w, b, session, triples, batch_ids, registry=registry,
                             completion_order=completion_order, slice_size=slice_size)
    try:
        return fut.result(timeout if timeout is not None else session.io_timeout)
    except FutureTimeout:
        raise errors.PeerTimeout(f"party {session.party}: linear layer openings did not complete")
