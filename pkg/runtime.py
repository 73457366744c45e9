"""Worker pool that runs one party's share of a circuit

Workers pull continuations of finished openings first and new ready nodes
second. Communication never blocks a worker: a multiplication posts its
opening and returns, and the combine step comes back through the continuation
queue once every peer's shares arrived.

Triples are reserved at block entry in chain order, so every party assigns the
same triples and batch ids to the same logical operation.
"""
import hashlib
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import errors
import field as ff
from backend import BackendRegistry, KernelOp, KernelRequest, default_registry
from config import INPUT_OWNER, IO_TIMEOUT, MAC_CHECK_THRESHOLD, SLICE_SIZE
from graph_builder import CircuitGraph, Node, NodeKind
from linear_layer import plan_tiles, start_linear_layer
from network import FaultPlan, PartyConfig, PartySession, SimulatedNetwork, connect_mesh
from oracle import compare, load_slice
from preprocessing_io import InputBundle, share_inputs
from scheduler import ReadyNode, Scheduler, TraceRecorder
from spdz import (
    BeaverTriple, Opening, ShareBatch, TripleStore, add_public_const, beaver_begin, mac_check, public_sub,
    sub_public_const,
)

logger = logging.getLogger(__name__)

Value = Union[np.ndarray, ShareBatch]


@dataclass
class PartyResult:
    party: int
    outputs: List[int]
    consumed: Dict[str, int]
    traffic: Dict[str, Dict[int, int]]
    online_seconds: float
    mac_checks: int
    issued: int
    connections: int
    trace: Optional[TraceRecorder] = None

    @property
    def digest(self) -> str:
        return output_digest(self.outputs)


def output_digest(values: Sequence[int]) -> str:
    return hashlib.sha256(ff.as_batch(values).astype("<u4").tobytes()).hexdigest()


def _private(v) -> bool:
    return isinstance(v, ShareBatch)


@dataclass
class _Reservation:
    batch_ids: List[int]
    triples: object = None
    lanes: int = 0


# ===== PARTY RUNTIME =====

class PartyRuntime:
    def __init__(self, graph: CircuitGraph, session: PartySession, bindings: Dict[int, Value], workers: int = 1,
                 trace: Optional[TraceRecorder] = None, registry: Optional[BackendRegistry] = None,
                 slice_size: int = SLICE_SIZE, mac_threshold: int = MAC_CHECK_THRESHOLD,
                 rng: Optional[np.random.Generator] = None):
        self.graph = graph
        self.session = session
        self.workers = max(1, workers)
        self.trace = trace
        self.registry = registry or default_registry(slice_size)
        self.slice_size = slice_size
        self.mac_threshold = mac_threshold
        self.rng = rng
        self.scheduler = Scheduler(graph, bindings, on_enter_block=self._reserve, trace=trace)

        self._continuations: "queue.Queue[Callable[[], None]]" = queue.Queue()
        self._reserved: Dict[int, _Reservation] = {}
        self._unchecked: List[int] = []
        self._unchecked_lanes = 0
        self._checkpoints: "queue.Queue[Optional[Tuple[int, List[int]]]]" = queue.Queue()
        self._checkpoint_seq = 0
        self.mac_checks = 0
        self._failure: Optional[BaseException] = None
        self._fail_lock = threading.Lock()
        self._abort = threading.Event()
        self._stop = threading.Event()

    # --- reservations ---

    def _reserve(self, label: int, visit: int):
        """Claim triples and batch ids for every communicating node of the block, in chain order"""
        g = self.graph
        store = self.session.store
        for nid in g.chains.get(label, ()):
            node = g.nodes[nid]
            ops = [g.nodes[o] for o in node.operands]
            res = None
            if node.kind in (NodeKind.MULTIPLIER, NodeKind.MULT_BATCH) and all(o.private for o in ops):
                res = _Reservation(self.session.next_batch_ids(1), store.take_scalar(node.lanes), 2 * node.lanes)
            elif node.kind == NodeKind.REDUCE_MUL and node.private:
                lanes = ops[0].lanes
                rounds, width = 0, lanes
                while width > 1:
                    width = width - width // 2
                    rounds += 1
                res = _Reservation(self.session.next_batch_ids(rounds),
                                   store.take_scalar(lanes - 1) if lanes > 1 else None, 2 * (lanes - 1))
            elif node.kind == NodeKind.LINEAR_LAYER and ops[0].private and ops[1].private:
                din, dout = node.dims
                tiles = plan_tiles(din, dout, self.slice_size).tiles
                res = _Reservation(self.session.next_batch_ids(len(tiles)),
                                   [store.take_matrix(rows, din) for _, rows in tiles],
                                   sum(rows * din + din for _, rows in tiles))
            elif node.kind == NodeKind.ROOT and node.private:
                res = _Reservation(self.session.next_batch_ids(1), None, node.lanes)
            if res is None:
                continue
            self._reserved[nid] = res
            self._unchecked.extend(res.batch_ids)
            self._unchecked_lanes += res.lanes
        if self._unchecked_lanes >= self.mac_threshold:
            self._checkpoint_seq += 1
            self._checkpoints.put((self._checkpoint_seq, self._unchecked))
            logger.debug("party %d: checkpoint %d covers %d opening(s)", self.session.party, self._checkpoint_seq,
                         len(self._unchecked))
            self._unchecked, self._unchecked_lanes = [], 0

    # --- failure handling ---

    def fail(self, exc: BaseException):
        with self._fail_lock:
            if self._failure is not None:
                return
            self._failure = exc
        self._abort.set()
        self._stop.set()
        if isinstance(exc, Exception):
            self.session.mailbox.fail(exc)
        self._checkpoints.put(None)

    def _guard(self, fn: Callable[[], None]) -> Callable[[], None]:
        def run():
            if self._abort.is_set():
                return
            try:
                fn()
            except BaseException as e:
                self.fail(e)
        return run

    def _submit(self, fn: Callable[[], None]):
        self._continuations.put(self._guard(fn))

    # --- node evaluation ---

    def _evaluate(self, ready: ReadyNode):
        node = self.graph.nodes[ready.id]
        args = [self._embed(op, v) for op, v in zip(node.operands, self.scheduler.operand_values(node))]
        k = node.kind
        party, alpha = self.session.party, self.session.alpha_share

        if k in (NodeKind.ADDER, NodeKind.ADD_BATCH):
            a, b = args
            if _private(a) and _private(b):
                out = self.registry.execute(KernelRequest(KernelOp.ADD, [a, b], a.count))
            elif _private(a) or _private(b):
                s, p = (a, b) if _private(a) else (b, a)
                out = self.registry.execute(KernelRequest(KernelOp.ADD_PUBLIC, [s, p], s.count, party, alpha))
            else:
                out = ff.batch_add(a, b)
        elif k in (NodeKind.SUBTRACT, NodeKind.SUB_BATCH):
            a, b = args
            if _private(a) and _private(b):
                out = self.registry.execute(KernelRequest(KernelOp.SUB, [a, b], a.count))
            elif _private(a):
                out = sub_public_const(a, b, party, alpha)
            elif _private(b):
                out = public_sub(a, b, party, alpha)
            else:
                out = ff.batch_sub(a, b)
        elif k in (NodeKind.MULTIPLIER, NodeKind.MULT_BATCH):
            a, b = args
            if _private(a) and _private(b):
                self._begin_multiply(node, a, b)
                return
            if _private(a) or _private(b):
                s, p = (a, b) if _private(a) else (b, a)
                out = self.registry.execute(KernelRequest(KernelOp.MUL_PUBLIC, [s, p], s.count))
            else:
                out = ff.batch_mul(a, b)
        elif k == NodeKind.REDUCE_ADD:
            (a,) = args
            if _private(a):
                out = self.registry.execute(KernelRequest(KernelOp.REDUCE_ADD, [a], a.count))
            else:
                out = ff.as_batch([ff.batch_sum(a)])
        elif k == NodeKind.REDUCE_MUL:
            (a,) = args
            if _private(a):
                self._reduce_mul(node, a)
                return
            out = ff.as_batch([ff.batch_product(a)])
        elif k == NodeKind.LOAD:
            base, start = args[0], args[1]
            if _private(start):
                raise errors.SecretIndexUnsupported(f"load %{node.name} uses a private index")
            if _private(base):
                offset = ff.to_signed(int(start[0]))
                if offset < 0 or offset + node.lanes > base.count:
                    raise errors.LoadOutOfBounds(
                        f"load %{node.name}: elements [{offset}, {offset + node.lanes}) of a {base.count}-element input")
                out = base[offset:offset + node.lanes]
            else:
                out = load_slice(node, base, int(start[0]))
        elif k == NodeKind.COMPARE:
            a, b = args
            if _private(a) or _private(b):
                raise errors.SecretComparisonUnsupported(f"compare %{node.name} reads a private value")
            out = ff.as_batch([compare(node.predicate, int(a[0]), int(b[0]))])
        elif k == NodeKind.LINEAR_LAYER:
            self._linear_layer(node, args)
            return
        elif k == NodeKind.ROOT:
            (a,) = args
            if _private(a):
                self._open_root(node, a)
                return
            out = np.asarray(a)
        else:
            raise errors.UnloweredInstruction(f"{node.label()} cannot be executed")
        self.scheduler.mark_complete(node.id, out)

    def _embed(self, op: int, value: Value) -> Value:
        """A public value flowing into a private slot (a phi seeded by a constant) becomes a share"""
        if _private(value) or not self.graph.nodes[op].private:
            return value
        value = np.asarray(value, dtype=ff.DTYPE)
        return add_public_const(ShareBatch.zeros(value.shape[0]), value, self.session.party, self.session.alpha_share)

    def _beaver(self, triple: BeaverTriple, d: np.ndarray, e: np.ndarray, party: int, alpha_share: int) -> ShareBatch:
        return self.registry.execute(KernelRequest(KernelOp.BEAVER, [], d.shape[0], party, alpha_share, triple=triple,
                                                   opened=(d, e)))

    def _begin_multiply(self, node: Node, x: ShareBatch, y: ShareBatch):
        res = self._reserved[node.id]
        pending = beaver_begin(x, y, res.triples, self.session, res.batch_ids[0], combine=self._beaver)
        pending.when_ready(lambda pm: self._submit(lambda: self.scheduler.mark_complete(node.id, pm.finish())))

    def _reduce_mul(self, node: Node, values: ShareBatch):
        """Pairwise product tree; one opening per round"""
        res = self._reserved[node.id]
        state = {"cur": values, "round": 0, "offset": 0}

        def step():
            cur = state["cur"]
            if cur.count <= 1:
                self.scheduler.mark_complete(node.id, cur)
                return
            half = cur.count // 2
            offset = state["offset"]
            triple = res.triples[offset:offset + half]
            rest = cur[2 * half:]
            pending = beaver_begin(cur[:half], cur[half:2 * half], triple, self.session,
                                   res.batch_ids[state["round"]], combine=self._beaver)
            state["offset"] += half
            state["round"] += 1

            def advance(pm):
                state["cur"] = ShareBatch.concat([pm.finish(), rest]) if rest.count else pm.finish()
                step()

            pending.when_ready(lambda pm: self._submit(lambda: advance(pm)))

        step()

    def _linear_layer(self, node: Node, args: List[Value]):
        res = self._reserved.get(node.id)
        fut = start_linear_layer(node.dims, args[0], args[1], args[2], self.session,
                                 triples=res.triples if res else None, batch_ids=res.batch_ids if res else None,
                                 submit=self._submit, registry=self.registry, slice_size=self.slice_size)

        def done(f):
            exc = f.exception()
            if exc is not None:
                self.fail(exc)
            else:
                self._submit(lambda: self.scheduler.mark_complete(node.id, f.result()))

        fut.add_done_callback(done)

    def _open_root(self, node: Node, value: ShareBatch):
        opening = Opening(self.session, value, self._reserved[node.id].batch_ids[0])
        opening.when_ready(lambda op: self._submit(lambda: self.scheduler.mark_complete(node.id, op.result())))

    # --- threads ---

    def _worker(self):
        sched = self.scheduler
        while not self._stop.is_set():
            try:
                self._continuations.get_nowait()()
                sched.last_progress = time.monotonic()
                continue
            except queue.Empty:
                pass
            try:
                ready = sched.next_ready_node()
                if ready is None:
                    if sched.drained():
                        self._stop.set()
                        return
                    if sched.is_stalled() and self._continuations.empty():
                        raise errors.SchedulerStalled(
                            f"party {self.session.party}: no node is ready and none is in flight")
                    if time.monotonic() - sched.last_progress > self.session.io_timeout:
                        raise errors.PeerTimeout(
                            f"party {self.session.party}: no progress for {self.session.io_timeout:.1f} s")
                    try:
                        self._continuations.get(timeout=0.005)()
                    except queue.Empty:
                        pass
                    continue
                self._evaluate(ready)
            except BaseException as e:
                self.fail(e)
                return

    def _checker(self):
        while True:
            item = self._checkpoints.get()
            if item is None or self._abort.is_set():
                return
            seq, ids = item
            try:
                opened, macs = self._collect(ids)
                mac_check(self.session, opened, macs, seq, self.rng)
                self.mac_checks += 1
            except BaseException as e:
                self.fail(e)
                return

    def _collect(self, ids: List[int]):
        while True:
            if self._abort.is_set():
                raise self._failure or errors.PeerTimeout("run aborted")
            try:
                return self.session.open_log.collect(ids, timeout=0.05)
            except errors.PeerTimeout:
                continue

    def run(self) -> List[int]:
        checker = threading.Thread(target=self._checker, name=f"mac-check-{self.session.party}", daemon=True)
        checker.start()
        try:
            self.scheduler.start()
        except BaseException as e:
            self.fail(e)
        threads = [threading.Thread(target=self._worker, name=f"worker-{self.session.party}-{i}", daemon=True)
                   for i in range(self.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self._failure is None:
            self._checkpoints.put(None)
        checker.join()
        if self._failure is not None:
            raise self._failure

        # every opening has been recorded once the scheduler drains
        self._checkpoint_seq += 1
        opened, macs = self.session.open_log.collect(self._unchecked, timeout=self.session.io_timeout)
        mac_check(self.session, opened, macs, self._checkpoint_seq, self.rng)
        self.mac_checks += 1
        return [int(v) for v in np.asarray(self.scheduler.root_value)]


def run_party(graph: CircuitGraph, session: PartySession, bindings: Dict[int, Value], workers: int = 1,
              trace: Optional[TraceRecorder] = None, registry: Optional[BackendRegistry] = None,
              slice_size: int = SLICE_SIZE, mac_threshold: int = MAC_CHECK_THRESHOLD,
              rng: Optional[np.random.Generator] = None) -> PartyResult:
    """Evaluate the circuit for one party and open its output"""
    started = time.perf_counter()
    rt = PartyRuntime(graph, session, bindings, workers, trace, registry, slice_size, mac_threshold, rng)
    outputs = rt.run()
    elapsed = time.perf_counter() - started
    logger.info("party %d finished: %d node(s) issued, %d MAC check(s), %.3f s", session.party,
                rt.scheduler.issued, rt.mac_checks, elapsed)
    return PartyResult(
        party=session.party, outputs=outputs,
        consumed=session.store.consumed() if session.store else {"scalar": 0, "tiles": 0, "masks": 0},
        traffic=session.counters.snapshot(), online_seconds=elapsed, mac_checks=rt.mac_checks,
        issued=rt.scheduler.issued, connections=session.connection_count, trace=trace)


# ===== LOCAL MULTI-PARTY RUNS =====

def _free_ports(count: int) -> List[int]:
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def run_local(graph: CircuitGraph, stores: List[TripleStore], inputs: Optional[InputBundle], workers: int = 1,
              transport: str = "sim", fault_plan: Optional[FaultPlan] = None, trace: bool = False,
              slice_size: int = SLICE_SIZE, io_timeout: float = IO_TIMEOUT, owner: int = INPUT_OWNER,
              mac_threshold: int = MAC_CHECK_THRESHOLD) -> List[PartyResult]:
    """All parties in one process, one thread each; the first failure is raised"""
    n = len(stores)
    if transport not in ("sim", "socket"):
        raise ValueError(f"unknown transport '{transport}'")
    network = SimulatedNetwork(n, fault_plan) if transport == "sim" else None
    sessions: List[Optional[PartySession]] = [None] * n
    if network is not None:
        sessions = network.sessions([s.alpha_share for s in stores], stores, io_timeout)
    endpoints = {i: ("127.0.0.1", p) for i, p in enumerate(_free_ports(n))} if network is None else {}

    results: List[Optional[PartyResult]] = [None] * n
    failures: List[BaseException] = []
    lock = threading.Lock()

    def abort_others(me: int, exc: BaseException):
        for j, s in enumerate(sessions):
            if j != me and s is not None:
                s.mailbox.fail(errors.PeerTimeout(f"party {me} aborted: {exc}"))

    def party(i: int):
        try:
            if network is None:
                config = PartyConfig(i, n, endpoints, io_timeout=io_timeout)
                sessions[i] = connect_mesh(config, stores[i].alpha_share, stores[i])
            session = sessions[i]
            started = time.perf_counter()
            bindings = share_inputs(graph, session, inputs if i == owner else None, owner)
            result = run_party(graph, session, bindings, workers, TraceRecorder() if trace else None,
                               slice_size=slice_size, mac_threshold=mac_threshold)
            result.online_seconds = time.perf_counter() - started
            results[i] = result
        except BaseException as e:
            with lock:
                failures.append(e)
            abort_others(i, e)

    threads = [threading.Thread(target=party, args=(i,), name=f"party-{i}", daemon=True) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s in sessions:
        if s is not None:
            s.close()
    if network is not None:
        network.close()
    if failures:
        raise failures[0]
    return results
