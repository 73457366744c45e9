"""Dependency-counting scheduler over a CircuitGraph

A node is ready once every operand has completed and its block has been
entered. Ready nodes sit in two FIFO queues, heavy (communication-bound) and
light, and the heavy queue is always served first. Branch nodes travel through
the light queue and are resolved in place. A branch that closes or leaves a
loop iteration is held back until every node the iteration actually executed
has completed in the current epoch.
"""
import json
import logging
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Deque, Dict, List, Optional, Set

import numpy as np

import errors
import field as ff
from config import BRANCH_PARK_AFTER
from graph_builder import CircuitGraph, Node, NodeKind

logger = logging.getLogger(__name__)

FINISHED = -1

ISSUE = "issue"
COMPLETE = "complete"
BRANCH_TAKEN = "branch-taken"
BRANCH_STALLED = "branch-stalled"
BLOCK_ENTER = "block-enter"
EPOCH_ADVANCE = "epoch-advance"


# ===== TRACE =====

@dataclass
class TraceEvent:
    ts_ns: int
    worker: str
    event: str
    node: int
    epoch: int = 0
    target: Optional[int] = None


class TraceRecorder:
    """Thread-safe event sink; optionally mirrored to an NDJSON file"""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.events: List[TraceEvent] = []
        self._lock = threading.Lock()

    def record(self, event: str, node: int, epoch: int = 0, target: Optional[int] = None):
        ev = TraceEvent(time.perf_counter_ns(), threading.current_thread().name, event, node, epoch, target)
        with self._lock:
            self.events.append(ev)

    def of(self, event: str) -> List[TraceEvent]:
        return [e for e in self.events if e.event == event]

    def dump(self, path: Optional[str] = None):
        path = path or self.path
        if not path:
            return
        with open(path, "w", encoding="utf-8") as f:
            for ev in self.events:
                f.write(json.dumps(asdict(ev)) + "\n")

    @classmethod
    def load(cls, path: str) -> "TraceRecorder":
        rec = cls(path)
        with open(path, "r", encoding="utf-8") as f:
            rec.events = [TraceEvent(**json.loads(line)) for line in f if line.strip()]
        return rec


# ===== LOOP INPUTS =====

def classify_loop_inputs(graph: CircuitGraph) -> Dict[int, List[str]]:
    """Per loop-member node, 'iterative' or 'stable' for each operand

    An operand is iterative when its producer sits in a block of the consumer's
    innermost loop.
    """
    out: Dict[int, List[str]] = {}
    for node in graph.nodes.values():
        if node.block is None:
            continue
        header = graph.innermost_loop(node.block)
        if header is None:
            continue
        info = graph.loops[header]
        kinds = []
        for op in node.operands:
            producer = graph.nodes[op].block
            kinds.append("iterative" if producer is not None and producer in info else "stable")
        out[node.id] = kinds
    return out


# ===== SCHEDULER =====

@dataclass
class ReadyNode:
    id: int
    kind: NodeKind
    operands: List[int]
    visit: int


class Scheduler:
    """Readiness state of one run; every public method is a single critical section"""

    def __init__(self, graph: CircuitGraph, bindings: Dict[int, object],
                 on_enter_block: Optional[Callable[[int, int], None]] = None,
                 trace: Optional[TraceRecorder] = None, park_after: int = BRANCH_PARK_AFTER):
        self.graph = graph
        self.trace = trace
        self.on_enter_block = on_enter_block
        self.park_after = max(1, park_after)
        self._lock = threading.RLock()

        self._users = graph.users()
        self.values: Dict[int, object] = {}
        self.done: Set[int] = set()
        self.remaining: Dict[int, int] = {}
        self.base: Dict[int, int] = {}
        self.entered: Set[int] = set()
        self.pred_label: Dict[int, int] = {}
        self.heavy: Deque[int] = deque()
        self.light: Deque[int] = deque()
        self._queued: Set[int] = set()
        self.in_flight: Set[int] = set()
        self.parked: Set[int] = set()
        self._attempts: Dict[int, int] = {}
        self._deferred: Dict[int, List[int]] = {}
        self.epoch: Dict[int, int] = {h: 0 for h in graph.loops}
        self.last_done: Dict[int, Dict[int, int]] = {h: {} for h in graph.loops}
        self.taken_exit: Dict[int, int] = {}
        self.block_visit: Dict[int, int] = {}
        self.visit_seq = 0
        self.finished = False
        self.issued = 0
        self.last_progress = time.monotonic()

        self._members = {h: {n for lbl in info.members for n in graph.chains.get(lbl, ())}
                         for h, info in graph.loops.items()}

        for node in graph.nodes.values():
            if node.kind == NodeKind.CONST:
                self.values[node.id] = ff.as_batch(node.value)
                self.done.add(node.id)
            elif node.kind == NodeKind.INPUT:
                if node.id not in bindings:
                    raise errors.ShapeMismatch(f"no binding for input %{node.name}")
                self.values[node.id] = bindings[node.id]
                self.done.add(node.id)
        for node in graph.nodes.values():
            if node.id in self.done or node.kind == NodeKind.BLOCK_LABEL:
                continue
            self.base[node.id] = len(node.operands)
            self.remaining[node.id] = sum(1 for o in node.operands if o not in self.done)

    # --- small helpers ---

    def _record(self, event: str, node: int, epoch: int = 0, target: Optional[int] = None):
        if self.trace is not None:
            self.trace.record(event, node, epoch, target)

    def _current_epoch(self, block: Optional[int]) -> int:
        if block is None:
            return 0
        header = self.graph.innermost_loop(block)
        return max(self.epoch.get(header, 0), 0) if header is not None else 0

    def _enqueue(self, nid: int):
        if nid in self._queued or nid in self.in_flight or nid in self.done or nid in self.parked:
            return
        self._queued.add(nid)
        (self.heavy if self.graph.nodes[nid].is_heavy else self.light).append(nid)

    def value(self, nid: int):
        with self._lock:
            return self.values[nid]

    def operand_values(self, node: Node) -> List[object]:
        with self._lock:
            return [self.values[o] for o in node.operands]

    @property
    def root_value(self):
        return self.values.get(self.graph.root)

    # --- lifecycle ---

    def start(self):
        """Enter the entry block"""
        with self._lock:
            self.enter_block(self.graph.entry_label)

    def is_stalled(self) -> bool:
        """Nothing queued or in flight can make progress and the root is incomplete"""
        with self._lock:
            if self.finished and not self.in_flight:
                return False
            if self.in_flight or self.heavy:
                return False
            for nid in list(self.light) + list(self.parked):
                if self.graph.nodes[nid].kind != NodeKind.BRANCH:
                    return False
                if self._resolve(nid) is not None:
                    return False
            return not self.finished

    def drained(self) -> bool:
        with self._lock:
            return self.finished and not self.in_flight and not self.heavy and not self.light

    # --- issue loop ---

    def next_ready_node(self) -> Optional[ReadyNode]:
        """Heavy work first, then light; branches are taken in place"""
        with self._lock:
            failures = 0
            if self.parked and not self.in_flight:
                self._unpark()
            while True:
                if self.heavy:
                    return self._issue(self.heavy.popleft())
                if not self.light:
                    return None
                nid = self.light.popleft()
                self._queued.discard(nid)
                if self.graph.nodes[nid].kind != NodeKind.BRANCH:
                    return self._issue(nid)
                if self.try_branch_once(nid):
                    failures = 0
                    continue
                self._attempts[nid] = self._attempts.get(nid, 0) + 1
                if self._attempts[nid] >= self.park_after:
                    self.parked.add(nid)
                    self._record(BRANCH_STALLED, nid, self._current_epoch(self.graph.nodes[nid].block))
                else:
                    self._queued.add(nid)
                    self.light.append(nid)
                failures += 1
                if failures >= len(self.light):
                    return None

    def _issue(self, nid: int) -> ReadyNode:
        self._queued.discard(nid)
        self.in_flight.add(nid)
        self.issued += 1
        node = self.graph.nodes[nid]
        self._record(ISSUE, nid, self._current_epoch(node.block))
        return ReadyNode(nid, node.kind, list(node.operands), self.block_visit.get(node.block, 0))

    # --- branches and loop epochs ---

    def _resolve(self, bid: int) -> Optional[int]:
        """Destination of the branch if it may be taken now, else None"""
        node = self.graph.nodes[bid]
        if node.operands:
            cond = node.operands[0]
            if self.graph.nodes[cond].private:
                raise errors.SecretControlFlow(
                    f"branch in '{self.graph.label_name(node.block)}' depends on private %{self.graph.nodes[cond].name}")
            if cond not in self.done:
                return None
            value = self.values[cond]
            flag = int(np.asarray(value).reshape(-1)[0])
            taken = node.successors[0] if flag != 0 else node.successors[1]
        else:
            taken = node.successors[0]
        for header in self.graph.enclosing_loops(node.block):
            info = self.graph.loops[header]
            if taken == header or taken not in info:
                e = self.epoch.get(header, 0)
                if e >= 1 and not self.is_loop_epoch_complete(header, bid, e):
                    return None
        return taken

    def try_branch_once(self, bid: int) -> bool:
        with self._lock:
            taken = self._resolve(bid)
            if taken is None:
                return False
            node = self.graph.nodes[bid]
            block = node.block
            for header in self.graph.enclosing_loops(block):
                if taken not in self.graph.loops[header]:
                    self.epoch[header] = FINISHED
                    self.taken_exit[header] = taken
                    self._record(EPOCH_ADVANCE, header, FINISHED)
            self.done.add(bid)
            self._attempts.pop(bid, None)
            self._record(BRANCH_TAKEN, bid, self._current_epoch(block), taken)
            self.pred_label[taken] = block
            self.last_progress = time.monotonic()
            self.enter_block(taken)
            return True

    def is_loop_epoch_complete(self, header: int, branch: int, epoch: int) -> bool:
        """Walk the iteration's taken path from the header to the branch's block"""
        with self._lock:
            g = self.graph
            info = g.loops[header]
            target = g.nodes[branch].block
            stamps = self.last_done[header]
            stack = [header]
            seen: Set[int] = set()
            while stack:
                lbl = stack.pop()
                if lbl in seen or lbl not in info:
                    continue
                seen.add(lbl)
                if lbl != header and lbl in g.loops:
                    if target in g.loops[lbl]:
                        return True
                    if self.epoch.get(lbl, 0) != FINISHED or lbl not in self.taken_exit:
                        return False
                    stack.append(self.taken_exit[lbl])
                    continue
                for nid in g.chains.get(lbl, ()):
                    n = g.nodes[nid]
                    if n.kind == NodeKind.BRANCH:
                        continue
                    if nid not in self.done or stamps.get(nid, 0) < epoch:
                        return False
                if lbl == target:
                    return True
                term = g.terminator(lbl)
                if term is None or term.kind != NodeKind.BRANCH:
                    continue
                if term.operands:
                    cond = term.operands[0]
                    if cond not in self.done:
                        return False
                    flag = int(np.asarray(self.values[cond]).reshape(-1)[0])
                    stack.append(term.successors[0] if flag != 0 else term.successors[1])
                else:
                    stack.append(term.successors[0])
            return False

    # --- block entry ---

    def _rearm_loop(self, header: int) -> Dict[int, object]:
        """Undo one finished iteration of the loop; returns the captured phi values"""
        g = self.graph
        pred = self.pred_label.get(header)
        captured: Dict[int, object] = {}
        late: Dict[int, int] = {}
        for phi in g.phis(header):
            source = dict(phi.incoming).get(pred)
            if source is None:
                raise errors.UnknownPredecessor(
                    f"phi %{phi.name} has no value for predecessor "
                    f"{g.label_name(pred) if pred is not None else None}")
            if source in self.done:
                captured[phi.id] = self.values[source]
            else:
                late[phi.id] = source

        members = self._members[header]
        self.done -= members
        for nid in members:
            self.values.pop(nid, None)
            self.parked.discard(nid)
            self._attempts.pop(nid, None)
        self.heavy = deque(n for n in self.heavy if n not in members)
        self.light = deque(n for n in self.light if n not in members)
        self._queued -= members
        for src in list(self._deferred):
            self._deferred[src] = [p for p in self._deferred[src] if p not in members]
            if not self._deferred[src]:
                del self._deferred[src]

        info = g.loops[header]
        self.entered -= set(info.members) - {header}
        touched = set(members)
        for nid in members:
            touched.update(u for u in self._users.get(nid, ()) if u not in self.done)
        for nid in touched:
            if nid in self.remaining:
                self.remaining[nid] = sum(1 for o in g.nodes[nid].operands if o not in self.done)
        for inner in g.loops:
            if inner != header and inner in info:
                self.epoch[inner] = 0
                self.last_done[inner].clear()
                self.taken_exit.pop(inner, None)
        for phi, source in late.items():
            self._deferred.setdefault(source, []).append(phi)
        return captured

    def enter_block(self, label: int):
        with self._lock:
            g = self.graph
            captured: Optional[Dict[int, object]] = None
            if label in g.loops:
                e = self.epoch.get(label, 0)
                if e >= 1:
                    captured = self._rearm_loop(label)
                    self.epoch[label] = e + 1
                else:
                    self.epoch[label] = 1
                self._record(EPOCH_ADVANCE, label, self.epoch[label])
            self.visit_seq += 1
            self.block_visit[label] = self.visit_seq
            if self.on_enter_block is not None:
                self.on_enter_block(label, self.visit_seq)
            self.entered.add(label)
            self._record(BLOCK_ENTER, label, self._current_epoch(label))
            logger.debug("entered '%s' (visit %d)", g.label_name(label), self.visit_seq)

            pred = self.pred_label.get(label)
            for phi in g.phis(label):
                if captured is not None and phi.id in captured:
                    self._complete(phi.id, captured[phi.id])
                    continue
                if captured is not None:
                    # source still pending, registered by _rearm_loop
                    continue
                source = dict(phi.incoming).get(pred)
                if source is None:
                    raise errors.UnknownPredecessor(
                        f"phi %{phi.name} has no value for predecessor "
                        f"{g.label_name(pred) if pred is not None else None}")
                if source in self.done:
                    self._complete(phi.id, self.values[source])
                else:
                    self._deferred.setdefault(source, []).append(phi.id)

            for nid in g.chains.get(label, ()):
                node = g.nodes[nid]
                if node.kind != NodeKind.PHI and nid not in self.done and self.remaining.get(nid, 0) == 0:
                    self._enqueue(nid)

    # --- completion ---

    def _complete(self, nid: int, value):
        node = self.graph.nodes[nid]
        self.done.add(nid)
        self.values[nid] = value
        if node.block is not None:
            for header in self.graph.enclosing_loops(node.block):
                if self.epoch.get(header, 0) >= 1:
                    self.last_done[header][nid] = self.epoch[header]
        self._record(COMPLETE, nid, self._current_epoch(node.block))
        for user in self._users.get(nid, ()):
            if user in self.done or user not in self.remaining:
                continue
            self.remaining[user] -= 1
            u = self.graph.nodes[user]
            if self.remaining[user] == 0 and u.kind != NodeKind.PHI and u.block in self.entered:
                self._enqueue(user)
        for phi in self._deferred.pop(nid, []):
            if phi not in self.done:
                self._complete(phi, value)
        if nid == self.graph.root:
            self.finished = True

    def mark_complete(self, nid: int, value):
        with self._lock:
            if nid in self.done:
                raise errors.DoubleCompletion(f"{self.graph.nodes[nid].label()} completed twice")
            self.in_flight.discard(nid)
            self._complete(nid, value)
            self.last_progress = time.monotonic()
            self._unpark()

    def _unpark(self):
        for bid in sorted(self.parked):
            self._queued.add(bid)
            self.light.append(bid)
        self.parked.clear()
        self._attempts.clear()


# ===== TRACE VALIDATION =====

class TraceValidator:
    """Replays a trace against the graph and lists every rule it breaks"""

    def __init__(self, graph: CircuitGraph):
        self.graph = graph
        self._members = {h: {n for lbl in info.members for n in graph.chains.get(lbl, ())}
                         for h, info in graph.loops.items()}

    def violations(self, events: List[TraceEvent]) -> List[str]:
        g = self.graph
        problems: List[str] = []
        completed: Set[int] = {n.id for n in g.nodes.values() if n.kind in (NodeKind.INPUT, NodeKind.CONST)}
        entered: Set[int] = set()
        ever_entered: Set[int] = set()
        last_epoch: Dict[int, Optional[int]] = {h: None for h in g.loops}

        for ev in events:
            if ev.event == EPOCH_ADVANCE:
                prev = last_epoch.get(ev.node)
                if ev.epoch == FINISHED:
                    if prev is None or prev == FINISHED:
                        problems.append(f"loop {ev.node} finished without running")
                elif prev is None or prev == FINISHED:
                    if ev.epoch != 1:
                        problems.append(f"loop {ev.node} started at epoch {ev.epoch}")
                elif ev.epoch != prev + 1:
                    problems.append(f"loop {ev.node} jumped from epoch {prev} to {ev.epoch}")
                if ev.epoch != FINISHED and ev.epoch > 1:
                    completed -= self._members[ev.node]
                    entered -= set(g.loops[ev.node].members) - {ev.node}
                    for inner in g.loops:
                        if inner != ev.node and inner in g.loops[ev.node]:
                            last_epoch[inner] = None
                last_epoch[ev.node] = ev.epoch
            elif ev.event == BLOCK_ENTER:
                entered.add(ev.node)
                ever_entered.add(ev.node)
            elif ev.event == COMPLETE:
                completed.add(ev.node)
            elif ev.event == ISSUE:
                node = g.nodes[ev.node]
                if node.block not in ever_entered:
                    problems.append(f"{node.label()} issued in never-entered block {node.block}")
                elif node.block not in entered:
                    problems.append(f"{node.label()} issued outside its block's current visit")
                missing = [o for o in node.operands if o not in completed]
                if missing:
                    problems.append(f"{node.label()} issued before operand(s) {missing} completed")
        for header, last in last_epoch.items():
            if last is not None and last != FINISHED:
                problems.append(f"loop {header} never finished (last epoch {last})")
        return problems

    def epoch_sequences(self, events: List[TraceEvent]) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {h: [] for h in self.graph.loops}
        for ev in events:
            if ev.event == EPOCH_ADVANCE:
                out[ev.node].append(ev.epoch)
        return out


# ===== CLEARTEXT DRIVER =====

def drive(scheduler: Scheduler, evaluate: Callable[[Node, List[object]], object], workers: int = 1,
          timeout: float = 10.0):
    """Run a scheduler to completion with a synchronous evaluate(node, args) on W threads

    Used for cleartext runs; the protocol runtime has its own worker pool.
    """
    failure: List[BaseException] = []
    idle = threading.Condition()

    def work():
        while not failure:
            try:
                ready = scheduler.next_ready_node()
                if ready is None:
                    if scheduler.drained():
                        with idle:
                            idle.notify_all()
                        return
                    if scheduler.is_stalled():
                        raise errors.SchedulerStalled("no node is ready and none is in flight")
                    if time.monotonic() - scheduler.last_progress > timeout:
                        raise errors.SchedulerStalled(f"no progress for {timeout:.1f} s")
                    with idle:
                        idle.wait(0.01)
                    continue
                node = scheduler.graph.nodes[ready.id]
                scheduler.mark_complete(ready.id, evaluate(node, scheduler.operand_values(node)))
                with idle:
                    idle.notify_all()
            except BaseException as e:
                failure.append(e)
                with idle:
                    idle.notify_all()
                return

    scheduler.start()
    threads = [threading.Thread(target=work, name=f"worker-{i}", daemon=True) for i in range(max(1, workers))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failure:
        raise failure[0]
    return scheduler.root_value
