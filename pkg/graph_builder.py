"""Turns a validated IR entry function into an MPC circuit graph

The graph holds one node per surviving SSA definition with operand edges stored
on the consumer, one BlockLabel per basic block (pointing at the first node of
its intra-block chain), branch successors, privacy tags and natural-loop
metadata. `compile_module` runs every pass in order.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

import errors
import field as ff
from config import CIRCUIT_MAGIC, CIRCUIT_VERSION, PRIME, SLICE_SIZE
from ir_parser import (
    ANNOTATION_PREFIX, ICMP_PREDICATES, LINEAR_LAYER_HOOK, PRIVATE, PUBLIC, REDUCE_ADD_PREFIX,
    REDUCE_MUL_PREFIX, EntryView, IrInstruction, IrModule, IrValue, ValueKind, validate_entry,
)
from linear_layer import plan_tiles

logger = logging.getLogger(__name__)


# ===== NODE MODEL =====

class NodeKind(str, Enum):
    INPUT = "Input"
    CONST = "Const"
    ADDER = "Adder"
    MULTIPLIER = "Multiplier"
    SUBTRACT = "Subtract"
    ADD_BATCH = "AddBatch"
    MULT_BATCH = "MultBatch"
    SUB_BATCH = "SubBatch"
    REDUCE_ADD = "ReduceAdd"
    REDUCE_MUL = "ReduceMul"
    LOAD = "Load"
    LINEAR_LAYER = "LinearLayer"
    PHI = "Phi"
    BRANCH = "Branch"
    BLOCK_LABEL = "BlockLabel"
    ROOT = "Root"
    COMPARE = "Compare"
    # raw kinds, gone once compile_module returns
    GEP = "Gep"
    RAW_LOAD = "RawLoad"
    SELECT = "Select"
    SHL = "Shl"
    ZEXT = "Zext"
    BIT_AND = "BitAnd"
    BIT_OR = "BitOr"
    BIT_XOR = "BitXor"
    ICMP = "ICmp"
    CALL = "Call"
    ANNOTATION = "Annotation"


FINAL_KINDS = (
    NodeKind.INPUT, NodeKind.CONST, NodeKind.ADDER, NodeKind.MULTIPLIER, NodeKind.SUBTRACT,
    NodeKind.ADD_BATCH, NodeKind.MULT_BATCH, NodeKind.SUB_BATCH, NodeKind.REDUCE_ADD,
    NodeKind.REDUCE_MUL, NodeKind.LOAD, NodeKind.LINEAR_LAYER, NodeKind.PHI, NodeKind.BRANCH,
    NodeKind.BLOCK_LABEL, NodeKind.ROOT, NodeKind.COMPARE,
)
HEAVY_KINDS = frozenset({NodeKind.MULTIPLIER, NodeKind.MULT_BATCH, NodeKind.REDUCE_MUL, NodeKind.LINEAR_LAYER})
BATCH_KINDS = frozenset({NodeKind.ADD_BATCH, NodeKind.MULT_BATCH, NodeKind.SUB_BATCH})
LEAF_KINDS = frozenset({NodeKind.INPUT, NodeKind.CONST})

_BINARY_KINDS = {
    ("add", False): NodeKind.ADDER, ("add", True): NodeKind.ADD_BATCH,
    ("sub", False): NodeKind.SUBTRACT, ("sub", True): NodeKind.SUB_BATCH,
    ("mul", False): NodeKind.MULTIPLIER, ("mul", True): NodeKind.MULT_BATCH,
}


@dataclass
class Node:
    id: int
    kind: NodeKind
    operands: List[int] = field(default_factory=list)
    lanes: int = 1
    block: Optional[int] = None
    private: bool = False
    next: Optional[int] = None
    name: Optional[str] = None
    value: Tuple[int, ...] = ()
    predicate: Optional[str] = None
    incoming: List[Tuple[int, int]] = field(default_factory=list)
    successors: List[int] = field(default_factory=list)
    dims: Optional[Tuple[int, int]] = None
    bit: bool = False
    pointer: bool = False

    @property
    def is_heavy(self) -> bool:
        return self.kind in HEAVY_KINDS

    @property
    def is_compute(self) -> bool:
        """Nodes a worker evaluates (everything except leaves and control markers)"""
        return self.kind not in LEAF_KINDS and self.kind not in (NodeKind.BRANCH, NodeKind.BLOCK_LABEL)

    def label(self) -> str:
        return f"{self.kind.value}#{self.id}" + (f"(%{self.name})" if self.name else "")


@dataclass
class InputDescriptor:
    name: str
    node: int
    private: bool
    pointer: bool
    element_count: int
    dynamic: bool = False

    def accepts(self, length: int) -> bool:
        """Whether an input array of this length fits the parameter"""
        if self.dynamic:
            return length >= self.element_count
        return length == self.element_count


@dataclass
class LoopInfo:
    header: int
    members: Tuple[int, ...]
    exits: Tuple[int, ...]
    parent: Optional[int] = None
    depth: int = 1
    _member_set: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def __post_init__(self):
        self._member_set = frozenset(self.members)

    def __contains__(self, label_id: int) -> bool:
        return label_id in self._member_set


class CircuitGraph:
    """Nodes, blocks, loops and inputs of one compiled entry function"""

    def __init__(self, entry: str = ""):
        self.entry = entry
        self.nodes: Dict[int, Node] = {}
        self.root: Optional[int] = None
        self.const_pool: Dict[Tuple[int, ...], int] = {}
        self.inputs: List[InputDescriptor] = []
        self.labels: List[int] = []
        self.loops: Dict[int, LoopInfo] = {}
        # label id -> ordered node ids of the block
        self.chains: Dict[int, List[int]] = {}
        self._next_id = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, CircuitGraph):
            return NotImplemented
        return (self.entry == other.entry and self.nodes == other.nodes and self.root == other.root
                and self.const_pool == other.const_pool and self.inputs == other.inputs
                and self.labels == other.labels and self.loops == other.loops)

    # --- construction helpers ---

    def add(self, kind: NodeKind, **kw) -> Node:
        node = Node(id=self._next_id, kind=kind, **kw)
        self.nodes[node.id] = node
        self._next_id += 1
        return node

    def intern_const(self, values: Iterable[int]) -> int:
        key = tuple(ff.from_int(v) for v in values)
        nid = self.const_pool.get(key)
        if nid is None:
            node = self.add(NodeKind.CONST, value=key, lanes=len(key),
                            bit=len(key) == 1 and key[0] in (0, 1))
            nid = node.id
            self.const_pool[key] = nid
        return nid

    def insert_before(self, anchor: int, new_id: int):
        block = self.nodes[anchor].block
        chain = self.chains[block]
        chain.insert(chain.index(anchor), new_id)
        self.nodes[new_id].block = block

    def remove(self, nid: int):
        node = self.nodes.pop(nid)
        if node.block is not None and nid in self.chains.get(node.block, ()):
            self.chains[node.block].remove(nid)
        if node.kind == NodeKind.CONST:
            self.const_pool.pop(node.value, None)

    def replace_uses(self, old: int, new: int):
        for node in self.nodes.values():
            if old in node.operands:
                node.operands = [new if o == old else o for o in node.operands]
            if node.incoming:
                node.incoming = [(lbl, new if v == old else v) for lbl, v in node.incoming]

    def users(self) -> Dict[int, List[int]]:
        """node id -> consumer ids along operand edges"""
        out: Dict[int, List[int]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for op in node.operands:
                out[op].append(node.id)
        return out

    def phi_users(self) -> Dict[int, List[int]]:
        """node id -> phis that list it among their incoming values"""
        out: Dict[int, List[int]] = {}
        for node in self.nodes.values():
            for _, v in node.incoming:
                out.setdefault(v, []).append(node.id)
        return out

    # --- control-flow queries ---

    @property
    def entry_label(self) -> int:
        return self.labels[0]

    def chain(self, label_id: int) -> List[int]:
        return list(self.chains.get(label_id, ()))

    def terminator(self, label_id: int) -> Optional[Node]:
        chain = self.chains.get(label_id)
        return self.nodes[chain[-1]] if chain else None

    def successors(self, label_id: int) -> List[int]:
        term = self.terminator(label_id)
        if term is None or term.kind != NodeKind.BRANCH:
            return []
        return list(term.successors)

    def predecessors(self, label_id: int) -> List[int]:
        return [lbl for lbl in self.labels if label_id in self.successors(lbl)]

    def phis(self, label_id: int) -> List[Node]:
        return [self.nodes[n] for n in self.chains.get(label_id, ()) if self.nodes[n].kind == NodeKind.PHI]

    def enclosing_loops(self, label_id: int) -> List[int]:
        """Headers of every loop containing the block, innermost first"""
        found = [h for h, info in self.loops.items() if label_id in info]
        return sorted(found, key=lambda h: -self.loops[h].depth)

    def innermost_loop(self, label_id: int) -> Optional[int]:
        loops = self.enclosing_loops(label_id)
        return loops[0] if loops else None

    def label_name(self, label_id: int) -> str:
        return self.nodes[label_id].name

    def label_by_name(self, name: str) -> int:
        for lid in self.labels:
            if self.nodes[lid].name == name:
                return lid
        raise KeyError(name)

    def input(self, name: str) -> InputDescriptor:
        for desc in self.inputs:
            if desc.name == name:
                return desc
        raise KeyError(name)

    def kind_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for node in self.nodes.values():
            counts[node.kind.value] = counts.get(node.kind.value, 0) + 1
        return counts


def _lanes_of(inst_type) -> int:
    return inst_type.lanes if inst_type.is_vector else 1


# ===== BUILD =====

def _raw_kind(inst: IrInstruction) -> Optional[NodeKind]:
    op = inst.opcode
    if op in ("add", "sub", "mul"):
        return _BINARY_KINDS[(op, inst.type.is_vector)]
    simple = {
        "shl": NodeKind.SHL, "and": NodeKind.BIT_AND, "or": NodeKind.BIT_OR, "xor": NodeKind.BIT_XOR,
        "icmp": NodeKind.ICMP, "select": NodeKind.SELECT, "zext": NodeKind.ZEXT, "load": NodeKind.RAW_LOAD,
        "getelementptr": NodeKind.GEP, "phi": NodeKind.PHI, "br": NodeKind.BRANCH, "ret": NodeKind.ROOT,
    }
    if op in simple:
        return simple[op]
    if op == "store":
        return None
    if op == "call":
        if inst.callee == LINEAR_LAYER_HOOK:
            return NodeKind.CALL
        if inst.callee.startswith(ANNOTATION_PREFIX):
            return NodeKind.ANNOTATION
        if inst.callee.startswith(REDUCE_ADD_PREFIX):
            return NodeKind.REDUCE_ADD
        if inst.callee.startswith(REDUCE_MUL_PREFIX):
            return NodeKind.REDUCE_MUL
    raise errors.UnloweredInstruction(f"line {inst.line}: no lowering for '{op}'")


def build_graph(view: EntryView) -> CircuitGraph:
    """One node per SSA definition, operand edges on consumers, constants interned"""
    func = view.function
    graph = CircuitGraph(entry=func.name)
    defs: Dict[str, int] = {}

    for p in view.params:
        node = graph.add(NodeKind.INPUT, name=p.name, lanes=_lanes_of(p.type), private=p.privacy == PRIVATE,
                         pointer=p.type.is_pointer, bit=p.type.is_bit)
        defs[p.name] = node.id
        graph.inputs.append(InputDescriptor(name=p.name, node=node.id, private=node.private,
                                            pointer=node.pointer, element_count=node.lanes))

    label_ids: Dict[str, int] = {}
    for block in func.blocks:
        label = graph.add(NodeKind.BLOCK_LABEL, name=block.label)
        graph.labels.append(label.id)
        graph.chains[label.id] = []
        label_ids[block.label] = label.id

    pending: List[Tuple[Node, IrInstruction]] = []
    for block in func.blocks:
        lid = label_ids[block.label]
        for inst in block.instructions:
            kind = _raw_kind(inst)
            if kind is None:
                logger.debug("line %d: store treated as metadata", inst.line)
                continue
            node = graph.add(kind, block=lid, name=inst.result, lanes=_lanes_of(inst.type),
                             predicate=inst.predicate, bit=inst.type.is_bit, pointer=inst.type.is_pointer)
            if kind in (NodeKind.REDUCE_ADD, NodeKind.REDUCE_MUL, NodeKind.ROOT):
                node.lanes = 1 if kind != NodeKind.ROOT else _lanes_of(inst.type)
            if kind == NodeKind.ANNOTATION:
                node.name = inst.annotation
            graph.chains[lid].append(node.id)
            if inst.result is not None:
                defs[inst.result] = node.id
            pending.append((node, inst))

    def operand(v: IrValue) -> Optional[int]:
        if v.kind == ValueKind.LOCAL:
            return defs[v.name]
        if v.kind == ValueKind.LABEL_REF:
            return label_ids[v.name]
        if v.kind == ValueKind.CONST_INT or v.kind == ValueKind.CONST_VECTOR:
            return graph.intern_const(v.values)
        return None

    for node, inst in pending:
        if node.kind == NodeKind.PHI:
            node.incoming = [(label_ids[lbl], operand(v)) for v, lbl in inst.phi_pairs()]
        elif node.kind == NodeKind.BRANCH:
            node.successors = [label_ids[name] for name in inst.branch_targets()]
            node.operands = [operand(inst.operands[0])] if len(inst.operands) == 3 else []
        elif node.kind == NodeKind.ANNOTATION:
            node.operands = [operand(inst.operands[0])]
        else:
            node.operands = [operand(v) for v in inst.operands]
        if node.kind == NodeKind.ROOT:
            graph.root = node.id

    logger.info("built graph for '@%s': %d nodes, %d blocks", func.name, len(graph.nodes), len(graph.labels))
    return graph


# ===== LOADS =====

def normalize_loads(graph: CircuitGraph) -> CircuitGraph:
    """Replace load/GEP pairs with Load(base, start, count) over parameters"""
    resolved: Dict[int, Tuple[int, Optional[int]]] = {}

    def resolve(nid: int) -> Tuple[int, Optional[int]]:
        node = graph.nodes[nid]
        if node.kind == NodeKind.INPUT and node.pointer:
            return nid, None
        if node.kind == NodeKind.GEP:
            if nid not in resolved:
                base, offset = resolve(node.operands[0])
                index = node.operands[1]
                if offset is not None:
                    add = graph.add(NodeKind.ADDER, operands=[offset, index])
                    graph.insert_before(nid, add.id)
                    index = add.id
                resolved[nid] = (base, index)
            return resolved[nid]
        name = f"%{node.name}" if node.name else node.label()
        raise errors.UntraceableBase(f"pointer {name} does not trace back to a parameter")

    for node in list(graph.nodes.values()):
        if node.kind == NodeKind.RAW_LOAD:
            base, offset = resolve(node.operands[0])
            start = offset if offset is not None else graph.intern_const([0])
            count = graph.intern_const([node.lanes])
            node.kind = NodeKind.LOAD
            node.operands = [base, start, count]
        elif node.kind == NodeKind.CALL:
            for i in range(3):
                base, offset = resolve(node.operands[i])
                if offset is not None:
                    off = graph.nodes[offset]
                    if not (off.kind == NodeKind.CONST and off.value == (0,)):
                        raise errors.UntraceableBase(
                            f"{LINEAR_LAYER_HOOK} operand {i} must point at the start of a parameter")
                node.operands[i] = base

    # GEPs and pointer phis go away; only other doomed pointers may still use them
    doomed = {n.id for n in graph.nodes.values()
              if n.pointer and n.kind not in (NodeKind.INPUT, NodeKind.CALL, NodeKind.ROOT)}
    users = graph.users()
    phi_users = graph.phi_users()
    for nid in doomed:
        for user in users[nid] + phi_users.get(nid, []):
            if user not in doomed:
                node = graph.nodes[nid]
                raise errors.UntraceableBase(f"pointer %{node.name} is used as a value by {graph.nodes[user].label()}")
    for nid in doomed:
        graph.remove(nid)
    logger.info("normalized loads: %d Load node(s)", sum(1 for n in graph.nodes.values() if n.kind == NodeKind.LOAD))
    return graph


# ===== LINEAR LAYER =====

def collapse_linear_layer(graph: CircuitGraph) -> CircuitGraph:
    """Turn each mark_linear_layer call into one LinearLayer(x, W, b) node"""
    for node in graph.nodes.values():
        if node.kind != NodeKind.CALL:
            continue
        din_node = graph.nodes[node.operands[3]]
        dout_node = graph.nodes[node.operands[4]]
        if din_node.kind != NodeKind.CONST or dout_node.kind != NodeKind.CONST:
            raise errors.NonConstantDims(f"{LINEAR_LAYER_HOOK} at %{node.name}: DIN and DOUT must be constants")
        din, dout = ff.to_signed(din_node.value[0]), ff.to_signed(dout_node.value[0])
        if din < 1 or dout < 1:
            raise errors.NonConstantDims(f"{LINEAR_LAYER_HOOK} at %{node.name}: dimensions must be positive")
        node.kind = NodeKind.LINEAR_LAYER
        node.operands = node.operands[:3]
        node.dims = (din, dout)
        node.lanes = dout
        logger.info("linear layer %%%s: DIN=%d DOUT=%d", node.name, din, dout)
    _drop_unused_consts(graph)
    return graph


# ===== PRIVACY =====

def tag_and_propagate_privacy(graph: CircuitGraph, view: Optional[EntryView] = None) -> CircuitGraph:
    """Tag inputs from annotations, then private iff any operand is private"""
    for node in list(graph.nodes.values()):
        if node.kind != NodeKind.ANNOTATION:
            continue
        target = graph.nodes.get(node.operands[0])
        payload = (node.name or "").strip().lower()
        if target is not None and target.kind == NodeKind.INPUT and payload in (PRIVATE, PUBLIC):
            target.private = payload == PRIVATE
        graph.remove(node.id)
    if view is not None:
        by_name = {p.name: p.privacy for p in view.params}
        for desc in graph.inputs:
            graph.nodes[desc.node].private = by_name[desc.name] == PRIVATE
    for desc in graph.inputs:
        desc.private = graph.nodes[desc.node].private

    for node in graph.nodes.values():
        if node.kind != NodeKind.INPUT:
            node.private = False
    changed = True
    while changed:
        changed = False
        for node in graph.nodes.values():
            if node.private or node.kind in (NodeKind.INPUT, NodeKind.CONST, NodeKind.BLOCK_LABEL):
                continue
            sources = list(node.operands) + [v for _, v in node.incoming]
            if any(graph.nodes[s].private for s in sources):
                node.private = True
                changed = True
    logger.info("privacy: %d private node(s)", sum(1 for n in graph.nodes.values() if n.private))
    return graph


# ===== IDIOM LOWERING =====

def _derive_bits(graph: CircuitGraph):
    """Mark values proven to be 0/1"""
    changed = True
    while changed:
        changed = False
        for node in graph.nodes.values():
            if node.bit:
                continue
            ops = [graph.nodes[o] for o in node.operands]
            k = node.kind
            if k in (NodeKind.ICMP, NodeKind.COMPARE):
                bit = True
            elif k == NodeKind.ZEXT:
                bit = ops[0].bit
            elif k in (NodeKind.BIT_AND, NodeKind.BIT_OR, NodeKind.BIT_XOR, NodeKind.MULTIPLIER):
                bit = all(o.bit for o in ops)
            elif k == NodeKind.SELECT:
                bit = ops[1].bit and ops[2].bit
            elif k == NodeKind.PHI:
                bit = bool(node.incoming) and all(graph.nodes[v].bit for _, v in node.incoming)
            else:
                bit = False
            if bit:
                node.bit = True
                changed = True


def _xor_nodes(graph: CircuitGraph, anchor: int, x: int, y: int) -> Tuple[int, int]:
    """Insert x+y and 2xy before anchor; returns their ids"""
    total = graph.add(NodeKind.ADDER, operands=[x, y])
    prod = graph.add(NodeKind.MULTIPLIER, operands=[x, y])
    twice = graph.add(NodeKind.MULTIPLIER, operands=[prod.id, graph.intern_const([2])])
    for n in (total, prod, twice):
        graph.insert_before(anchor, n.id)
    return total.id, twice.id


def lower_idioms(graph: CircuitGraph) -> CircuitGraph:
    """Rewrite select, shl, zext, bitwise and icmp into arithmetic or Compare nodes"""
    _derive_bits(graph)
    lowered = 0
    for nid in sorted(graph.nodes):
        node = graph.nodes.get(nid)
        if node is None:
            continue
        k = node.kind
        if k == NodeKind.ZEXT:
            graph.replace_uses(nid, node.operands[0])
            graph.remove(nid)
        elif k == NodeKind.SHL:
            amounts = graph.nodes[node.operands[1]].value
            factors = [ff.pow_(2, a) for a in amounts]
            node.operands = [node.operands[0], graph.intern_const(factors)]
            node.kind = NodeKind.MULT_BATCH if node.lanes > 1 else NodeKind.MULTIPLIER
        elif k == NodeKind.SELECT:
            c, t, f = node.operands
            diff = graph.add(NodeKind.SUBTRACT, operands=[t, f])
            scaled = graph.add(NodeKind.MULTIPLIER, operands=[c, diff.id])
            graph.insert_before(nid, diff.id)
            graph.insert_before(nid, scaled.id)
            node.kind = NodeKind.ADDER
            node.operands = [f, scaled.id]
        elif k in (NodeKind.BIT_AND, NodeKind.BIT_OR, NodeKind.BIT_XOR):
            x, y = node.operands
            if not (graph.nodes[x].bit and graph.nodes[y].bit):
                raise errors.WideBitwiseUnsupported(
                    f"%{node.name}: {k.value} is only supported on 0/1 values")
            if k == NodeKind.BIT_AND:
                node.kind = NodeKind.MULTIPLIER
            elif k == NodeKind.BIT_OR:
                total = graph.add(NodeKind.ADDER, operands=[x, y])
                prod = graph.add(NodeKind.MULTIPLIER, operands=[x, y])
                graph.insert_before(nid, total.id)
                graph.insert_before(nid, prod.id)
                node.kind = NodeKind.SUBTRACT
                node.operands = [total.id, prod.id]
            else:
                total, twice = _xor_nodes(graph, nid, x, y)
                node.kind = NodeKind.SUBTRACT
                node.operands = [total, twice]
        elif k == NodeKind.ICMP:
            x, y = node.operands
            if not node.private:
                node.kind = NodeKind.COMPARE
            elif node.predicate in ("eq", "ne") and graph.nodes[x].bit and graph.nodes[y].bit:
                total, twice = _xor_nodes(graph, nid, x, y)
                if node.predicate == "ne":
                    node.kind = NodeKind.SUBTRACT
                    node.operands = [total, twice]
                else:
                    differ = graph.add(NodeKind.SUBTRACT, operands=[total, twice])
                    graph.insert_before(nid, differ.id)
                    node.kind = NodeKind.SUBTRACT
                    node.operands = [graph.intern_const([1]), differ.id]
                node.predicate = None
            else:
                raise errors.SecretComparisonUnsupported(
                    f"%{node.name}: icmp {node.predicate} on private operands has no arithmetic form")
        else:
            continue
        lowered += 1
    _drop_unused_consts(graph)
    logger.info("lowered %d idiom(s)", lowered)
    return graph


def _drop_unused_consts(graph: CircuitGraph):
    used = set()
    for node in graph.nodes.values():
        used.update(node.operands)
        used.update(v for _, v in node.incoming)
    for nid in [n.id for n in graph.nodes.values() if n.kind == NodeKind.CONST and n.id not in used]:
        graph.remove(nid)


# ===== CONTROL FLOW AND LOOPS =====

def _dominators(graph: CircuitGraph, reachable: List[int]) -> Dict[int, Set[int]]:
    preds = {lid: [p for p in graph.predecessors(lid) if p in reachable] for lid in reachable}
    everything = set(reachable)
    dom = {lid: set(everything) for lid in reachable}
    dom[graph.entry_label] = {graph.entry_label}
    changed = True
    while changed:
        changed = False
        for lid in reachable:
            if lid == graph.entry_label:
                continue
            new = set(everything)
            for p in preds[lid]:
                new &= dom[p]
            new.add(lid)
            if new != dom[lid]:
                dom[lid] = new
                changed = True
    return dom


def build_cfg_and_loops(graph: CircuitGraph) -> CircuitGraph:
    """Link intra-block chains, then find natural loops, their members and exits"""
    for lid in graph.labels:
        chain = graph.chains[lid]
        label = graph.nodes[lid]
        label.next = chain[0] if chain else None
        for a, b in zip(chain, chain[1:]):
            graph.nodes[a].next = b
        if chain:
            graph.nodes[chain[-1]].next = None

    # DFS from entry: preorder for reachability, gray set for retreating edges
    order: List[int] = []
    back_edges: List[Tuple[int, int]] = []
    retreating: List[Tuple[int, int]] = []
    state: Dict[int, int] = {}
    stack = [(graph.entry_label, iter(graph.successors(graph.entry_label)))]
    state[graph.entry_label] = 1
    order.append(graph.entry_label)
    while stack:
        lid, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            state[lid] = 2
            stack.pop()
            continue
        if state.get(nxt) == 1:
            retreating.append((lid, nxt))
        elif nxt not in state:
            state[nxt] = 1
            order.append(nxt)
            stack.append((nxt, iter(graph.successors(nxt))))

    dom = _dominators(graph, order)
    for src, dst in retreating:
        if dst not in dom[src]:
            raise errors.IrreducibleControlFlow(
                f"edge {graph.label_name(src)} -> {graph.label_name(dst)} enters a loop that has a second entry")
        back_edges.append((src, dst))

    bodies: Dict[int, Set[int]] = {}
    for src, header in back_edges:
        body = bodies.setdefault(header, {header})
        work = [src]
        while work:
            lid = work.pop()
            if lid in body:
                continue
            body.add(lid)
            work.extend(p for p in graph.predecessors(lid) if p in dom)

    position = {lid: i for i, lid in enumerate(graph.labels)}
    loops: Dict[int, LoopInfo] = {}
    for header, body in bodies.items():
        members = tuple(sorted(body, key=position.get))
        exits = sorted({s for m in members for s in graph.successors(m) if s not in body}, key=position.get)
        loops[header] = LoopInfo(header=header, members=members, exits=tuple(exits))
    for header, info in loops.items():
        outer = [h for h, o in loops.items() if h != header and header in o]
        if outer:
            info.parent = min(outer, key=lambda h: len(loops[h].members))
    for info in loops.values():
        depth, parent = 1, info.parent
        while parent is not None:
            depth += 1
            parent = loops[parent].parent
        info.depth = depth
    graph.loops = {h: loops[h] for h in sorted(loops, key=position.get)}
    for info in graph.loops.values():
        logger.info("loop at '%s': %d member(s), exits %s", graph.label_name(info.header), len(info.members),
                    [graph.label_name(e) for e in info.exits])
    return graph


def check_public_indices(graph: CircuitGraph) -> CircuitGraph:
    """A Load may only start at a public offset"""
    for node in graph.nodes.values():
        if node.kind == NodeKind.LOAD and graph.nodes[node.operands[1]].private:
            raise errors.SecretIndexUnsupported(f"load %{node.name} uses a private index")
    return graph


def _describe_inputs(graph: CircuitGraph):
    """Element counts per parameter from its Load and LinearLayer uses"""
    for desc in graph.inputs:
        if not desc.pointer:
            continue
        need, dynamic, used = 0, False, False
        for node in graph.nodes.values():
            if node.kind == NodeKind.LOAD and node.operands[0] == desc.node:
                used = True
                start = graph.nodes[node.operands[1]]
                if start.kind == NodeKind.CONST:
                    need = max(need, start.value[0] + node.lanes)
                else:
                    dynamic = True
                    need = max(need, node.lanes)
            elif node.kind == NodeKind.LINEAR_LAYER:
                din, dout = node.dims
                for operand, size in zip(node.operands, (din, din * dout, dout)):
                    if operand == desc.node:
                        used = True
                        need = max(need, size)
        desc.element_count = need
        desc.dynamic = dynamic or not used


# ===== RENUMBERING =====

def renumber(graph: CircuitGraph) -> CircuitGraph:
    """Stable ids: inputs, constants by value, then each block's label and chain in source order"""
    order: List[int] = [d.node for d in graph.inputs]
    order += [graph.const_pool[k] for k in sorted(graph.const_pool, key=lambda k: (len(k), k))]
    for lid in graph.labels:
        order.append(lid)
        order.extend(graph.chains[lid])
    seen = set(order)
    order += sorted(n for n in graph.nodes if n not in seen)
    remap = {old: new for new, old in enumerate(order)}

    def m(x: Optional[int]) -> Optional[int]:
        return None if x is None else remap[x]

    out = CircuitGraph(entry=graph.entry)
    for old in order:
        n = graph.nodes[old]
        out.nodes[remap[old]] = Node(
            id=remap[old], kind=n.kind, operands=[remap[o] for o in n.operands], lanes=n.lanes,
            block=m(n.block), private=n.private, next=m(n.next), name=n.name, value=n.value,
            predicate=n.predicate, incoming=[(remap[l], remap[v]) for l, v in n.incoming],
            successors=[remap[s] for s in n.successors], dims=n.dims, bit=n.bit, pointer=n.pointer)
    out._next_id = len(order)
    out.root = m(graph.root)
    out.const_pool = {k: remap[v] for k, v in graph.const_pool.items()}
    out.inputs = [InputDescriptor(d.name, remap[d.node], d.private, d.pointer, d.element_count, d.dynamic)
                  for d in graph.inputs]
    out.labels = [remap[l] for l in graph.labels]
    out.chains = {remap[l]: [remap[n] for n in graph.chains[l]] for l in graph.labels}
    out.loops = {remap[h]: LoopInfo(header=remap[h], members=tuple(remap[x] for x in info.members),
                                    exits=tuple(remap[x] for x in info.exits), parent=m(info.parent),
                                    depth=info.depth)
                 for h, info in graph.loops.items()}
    return out


# ===== PIPELINE =====

def compile_module(module: Union[IrModule, EntryView], entry: Optional[str] = None) -> CircuitGraph:
    """Run every pass and return the finished circuit"""
    view = module if isinstance(module, EntryView) else validate_entry(module, entry)
    graph = build_graph(view)
    graph = normalize_loads(graph)
    graph = collapse_linear_layer(graph)
    graph = tag_and_propagate_privacy(graph, view)
    graph = lower_idioms(graph)
    graph = tag_and_propagate_privacy(graph)
    graph = build_cfg_and_loops(graph)
    graph = check_public_indices(graph)
    _describe_inputs(graph)
    root = graph.nodes[graph.root]
    returned = graph.nodes[root.operands[0]]
    root.lanes = returned.lanes
    if returned.kind == NodeKind.INPUT and returned.pointer:
        root.lanes = graph.input(returned.name).element_count
    graph = renumber(graph)
    leftover = [n for n in graph.nodes.values() if n.kind not in FINAL_KINDS]
    if leftover:
        raise errors.UnloweredInstruction(f"raw node(s) left after lowering: {[n.label() for n in leftover]}")
    logger.info("compiled '@%s': %s", graph.entry, graph.kind_counts())
    return graph


# ===== TRIPLE DEMAND =====

@dataclass
class TripleDemand:
    scalar: int = 0
    matrix: Dict[Tuple[int, int], int] = field(default_factory=dict)
    masks: int = 0

    @property
    def tiles(self) -> int:
        return sum(self.matrix.values())


def count_triple_demand(graph: CircuitGraph, loop_trips: int = 1, slice_size: int = SLICE_SIZE) -> TripleDemand:
    """Static preprocessing demand; loop bodies count loop_trips times per enclosing loop"""
    demand = TripleDemand()
    for node in graph.nodes.values():
        if node.block is None:
            continue
        repeat = loop_trips ** len(graph.enclosing_loops(node.block))
        ops = [graph.nodes[o] for o in node.operands]
        if node.kind in (NodeKind.MULTIPLIER, NodeKind.MULT_BATCH) and all(o.private for o in ops):
            demand.scalar += node.lanes * repeat
        elif node.kind == NodeKind.REDUCE_MUL and node.private:
            demand.scalar += (ops[0].lanes - 1) * repeat
        elif node.kind == NodeKind.LINEAR_LAYER and ops[0].private and ops[1].private:
            din, dout = node.dims
            for tile in plan_tiles(din, dout, slice_size).tiles:
                shape = (tile[1], din)
                demand.matrix[shape] = demand.matrix.get(shape, 0) + repeat
    demand.masks = sum(d.element_count for d in graph.inputs if d.private)
    return demand


# ===== CIRCUIT FILE =====

_HEADER = struct.Struct("<4sIQI")
_NO_ID = 0xFFFFFFFF


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def u8(self, v: int):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int):
        self.parts.append(struct.pack("<Q", v))

    def opt(self, v: Optional[int]):
        self.u32(_NO_ID if v is None else v)

    def ids(self, values: Iterable[int]):
        values = list(values)
        self.u32(len(values))
        self.parts.append(struct.pack(f"<{len(values)}I", *values))

    def text(self, s: Optional[str]):
        if s is None:
            self.u32(_NO_ID)
            return
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def _take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise errors.CorruptPayload("circuit file is truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def u8(self) -> int:
        return self._take("<B")[0]

    def u32(self) -> int:
        return self._take("<I")[0]

    def u64(self) -> int:
        return self._take("<Q")[0]

    def opt(self) -> Optional[int]:
        v = self.u32()
        return None if v == _NO_ID else v

    def ids(self) -> List[int]:
        count = self.u32()
        return list(self._take(f"<{count}I"))

    def text(self) -> Optional[str]:
        size = self.u32()
        if size == _NO_ID:
            return None
        if self.pos + size > len(self.data):
            raise errors.CorruptPayload("circuit file is truncated")
        raw = self.data[self.pos:self.pos + size]
        self.pos += size
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise errors.CorruptPayload("invalid UTF-8 in circuit file")


def serialize_circuit(graph: CircuitGraph) -> bytes:
    """Canonical little-endian binary encoding"""
    w = _Writer()
    w.parts.append(_HEADER.pack(CIRCUIT_MAGIC, CIRCUIT_VERSION, PRIME, len(graph.nodes)))
    w.text(graph.entry)
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        w.u32(n.id)
        w.u8(FINAL_KINDS.index(n.kind))
        w.u32(n.lanes)
        w.opt(n.block)
        w.u8(int(n.private) | int(n.bit) << 1 | int(n.pointer) << 2)
        w.opt(n.next)
        w.ids(n.operands)
        w.text(n.name)
        w.ids(n.value)
        w.u8(0 if n.predicate is None else ICMP_PREDICATES.index(n.predicate) + 1)
        w.ids([x for pair in n.incoming for x in pair])
        w.ids(n.successors)
        w.ids(n.dims or ())
    w.ids(graph.labels)
    w.u32(len(graph.loops))
    for info in graph.loops.values():
        w.u32(info.header)
        w.opt(info.parent)
        w.u32(info.depth)
        w.ids(info.members)
        w.ids(info.exits)
    w.u32(len(graph.inputs))
    for d in graph.inputs:
        w.text(d.name)
        w.u32(d.node)
        w.u8(int(d.private) | int(d.pointer) << 1 | int(d.dynamic) << 2)
        w.u64(d.element_count)
    w.opt(graph.root)
    return w.getvalue()


def deserialize_circuit(data: bytes) -> CircuitGraph:
    if len(data) < _HEADER.size:
        raise errors.CorruptPayload("circuit file is too short")
    magic, version, prime, count = _HEADER.unpack_from(data, 0)
    if magic != CIRCUIT_MAGIC:
        raise errors.VersionMismatch(f"not a circuit file (magic {magic!r})")
    if version != CIRCUIT_VERSION:
        raise errors.VersionMismatch(f"circuit format version {version}, expected {CIRCUIT_VERSION}")
    if prime != PRIME:
        raise errors.VersionMismatch(f"circuit built for prime {prime}, runtime uses {PRIME}")
    r = _Reader(data, _HEADER.size)
    graph = CircuitGraph(entry=r.text() or "")
    try:
        for _ in range(count):
            nid = r.u32()
            kind = FINAL_KINDS[r.u8()]
            lanes = r.u32()
            block = r.opt()
            flags = r.u8()
            nxt = r.opt()
            operands = r.ids()
            name = r.text()
            value = tuple(r.ids())
            pred_code = r.u8()
            flat = r.ids()
            successors = r.ids()
            dims = r.ids()
            graph.nodes[nid] = Node(
                id=nid, kind=kind, operands=operands, lanes=lanes, block=block, private=bool(flags & 1),
                next=nxt, name=name, value=value,
                predicate=None if pred_code == 0 else ICMP_PREDICATES[pred_code - 1],
                incoming=list(zip(flat[0::2], flat[1::2])), successors=successors,
                dims=tuple(dims) if dims else None, bit=bool(flags & 2), pointer=bool(flags & 4))
        graph.labels = r.ids()
        for _ in range(r.u32()):
            header = r.u32()
            parent = r.opt()
            depth = r.u32()
            members = tuple(r.ids())
            exits = tuple(r.ids())
            graph.loops[header] = LoopInfo(header=header, members=members, exits=exits, parent=parent, depth=depth)
        for _ in range(r.u32()):
            name = r.text()
            node = r.u32()
            flags = r.u8()
            graph.inputs.append(InputDescriptor(name=name, node=node, private=bool(flags & 1),
                                                pointer=bool(flags & 2), element_count=r.u64(),
                                                dynamic=bool(flags & 4)))
        graph.root = r.opt()
    except IndexError:
        raise errors.CorruptPayload("unknown node kind or predicate code")
    if r.pos != len(data):
        raise errors.CorruptPayload(f"{len(data) - r.pos} trailing byte(s) after circuit")

    for node in graph.nodes.values():
        if node.kind == NodeKind.CONST:
            graph.const_pool[node.value] = node.id
    for lid in graph.labels:
        chain, cursor = [], graph.nodes[lid].next if lid in graph.nodes else None
        while cursor is not None and len(chain) <= len(graph.nodes):
            chain.append(cursor)
            cursor = graph.nodes[cursor].next if cursor in graph.nodes else None
        graph.chains[lid] = chain
    graph._next_id = max(graph.nodes, default=-1) + 1
    _check_references(graph)
    return graph


def _check_references(graph: CircuitGraph):
    known = graph.nodes
    refs: List[int] = list(graph.labels) + [d.node for d in graph.inputs]
    if graph.root is not None:
        refs.append(graph.root)
    for node in known.values():
        refs.extend(node.operands)
        refs.extend(node.successors)
        refs.extend(x for pair in node.incoming for x in pair)
        refs.extend(x for x in (node.block, node.next) if x is not None)
    for info in graph.loops.values():
        refs.extend(info.members)
        refs.extend(info.exits)
    missing = sorted({r for r in refs if r not in known})
    if missing:
        raise errors.CorruptPayload(f"circuit references unknown node id(s) {missing[:5]}")


def save_circuit(graph: CircuitGraph, path: str, emit_json: bool = False):
    with open(path, "wb") as f:
        f.write(serialize_circuit(graph))
    if emit_json:
        with open(path + ".json", "w", encoding="utf-8") as f:
            f.write(circuit_to_json(graph))
    logger.info("wrote circuit %s (%d nodes)", path, len(graph.nodes))


def load_circuit(path: str) -> CircuitGraph:
    with open(path, "rb") as f:
        return deserialize_circuit(f.read())


def circuit_to_json(graph: CircuitGraph) -> str:
    """Human-readable mirror of the circuit file"""
    nodes = []
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        entry = {"id": n.id, "kind": n.kind.value, "lanes": n.lanes, "private": n.private}
        if n.name is not None:
            entry["name"] = n.name
        if n.block is not None:
            entry["block"] = n.block
        if n.next is not None:
            entry["next"] = n.next
        if n.operands:
            entry["operands"] = n.operands
        if n.value:
            entry["value"] = list(n.value)
        if n.predicate:
            entry["predicate"] = n.predicate
        if n.incoming:
            entry["incoming"] = [list(p) for p in n.incoming]
        if n.successors:
            entry["successors"] = n.successors
        if n.dims:
            entry["dims"] = list(n.dims)
        nodes.append(entry)
    doc = {
        "entry": graph.entry,
        "prime": PRIME,
        "root": graph.root,
        "labels": graph.labels,
        "loops": [{"header": i.header, "members": list(i.members), "exits": list(i.exits),
                   "parent": i.parent, "depth": i.depth} for i in graph.loops.values()],
        "inputs": [{"name": d.name, "node": d.node, "private": d.private, "pointer": d.pointer,
                    "element_count": d.element_count, "dynamic": d.dynamic} for d in graph.inputs],
        "nodes": nodes,
    }
    return json.dumps(doc, indent=2)
