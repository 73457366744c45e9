"""Cleartext reference interpreters over F_p

`interpret` walks a compiled circuit block by block; `interpret_ir` runs the raw
IR directly. Tests compare the MPC runtime against the first and the lowering
passes against the second.
"""
import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

import errors
import field as ff
from config import ORACLE_ITERATION_CAP
from graph_builder import CircuitGraph, InputDescriptor, Node, NodeKind
from ir_parser import IrFunction, IrValue, ValueKind

logger = logging.getLogger(__name__)

InputValues = Dict[str, Union[int, Sequence[int]]]


# ===== NODE EVALUATION =====

def compare(predicate: str, a: int, b: int) -> int:
    """icmp on field values read as signed integers"""
    x, y = ff.to_signed(a), ff.to_signed(b)
    result = {
        "eq": x == y, "ne": x != y, "slt": x < y, "sgt": x > y, "sle": x <= y, "sge": x >= y,
    }[predicate]
    return int(result)


def load_slice(node: Node, base: np.ndarray, start: int) -> np.ndarray:
    offset = ff.to_signed(start)
    if offset < 0 or offset + node.lanes > base.shape[0]:
        raise errors.LoadOutOfBounds(
            f"load %{node.name}: elements [{offset}, {offset + node.lanes}) of a {base.shape[0]}-element input")
    return base[offset:offset + node.lanes]


def linear_layer_clear(dims, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    din, dout = dims
    matrix = np.asarray(w[:din * dout], dtype=ff.DTYPE).reshape(dout, din)
    return ff.batch_add(ff.matvec_mod(matrix, x[:din]), b[:dout])


def evaluate_node(node: Node, args: List[np.ndarray]) -> np.ndarray:
    """Evaluate one compute node on cleartext operand arrays"""
    k = node.kind
    if k in (NodeKind.ADDER, NodeKind.ADD_BATCH):
        return ff.batch_add(args[0], args[1])
    if k in (NodeKind.SUBTRACT, NodeKind.SUB_BATCH):
        return ff.batch_sub(args[0], args[1])
    if k in (NodeKind.MULTIPLIER, NodeKind.MULT_BATCH):
        return ff.batch_mul(args[0], args[1])
    if k == NodeKind.REDUCE_ADD:
        return ff.as_batch([ff.batch_sum(args[0])])
    if k == NodeKind.REDUCE_MUL:
        return ff.as_batch([ff.batch_product(args[0])])
    if k == NodeKind.LOAD:
        return load_slice(node, args[0], int(args[1][0]))
    if k == NodeKind.LINEAR_LAYER:
        return linear_layer_clear(node.dims, *args)
    if k == NodeKind.COMPARE:
        return ff.as_batch([compare(node.predicate, int(args[0][0]), int(args[1][0]))])
    if k == NodeKind.ROOT:
        return args[0]
    if k == NodeKind.CONST:
        return ff.as_batch(node.value)
    raise errors.UnloweredInstruction(f"{node.label()} cannot be evaluated directly")


def bind_clear_input(desc: InputDescriptor, value: Union[int, Sequence[int]]) -> np.ndarray:
    arr = ff.as_batch([value] if isinstance(value, (int, np.integer)) else value)
    if not desc.accepts(arr.shape[0]):
        raise errors.ShapeMismatch(
            f"input '{desc.name}' has {arr.shape[0]} element(s), circuit expects {desc.element_count}")
    return arr


# ===== CIRCUIT INTERPRETER =====

def interpret(graph: CircuitGraph, inputs: InputValues, cap: int = ORACLE_ITERATION_CAP) -> List[int]:
    """Sequential CFG walk over a compiled circuit; returns the root's lanes"""
    values: Dict[int, np.ndarray] = {}
    for desc in graph.inputs:
        if desc.name not in inputs:
            raise errors.ShapeMismatch(f"missing input '{desc.name}'")
        values[desc.node] = bind_clear_input(desc, inputs[desc.name])
    for node in graph.nodes.values():
        if node.kind == NodeKind.CONST:
            values[node.id] = ff.as_batch(node.value)

    current, previous = graph.entry_label, None
    visits = 0
    while True:
        visits += 1
        if visits > cap:
            raise errors.NonTerminating(f"more than {cap} block visits")
        chain = [graph.nodes[n] for n in graph.chain(current)]
        # phis read their sources before any of them is written
        picked = {}
        for phi in (n for n in chain if n.kind == NodeKind.PHI):
            source = dict(phi.incoming).get(previous)
            if source is None:
                raise errors.UnknownPredecessor(
                    f"phi %{phi.name} has no value for predecessor {graph.label_name(previous) if previous is not None else None}")
            picked[phi.id] = values[source]
        values.update(picked)
        for node in chain:
            if node.kind == NodeKind.PHI:
                continue
            if node.kind == NodeKind.BRANCH:
                if node.operands:
                    taken = node.successors[0] if int(values[node.operands[0]][0]) != 0 else node.successors[1]
                else:
                    taken = node.successors[0]
                previous, current = current, taken
                break
            if node.kind == NodeKind.ROOT:
                result = values[node.operands[0]]
                logger.debug("oracle finished after %d block visit(s)", visits)
                return [int(v) for v in result]
            values[node.id] = evaluate_node(node, [values[o] for o in node.operands])


# ===== RAW IR INTERPRETER =====

class _Pointer:
    def __init__(self, buffer: str, offset: int = 0):
        self.buffer = buffer
        self.offset = offset


def interpret_ir(function: IrFunction, inputs: InputValues, cap: int = ORACLE_ITERATION_CAP) -> List[int]:
    """Reference semantics of the unlowered IR over F_p

    Bitwise operators act on the integer representatives, shl multiplies by 2^k
    and icmp compares signed readings; pointers are (buffer, offset) pairs.
    """
    memory: Dict[str, List[int]] = {}
    env: Dict[str, object] = {}
    for p in function.params:
        raw = inputs[p.name]
        if p.type.is_pointer:
            memory[p.name] = [ff.reduce(int(v)) for v in raw]
            env[p.name] = _Pointer(p.name)
        elif p.type.is_vector:
            env[p.name] = [ff.reduce(int(v)) for v in raw]
        else:
            env[p.name] = ff.reduce(int(raw if isinstance(raw, (int, np.integer)) else raw[0]))

    def val(v: IrValue):
        if v.kind == ValueKind.LOCAL:
            return env[v.name]
        if v.kind == ValueKind.CONST_VECTOR:
            return [ff.from_int(x) for x in v.values]
        if v.kind == ValueKind.CONST_INT:
            return None if v.type.is_pointer else ff.from_int(v.values[0])
        return None

    def lift(fn, a, b):
        if isinstance(a, list):
            return [fn(x, y) for x, y in zip(a, b)]
        return fn(a, b)

    binary = {
        "add": ff.add, "sub": ff.sub, "mul": ff.mul,
        "shl": lambda a, k: ff.mul(a, ff.pow_(2, k)),
        "and": lambda a, b: a & b, "or": lambda a, b: a | b, "xor": lambda a, b: a ^ b,
    }

    block = function.blocks[0]
    previous: Optional[str] = None
    visits = 0
    fresh = 0
    while True:
        visits += 1
        if visits > cap:
            raise errors.NonTerminating(f"more than {cap} block visits")
        picked = {}
        for inst in block.instructions:
            if inst.opcode != "phi":
                continue
            for v, label in inst.phi_pairs():
                if label == previous:
                    picked[inst.result] = val(v)
                    break
            else:
                raise errors.UnknownPredecessor(f"phi %{inst.result} has no value for predecessor {previous}")
        env.update(picked)

        next_label = None
        for inst in block.instructions:
            op = inst.opcode
            ops = inst.operands
            if op == "phi":
                continue
            if op in binary:
                env[inst.result] = lift(binary[op], val(ops[0]), val(ops[1]))
            elif op == "icmp":
                env[inst.result] = compare(inst.predicate, val(ops[0]), val(ops[1]))
            elif op == "select":
                env[inst.result] = val(ops[1]) if val(ops[0]) else val(ops[2])
            elif op == "zext":
                env[inst.result] = val(ops[0])
            elif op == "getelementptr":
                base = val(ops[0])
                env[inst.result] = _Pointer(base.buffer, base.offset + ff.to_signed(val(ops[1])))
            elif op == "load":
                ptr = val(ops[0])
                buf = memory[ptr.buffer]
                lanes = inst.type.lanes if inst.type.is_vector else 1
                if ptr.offset < 0 or ptr.offset + lanes > len(buf):
                    raise errors.LoadOutOfBounds(f"line {inst.line}: load outside '{ptr.buffer}'")
                chunk = buf[ptr.offset:ptr.offset + lanes]
                env[inst.result] = list(chunk) if inst.type.is_vector else chunk[0]
            elif op == "store":
                value, ptr = val(ops[0]), val(ops[1])
                items = value if isinstance(value, list) else [value]
                buf = memory[ptr.buffer]
                if len(buf) < ptr.offset + len(items):
                    buf.extend([0] * (ptr.offset + len(items) - len(buf)))
                buf[ptr.offset:ptr.offset + len(items)] = items
            elif op == "call":
                callee = inst.callee
                if callee.startswith("llvm.vector.reduce.add."):
                    env[inst.result] = sum(val(ops[0])) % ff.P
                elif callee.startswith("llvm.vector.reduce.mul."):
                    acc = 1
                    for x in val(ops[0]):
                        acc = ff.mul(acc, x)
                    env[inst.result] = acc
                elif callee == "mark_linear_layer":
                    x, w, b = (memory[val(o).buffer] for o in ops[:3])
                    dims = (val(ops[3]), val(ops[4]))
                    out = linear_layer_clear(dims, ff.as_batch(x), ff.as_batch(w), ff.as_batch(b))
                    name = f"@linear{fresh}"
                    fresh += 1
                    memory[name] = [int(v) for v in out]
                    env[inst.result] = _Pointer(name)
            elif op == "br":
                if len(ops) == 1:
                    next_label = ops[0].name
                else:
                    next_label = ops[1].name if val(ops[0]) else ops[2].name
                break
            elif op == "ret":
                result = val(ops[0])
                if isinstance(result, _Pointer):
                    return list(memory[result.buffer][result.offset:])
                return list(result) if isinstance(result, list) else [result]
        previous = block.label
        block = function.block(next_label)
