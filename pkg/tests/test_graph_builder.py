import json
import re
from collections import deque

import numpy as np
import pytest

import errors
from graph_builder import (
    FINAL_KINDS, NodeKind, circuit_to_json, count_triple_demand, deserialize_circuit, load_circuit, save_circuit,
    serialize_circuit,
)
from tests.helpers import compile_fixture, compile_text, random_branchy, random_straight_line

ARITH = re.compile(r"= (add|sub|mul) nsw")

ANNOTATE = '@.str.private = private unnamed_addr constant [8 x i8] c"private\\00", section "llvm.metadata"\n'


def private(name: str) -> str:
    return f"  call void @llvm.var.annotation.p0.p0(ptr %{name}, ptr @.str.private, ptr null, i32 0, ptr null)\n"


def kinds(graph):
    return graph.kind_counts()


def test_straight_line_nodes_and_privacy():
    g = compile_fixture("straight_line.ll")
    counts = kinds(g)
    assert counts["Load"] == 3
    assert counts["Multiplier"] == 2
    assert counts["Adder"] == 1
    assert counts["Subtract"] == 1
    assert counts["Root"] == 1
    assert all(n.kind in FINAL_KINDS for n in g.nodes.values())
    assert g.nodes[g.root].private
    assert g.input("x").element_count == 2
    assert g.input("y").element_count == 1
    assert not g.loops


def test_straight_line_demand():
    demand = count_triple_demand(compile_fixture("straight_line.ll"))
    assert demand.scalar == 2
    assert demand.masks == 3
    assert demand.tiles == 0


def test_public_branch_condition_becomes_compare():
    g = compile_fixture("diamond.ll")
    compares = [n for n in g.nodes.values() if n.kind == NodeKind.COMPARE]
    assert len(compares) == 1
    assert compares[0].predicate == "sgt"
    assert not compares[0].private
    assert [g.label_name(l) for l in g.labels] == ["entry", "then", "else", "join"]
    join = g.label_by_name("join")
    assert sorted(g.label_name(p) for p in g.predecessors(join)) == ["else", "then"]


def test_single_loop():
    g = compile_fixture("loop.ll")
    assert len(g.loops) == 1
    info = g.loops[g.label_by_name("header")]
    assert [g.label_name(m) for m in info.members] == ["header", "body"]
    assert [g.label_name(e) for e in info.exits] == ["exit"]
    assert info.depth == 1 and info.parent is None
    # sq = x0*x0 is the only private product; t = sq*i is by a public value
    assert count_triple_demand(g, loop_trips=10).scalar == 10


def test_nested_loops():
    g = compile_fixture("nested_loop.ll")
    outer = g.label_by_name("outer")
    inner = g.label_by_name("inner")
    assert set(g.loops) == {outer, inner}
    assert g.loops[inner].parent == outer
    assert g.loops[inner].depth == 2
    assert inner in g.loops[outer]
    assert g.enclosing_loops(inner) == [inner, outer]
    assert count_triple_demand(g, loop_trips=4).scalar == 16


def test_loop_after_loop_are_siblings():
    g = compile_fixture("loop_after_loop.ll")
    first, second = g.label_by_name("first"), g.label_by_name("second")
    assert set(g.loops) == {first, second}
    assert g.loops[first].parent is None and g.loops[second].parent is None
    assert second in g.loops[first].exits


def test_linear_layer_collapses_to_one_node():
    g = compile_fixture("linear_layer.ll")
    layers = [n for n in g.nodes.values() if n.kind == NodeKind.LINEAR_LAYER]
    assert len(layers) == 1
    assert layers[0].dims == (64, 32)
    assert layers[0].lanes == 32
    assert g.nodes[g.root].lanes == 32
    assert {d.name: d.element_count for d in g.inputs} == {"x": 64, "W": 64 * 32, "b": 32}
    demand = count_triple_demand(g)
    assert demand.matrix == {(32, 64): 1}
    assert demand.masks == 64 + 64 * 32


def test_linear_layer_tiles_follow_slice_size():
    g = compile_fixture("linear_layer.ll")
    # 640 weights per tile hold 10 rows of 64
    demand = count_triple_demand(g, slice_size=640)
    assert demand.matrix == {(10, 64): 3, (2, 64): 1}


def test_idioms_lower_to_arithmetic():
    g = compile_fixture("idioms.ll")
    counts = kinds(g)
    assert not any(k in counts for k in ("Select", "Shl", "Zext", "BitAnd", "BitOr", "BitXor", "ICmp"))
    assert counts["Multiplier"] >= 4


def test_secret_branch_compiles():
    g = compile_fixture("secret_branch.ll")
    branch = g.terminator(g.entry_label)
    assert branch.kind == NodeKind.BRANCH
    assert g.nodes[branch.operands[0]].private


def test_renumbering_is_deterministic():
    assert compile_fixture("nested_loop.ll") == compile_fixture("nested_loop.ll")


def test_circuit_file_round_trip(tmp_path):
    g = compile_fixture("nested_loop.ll")
    path = str(tmp_path / "nested.mpcg")
    save_circuit(g, path, emit_json=True)
    assert load_circuit(path) == g
    with open(path + ".json", encoding="utf-8") as f:
        doc = json.load(f)
    assert doc["entry"] == "nested_loop"
    assert len(doc["nodes"]) == len(g.nodes)
    assert json.loads(circuit_to_json(g)) == doc


def test_circuit_file_rejects_foreign_and_truncated_data(tmp_path):
    path = tmp_path / "bad.mpcg"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(errors.VersionMismatch):
        load_circuit(str(path))
    good = tmp_path / "good.mpcg"
    save_circuit(compile_fixture("loop.ll"), str(good))
    path.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(errors.FileFormatError):
        load_circuit(str(path))


def test_secret_comparison_is_rejected():
    text = ANNOTATE + "define i32 @f(ptr %x) {\nentry:\n" + private("x") + (
        "  %v = load i32, ptr %x\n"
        "  %c = icmp slt i32 %v, 3\n"
        "  %z = zext i1 %c to i32\n"
        "  ret i32 %z\n}\n")
    with pytest.raises(errors.SecretComparisonUnsupported):
        compile_text(text)


def test_wide_bitwise_is_rejected():
    text = ANNOTATE + "define i32 @f(ptr %x) {\nentry:\n" + private("x") + (
        "  %v = load i32, ptr %x\n"
        "  %a = and i32 %v, 255\n"
        "  ret i32 %a\n}\n")
    with pytest.raises(errors.WideBitwiseUnsupported):
        compile_text(text)


def test_private_index_is_rejected():
    text = ANNOTATE + "define i32 @f(ptr %x, ptr %idx) {\nentry:\n" + private("x") + private("idx") + (
        "  %i = load i32, ptr %idx\n"
        "  %p = getelementptr inbounds i32, ptr %x, i32 %i\n"
        "  %v = load i32, ptr %p\n"
        "  ret i32 %v\n}\n")
    with pytest.raises(errors.SecretIndexUnsupported):
        compile_text(text)


def test_pointer_phi_is_untraceable():
    text = ANNOTATE + "define i32 @f(ptr %x, i32 %k) {\nentry:\n" + private("x") + (
        "  %c = icmp sgt i32 %k, 0\n"
        "  br i1 %c, label %a, label %b\n"
        "a:\n"
        "  br label %b\n"
        "b:\n"
        "  %p = phi ptr [ %x, %entry ], [ %x, %a ]\n"
        "  %v = load i32, ptr %p\n"
        "  ret i32 %v\n}\n")
    with pytest.raises(errors.UntraceableBase):
        compile_text(text)


def test_linear_layer_dims_must_be_constant():
    text = ANNOTATE + "define ptr @f(ptr %x, ptr %W, ptr %b, i32 %n) {\nentry:\n" + private("x") + private("W") + (
        '  call void @llvm.var.annotation.p0.p0(ptr %b, ptr @.str.private, ptr null, i32 0, ptr null)\n'
        "  %y = call ptr @mark_linear_layer(ptr %x, ptr %W, ptr %b, i32 %n, i32 4)\n"
        "  ret ptr %y\n}\n")
    with pytest.raises(errors.NonConstantDims):
        compile_text(text)


def test_second_loop_entry_is_irreducible():
    text = (
        "define i32 @f(i32 %k) {\n"
        "entry:\n"
        "  %c = icmp sgt i32 %k, 0\n"
        "  br i1 %c, label %a, label %b\n"
        "a:\n"
        "  %d = icmp sgt i32 %k, 1\n"
        "  br i1 %d, label %b, label %out\n"
        "b:\n"
        "  %e = icmp sgt i32 %k, 2\n"
        "  br i1 %e, label %a, label %out\n"
        "out:\n"
        "  ret i32 %k\n}\n")
    with pytest.raises(errors.IrreducibleControlFlow):
        compile_text(text)


def test_dynamic_index_marks_input_dynamic():
    text = ANNOTATE + "define i32 @f(ptr %x, i32 %i) {\nentry:\n" + private("x") + (
        "  %p = getelementptr inbounds i32, ptr %x, i32 %i\n"
        "  %v = load i32, ptr %p\n"
        "  ret i32 %v\n}\n")
    g = compile_text(text)
    desc = g.input("x")
    assert desc.dynamic
    assert desc.accepts(5) and not desc.accepts(0)


@pytest.mark.parametrize("seed", range(50))
def test_random_straight_line_node_counts(seed):
    rng = np.random.default_rng(seed)
    text = random_straight_line(rng, int(rng.integers(1, 40)))
    ops = ARITH.findall(text)
    loads = text.count(" = load ")
    counts = compile_text(text).kind_counts()
    assert counts.get("Adder", 0) == ops.count("add")
    assert counts.get("Subtract", 0) == ops.count("sub")
    assert counts.get("Multiplier", 0) == ops.count("mul")
    assert counts["Load"] == loads
    assert counts["Root"] == 1
    inner = sum(v for k, v in counts.items() if k not in ("Input", "Const", "BlockLabel"))
    assert inner == len(ops) + loads + 1
    assert set(counts) <= {"Input", "Const", "BlockLabel", "Load", "Adder", "Subtract", "Multiplier", "Root"}


@pytest.mark.parametrize("seed", range(5))
def test_privacy_matches_reachability_from_private_inputs(seed):
    rng = np.random.default_rng(100 + seed)
    privacy = (True,) + tuple(bool(b) for b in rng.random(2) < 0.5)
    g = compile_text(random_straight_line(rng, 200, privacy=privacy, scalars=2, width=1))

    users = {nid: [] for nid in g.nodes}
    for node in g.nodes.values():
        for op in node.operands:
            users[op].append(node.id)
    reach = {d.node for d in g.inputs if d.private}
    queue = deque(reach)
    while queue:
        for user in users[queue.popleft()]:
            if user not in reach:
                reach.add(user)
                queue.append(user)

    checked = 0
    for node in g.nodes.values():
        if node.kind in (NodeKind.INPUT, NodeKind.CONST, NodeKind.BLOCK_LABEL):
            continue
        assert node.private == (node.id in reach), node.label()
        checked += 1
    assert checked >= 200


@pytest.mark.parametrize("seed", range(10))
def test_random_graphs_reserialize_byte_for_byte(seed):
    rng = np.random.default_rng(200 + seed)
    if seed % 2:
        text = random_branchy(rng, int(rng.integers(1, 4)))
    else:
        text = random_straight_line(rng, int(rng.integers(5, 60)))
    g = compile_text(text)
    first = serialize_circuit(g)
    back = deserialize_circuit(first)
    assert back == g
    assert serialize_circuit(back) == first
    assert serialize_circuit(deserialize_circuit(serialize_circuit(back))) == first
