"""Shared helpers for the test modules"""
import os

from dealer import fake_dealer
from graph_builder import compile_module, count_triple_demand
from ir_parser import parse_module

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fixtures")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


def read_fixture(name: str) -> str:
    with open(fixture_path(name), "r", encoding="utf-8") as f:
        return f.read()


def compile_fixture(name: str, entry=None):
    return compile_module(parse_module(read_fixture(name), filename=name), entry)


def compile_text(text: str, entry=None):
    return compile_module(parse_module(text), entry)


def deal_for(graph, n=2, seed=0, loop_trips=1, slice_size=262140):
    """Stores covering the circuit's static demand; returns (stores, alpha)"""
    return fake_dealer(n, count_triple_demand(graph, loop_trips, slice_size), seed)


def run_parties(fn, sessions, timeout=20.0):
    """fn(session) on one thread per party; results in party order, first exception re-raised"""
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=len(sessions)) as pool:
        futures = [pool.submit(fn, s) for s in sessions]
        return [f.result(timeout=timeout) for f in futures]


def run_parties_collect(fn, sessions, timeout=20.0):
    """Like run_parties but returns each party's result or exception"""
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=len(sessions)) as pool:
        futures = [pool.submit(fn, s) for s in sessions]
        out = []
        for f in futures:
            try:
                out.append(f.result(timeout=timeout))
            except Exception as e:
                out.append(e)
        return out


# ===== RANDOM PROGRAMS =====

ANNOTATIONS = (
    '@.str.private = private unnamed_addr constant [8 x i8] c"private\\00", section "llvm.metadata"\n'
    '@.str.public = private unnamed_addr constant [7 x i8] c"public\\00", section "llvm.metadata"\n'
)


class _Emitter:
    """Builds one IR function line by line with fresh value names"""

    def __init__(self, rng):
        self.rng = rng
        self.lines = []
        self.fresh = 0

    def emit(self, text: str):
        self.lines.append("  " + text)

    def label(self, name: str):
        self.lines.append(f"{name}:")

    def name(self) -> str:
        self.fresh += 1
        return f"%v{self.fresh}"

    def arith(self, values) -> str:
        """One random add/sub/mul over earlier values, sometimes with a constant right operand"""
        op = ("add", "sub", "mul")[int(self.rng.integers(3))]
        a = values[int(self.rng.integers(len(values)))]
        if self.rng.random() < 0.2:
            b = str(int(self.rng.integers(1, 50)))
        else:
            b = values[int(self.rng.integers(len(values)))]
        out = self.name()
        self.emit(f"{out} = {op} nsw i32 {a}, {b}")
        return out

    def loads(self, pointers, width):
        out = []
        for p in pointers:
            for e in range(width):
                if e == 0:
                    src = f"%{p}"
                else:
                    src = self.name()
                    self.emit(f"{src} = getelementptr inbounds i32, ptr %{p}, i32 {e}")
                value = self.name()
                self.emit(f"{value} = load i32, ptr {src}")
                out.append(value)
        return out


def _header(name, privacy, scalars):
    params = [f"ptr %p{i}" for i in range(len(privacy))] + [f"i32 %k{i}" for i in range(scalars)]
    head = [ANNOTATIONS, f"define i32 @{name}({', '.join(params)}) {{", "entry:"]
    for i, private in enumerate(privacy):
        tag = "private" if private else "public"
        head.append(f"  call void @llvm.var.annotation.p0.p0(ptr %p{i}, ptr @.str.{tag}, ptr null, i32 0, ptr null)")
    return head


def random_straight_line(rng, ops, privacy=(True, True), scalars=1, width=2):
    """Single-block function: width loads per pointer, then ops random arithmetic instructions"""
    em = _Emitter(rng)
    values = em.loads([f"p{i}" for i in range(len(privacy))], width) + [f"%k{i}" for i in range(scalars)]
    last = values[0]
    for _ in range(ops):
        last = em.arith(values)
        values.append(last)
    em.emit(f"ret i32 {last}")
    return "\n".join(_header("straight", privacy, scalars) + em.lines + ["}"]) + "\n"


def random_branchy(rng, diamonds):
    """Chained diamonds on public scalar conditions over a private pointer p0 of two elements"""
    em = _Emitter(rng)
    values = em.loads(["p0"], 2) + ["%k0", "%k1"]
    for d in range(diamonds):
        k = f"%k{int(rng.integers(2))}"
        pred = ("eq", "ne", "slt", "sgt", "sle", "sge")[int(rng.integers(6))]
        cond = em.name()
        em.emit(f"{cond} = icmp {pred} i32 {k}, {int(rng.integers(0, 6))}")
        em.emit(f"br i1 {cond}, label %then{d}, label %else{d}")
        arms = []
        for arm in ("then", "else"):
            em.label(f"{arm}{d}")
            local = list(values)
            for _ in range(int(rng.integers(1, 4))):
                local.append(em.arith(local))
            arms.append(local[-1])
            em.emit(f"br label %join{d}")
        em.label(f"join{d}")
        merged = em.name()
        em.emit(f"{merged} = phi i32 [ {arms[0]}, %then{d} ], [ {arms[1]}, %else{d} ]")
        values.append(merged)
        values.append(em.arith(values))
    em.emit(f"ret i32 {values[-1]}")
    return "\n".join(_header("branchy", (True,), 2) + em.lines + ["}"]) + "\n"
