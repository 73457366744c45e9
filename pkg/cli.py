"""Command line front end: compile, preprocess, run, bench and inspect circuits"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

import errors
from config import INPUT_OWNER, IO_TIMEOUT, LOG_LEVEL, SLICE_SIZE, read_endpoints
from dealer import BANNER, deal_for_circuit, fake_dealer, store_path
from graph_builder import CircuitGraph, NodeKind, compile_module, count_triple_demand, load_circuit, save_circuit
from ir_parser import parse_module
from network import PartyConfig, connect_mesh
from oracle import interpret
from preprocessing_io import (
    InputBundle, check_input_shapes, inputs_from_json, load_inputs, load_run_bundle, random_inputs, save_inputs,
    share_inputs,
)
from runtime import run_local, run_party
from scheduler import TraceRecorder, classify_loop_inputs

logger = logging.getLogger(__name__)

BENCH_COLUMNS = [
    "din", "dout", "parties", "threads", "slice", "tiles", "front_end_ms", "setup_ms", "online_ms", "total_ms",
    "bytes_sent", "bytes_received", "scalar_triples", "matrix_triples", "output_digest",
]


# ===== REPORT =====

@dataclass
class RunReport:
    front_end_ms: float
    setup_ms: float
    online_ms: float
    workers: int
    slice_size: int
    parties: int
    outputs: List[int]
    output_digest: str
    triples_consumed: Dict[str, int]
    bytes_sent: Dict[int, int] = field(default_factory=dict)
    bytes_received: Dict[int, int] = field(default_factory=dict)

    @property
    def total_ms(self) -> float:
        return self.front_end_ms + self.setup_ms + self.online_ms

    def format(self) -> str:
        lines = [
            f"front end : {self.front_end_ms:10.2f} ms",
            f"setup     : {self.setup_ms:10.2f} ms",
            f"online    : {self.online_ms:10.2f} ms",
            f"total     : {self.total_ms:10.2f} ms",
            f"workers {self.workers}, slice {self.slice_size}, parties {self.parties}",
            f"triples consumed: {self.triples_consumed}",
        ]
        for peer in sorted(set(self.bytes_sent) | set(self.bytes_received)):
            lines.append(f"peer {peer}: sent {self.bytes_sent.get(peer, 0)} B, "
                         f"received {self.bytes_received.get(peer, 0)} B")
        lines.append(f"output digest: {self.output_digest}")
        return "\n".join(lines)


class StageClock:
    """Back-to-back stage boundaries; the stages always add up to the elapsed total"""

    def __init__(self):
        self.marks = [time.perf_counter()]

    def lap(self) -> float:
        self.marks.append(time.perf_counter())
        return (self.marks[-1] - self.marks[-2]) * 1000.0


# ===== HELPERS =====

def compile_source(path: str, entry: Optional[str] = None) -> CircuitGraph:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return compile_module(parse_module(text, filename=path), entry)


def load_any(path: str, entry: Optional[str] = None) -> CircuitGraph:
    """A .ll source is compiled on the fly, anything else is read as a circuit file"""
    if path.endswith(".ll"):
        return compile_source(path, entry)
    return load_circuit(path)


def linear_layer_ir(din: int, dout: int, x_private: bool = True, w_private: bool = True,
                    b_private: bool = False, name: str = "layer") -> str:
    """Source of an entry point that is a single annotated y = W·x + b"""
    tags = {"x": x_private, "W": w_private, "b": b_private}
    ann = "\n".join(
        f"  call void @llvm.var.annotation.p0.p0(ptr %{p}, ptr @.str.{'private' if priv else 'public'}, "
        f"ptr null, i32 0, ptr null)"
        for p, priv in tags.items())
    return (
        '@.str.private = private unnamed_addr constant [8 x i8] c"private\\00", section "llvm.metadata"\n'
        '@.str.public = private unnamed_addr constant [7 x i8] c"public\\00", section "llvm.metadata"\n'
        "\n"
        f"define ptr @{name}(ptr %x, ptr %W, ptr %b) {{\n"
        "entry:\n"
        f"{ann}\n"
        f"  %y = call ptr @mark_linear_layer(ptr %x, ptr %W, ptr %b, i32 {din}, i32 {dout})\n"
        "  ret ptr %y\n"
        "}\n"
    )


def _read_inputs(args) -> Optional[InputBundle]:
    if getattr(args, "inputs", None):
        return load_inputs(args.inputs)
    return None


# ===== COMMANDS =====

def cmd_compile(args) -> int:
    graph = compile_source(args.source, args.entry)
    out = args.out or os.path.splitext(args.source)[0] + ".mpcg"
    save_circuit(graph, out, emit_json=args.emit_json)
    print(f"{out}: {len(graph.nodes)} node(s), {len(graph.labels)} block(s), {len(graph.loops)} loop(s)")
    return 0


def cmd_preprocess(args) -> int:
    print(BANNER, file=sys.stderr)
    graph = load_any(args.circuit, args.entry)
    for path in deal_for_circuit(graph, args.parties, args.out_dir, args.slice, args.loop_trips, args.spare,
                                 args.seed, args.owner):
        print(path)

    bundle = None
    if args.inputs_json:
        bundle = inputs_from_json(args.inputs_json)
    elif args.random_inputs:
        bundle = random_inputs(graph, np.random.default_rng(args.seed + 1))
    if bundle is not None:
        check_input_shapes(graph, bundle)
        path = os.path.join(args.out_dir, "inputs.mpci")
        save_inputs(bundle, path)
        print(path)
    return 0


def _run_local(args, clock: StageClock) -> RunReport:
    graph = load_any(args.circuit, args.entry)
    front_end = clock.lap()
    n = args.local
    circuit = _cache(graph, args) if args.circuit.endswith(".ll") else args.circuit
    triples_dir = args.triples_dir or os.path.dirname(os.path.abspath(args.circuit))
    bundles = [load_run_bundle(circuit, store_path(triples_dir, i), None, args.slice, args.loop_trips)
               for i in range(n)]
    inputs = _read_inputs(args)
    if inputs is not None:
        check_input_shapes(graph, inputs)
    setup = clock.lap()
    results = run_local(graph, [b.store for b in bundles], inputs, workers=args.threads, transport=args.transport,
                        trace=bool(args.trace), slice_size=args.slice, io_timeout=args.io_timeout, owner=args.owner)
    online = clock.lap()
    digests = {r.digest for r in results}
    if len(digests) != 1:
        raise errors.MacCheckFailed(f"parties disagree on the output ({len(digests)} distinct digests)")
    if args.trace:
        for r in results:
            r.trace.dump(f"{args.trace}.party{r.party}")
    first = results[0]
    return RunReport(front_end, setup, online, args.threads, args.slice, n, first.outputs, first.digest,
                     first.consumed, first.traffic["bytes_sent"], first.traffic["bytes_received"])


def _cache(graph: CircuitGraph, args) -> str:
    """Compiled copy of a .ll source next to it, so setup loads a circuit file"""
    path = os.path.splitext(args.circuit)[0] + ".mpcg"
    save_circuit(graph, path)
    return path


def _run_party(args, clock: StageClock) -> RunReport:
    graph = load_any(args.circuit, args.entry)
    front_end = clock.lap()
    circuit = _cache(graph, args) if args.circuit.endswith(".ll") else args.circuit
    bundle = load_run_bundle(circuit, args.triples, args.inputs, args.slice, args.loop_trips)
    endpoints = read_endpoints(args.config)
    config = PartyConfig(args.party, len(endpoints), endpoints, io_timeout=args.io_timeout)
    setup = clock.lap()

    session = connect_mesh(config, bundle.store.alpha_share, bundle.store)
    try:
        trace = TraceRecorder(args.trace) if args.trace else None
        bindings = share_inputs(bundle.graph, session, bundle.inputs, args.owner)
        result = run_party(bundle.graph, session, bindings, args.threads, trace, slice_size=args.slice)
    finally:
        session.close()
    online = clock.lap()
    if trace is not None:
        trace.dump()
    return RunReport(front_end, setup, online, args.threads, args.slice, config.n, result.outputs, result.digest,
                     result.consumed, result.traffic["bytes_sent"], result.traffic["bytes_received"])


def cmd_run(args) -> int:
    clock = StageClock()
    if args.local:
        report = _run_local(args, clock)
    else:
        if args.party is None or not args.config:
            raise ValueError("either --local N or both --party and --config are required")
        report = _run_party(args, clock)
    print("outputs: " + " ".join(str(v) for v in report.outputs))
    print(report.format())
    if args.report_json:
        with open(args.report_json, "w", encoding="utf-8") as f:
            json.dump(asdict(report), f, indent=2)
    return 0


def bench_cells(args) -> List[Dict[str, int]]:
    if args.matrix:
        with open(args.matrix, "r", encoding="utf-8") as f:
            return [dict(cell) for cell in json.load(f)]
    cells = []
    for din, dout in zip(args.din, args.dout or args.din):
        for parties in args.parties:
            for threads in args.threads:
                for slice_size in args.slices:
                    cells.append({"din": din, "dout": dout, "parties": parties, "threads": threads,
                                  "slice": slice_size})
    return cells


def bench_cell(cell: Dict[str, int], seed: int = 0, io_timeout: float = IO_TIMEOUT) -> Dict[str, object]:
    """One linear-layer run over the simulated network, timed stage by stage"""
    din, dout = int(cell["din"]), int(cell["dout"])
    parties, threads = int(cell.get("parties", 2)), int(cell.get("threads", 1))
    slice_size = int(cell.get("slice", SLICE_SIZE))
    clock = StageClock()
    graph = compile_module(parse_module(linear_layer_ir(din, dout)))
    front_end = clock.lap()
    demand = count_triple_demand(graph, 1, slice_size)
    stores, _ = fake_dealer(parties, demand, seed)
    inputs = random_inputs(graph, np.random.default_rng(seed + 1))
    setup = clock.lap()
    results = run_local(graph, stores, inputs, workers=threads, slice_size=slice_size, io_timeout=io_timeout)
    online = clock.lap()
    first = results[0]
    return {
        "din": din, "dout": dout, "parties": parties, "threads": threads, "slice": slice_size,
        "tiles": demand.tiles, "front_end_ms": front_end, "setup_ms": setup, "online_ms": online,
        "total_ms": front_end + setup + online,
        "bytes_sent": sum(first.traffic["bytes_sent"].values()),
        "bytes_received": sum(first.traffic["bytes_received"].values()),
        "scalar_triples": first.consumed["scalar"], "matrix_triples": first.consumed["tiles"],
        "output_digest": first.digest,
    }


def run_bench(cells: List[Dict[str, int]], seed: int = 0) -> pd.DataFrame:
    rows = []
    for cell in cells:
        logger.info("bench cell %s", cell)
        rows.append(bench_cell(cell, seed))
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def cmd_bench(args) -> int:
    df = run_bench(bench_cells(args), args.seed)
    df.to_csv(args.out, index=False)
    print(f"{args.out}: {len(df)} row(s)")
    return 0


def describe_circuit(graph: CircuitGraph) -> str:
    """Node counts by kind, privacy histogram, loop table and inputs"""
    lines = [f"entry @{graph.entry}: {len(graph.nodes)} node(s), {len(graph.labels)} block(s)"]
    kinds = pd.Series([n.kind.value for n in graph.nodes.values()]).value_counts().sort_index()
    lines.append("nodes by kind:")
    lines.extend(f"  {kind:<12} {count}" for kind, count in kinds.items())

    privacy = pd.Series(["private" if n.private else "public" for n in graph.nodes.values()
                         if n.is_compute or n.kind == NodeKind.INPUT]).value_counts()
    lines.append("privacy: " + ", ".join(f"{k} {v}" for k, v in sorted(privacy.items())))

    lines.append("loops:" if graph.loops else "loops: none")
    kinds_by_node = classify_loop_inputs(graph)
    for header, info in graph.loops.items():
        members = [graph.label_name(m) for m in info.members]
        exits = [graph.label_name(e) for e in info.exits]
        iterative = sum(k.count("iterative") for nid, k in kinds_by_node.items()
                        if graph.nodes[nid].block in info)
        lines.append(f"  {graph.label_name(header)} depth {info.depth}: members {members}, exits {exits}, "
                     f"{iterative} iterative operand(s)")
    lines.append("inputs:")
    for d in graph.inputs:
        size = f">= {d.element_count}" if d.dynamic else str(d.element_count)
        lines.append(f"  %{d.name:<10} {'private' if d.private else 'public':<8} "
                     f"{'ptr' if d.pointer else 'value':<6} {size}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    graph = load_any(args.circuit, args.entry)
    print(describe_circuit(graph))
    if args.eval:
        with open(args.eval, "r", encoding="utf-8") as f:
            values = json.load(f)
        print("oracle: " + " ".join(str(v) for v in interpret(graph, values)))
    return 0


# ===== COMMAND LINE INTERFACE =====

def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Compile and run circuits under the SPDZ online phase")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="Compile an IR entry point into a circuit file")
    p.add_argument("source", help="Textual IR (.ll)")
    p.add_argument("--entry", help="Entry function name (default: the only function)")
    p.add_argument("--out", help="Circuit path (default: source with .mpcg)")
    p.add_argument("--emit-json", action="store_true", help="Also write <out>.json")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("preprocess", help="Deal triple stores with the insecure fake dealer")
    p.add_argument("circuit", help="Circuit file or .ll source")
    p.add_argument("--entry")
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--slice", type=int, default=SLICE_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loop-trips", type=int, default=1)
    p.add_argument("--spare", type=int, default=0)
    p.add_argument("--owner", type=int, default=INPUT_OWNER)
    p.add_argument("--out-dir", default=".")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--inputs-json", help="Write inputs.mpci from a {name: values} JSON file")
    group.add_argument("--random-inputs", action="store_true", help="Write random inputs.mpci")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("run", help="Run the online phase")
    p.add_argument("circuit", help="Circuit file or .ll source")
    p.add_argument("--entry")
    p.add_argument("--local", type=int, default=0, help="Run N parties in this process")
    p.add_argument("--transport", choices=["sim", "socket"], default="sim")
    p.add_argument("--party", type=int)
    p.add_argument("--config", help="Endpoints file: one 'index host:port' per line")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--slice", type=int, default=SLICE_SIZE)
    p.add_argument("--loop-trips", type=int, default=1)
    p.add_argument("--triples", help="This party's triple store")
    p.add_argument("--triples-dir", help="Directory of partyN.triples for --local")
    p.add_argument("--inputs", help="Input file (input owner only)")
    p.add_argument("--owner", type=int, default=INPUT_OWNER)
    p.add_argument("--io-timeout", type=float, default=IO_TIMEOUT)
    p.add_argument("--trace", help="Write an NDJSON scheduler trace to this path")
    p.add_argument("--report-json", help="Also write the run report as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="Sweep linear-layer runs and write a CSV")
    p.add_argument("--matrix", help="JSON list of {din, dout, parties, threads, slice} cells")
    p.add_argument("--din", type=_ints, default=[])
    p.add_argument("--dout", type=_ints, default=[])
    p.add_argument("--parties", type=_ints, default=[2])
    p.add_argument("--threads", type=_ints, default=[1])
    p.add_argument("--slices", type=_ints, default=[SLICE_SIZE])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="Print a circuit summary")
    p.add_argument("circuit", help="Circuit file or .ll source")
    p.add_argument("--entry")
    p.add_argument("--eval", help="JSON inputs to run through the cleartext interpreter")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    """Main entry point for command line usage"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except errors.MpcError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

# Usage examples:
# python cli.py compile fixtures/linear_layer.ll --emit-json
# python cli.py preprocess fixtures/linear_layer.mpcg --parties 2 --random-inputs --out-dir run
# python cli.py run fixtures/linear_layer.mpcg --local 2 --triples-dir run --inputs run/inputs.mpci
# python cli.py bench --din 64,1024 --dout 32,1024 --threads 1,8 --out bench.csv
