"""Setup-time loading of circuits, triple stores and inputs, and input sharing"""
import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

import errors
import field as ff
from config import INPUT_OWNER, INPUTS_MAGIC, INPUTS_VERSION, PRIME, SLICE_SIZE
from graph_builder import CircuitGraph, NodeKind, TripleDemand, count_triple_demand, load_circuit
from network import MsgType, PartySession, broadcast_from, bytes_to_lanes, exchange, lanes_to_bytes
from spdz import ShareBatch, TripleStore, add_public_const, load_store

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sII")
_WIRE = np.dtype("<u4")


@dataclass
class InputBundle:
    """Cleartext inputs by parameter name"""
    values: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Union[int, List[int]]]) -> "InputBundle":
        out = {}
        for name, v in mapping.items():
            out[name] = ff.as_batch([v] if isinstance(v, (int, np.integer)) else v)
        return cls(out)

    def lengths(self) -> Dict[str, int]:
        return {name: int(v.shape[0]) for name, v in self.values.items()}


@dataclass
class RunBundle:
    graph: CircuitGraph
    store: TripleStore
    inputs: Optional[InputBundle]
    setup_seconds: float = 0.0


# ===== INPUT FILES =====

def save_inputs(bundle: InputBundle, path: str):
    """Fixed-width binary input file plus a `<path>.json` shape sidecar"""
    parts = [_HEADER.pack(INPUTS_MAGIC, INPUTS_VERSION, len(bundle.values))]
    for name, values in bundle.values.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<Q", values.shape[0]))
        parts.append(np.asarray(values).astype(_WIRE).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump({"version": INPUTS_VERSION, "params": [{"name": n, "count": c} for n, c in bundle.lengths().items()]},
                  f, indent=2)


def load_inputs(path: str) -> InputBundle:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise errors.CorruptPayload(f"{path}: input file is truncated")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != INPUTS_MAGIC:
        raise errors.VersionMismatch(f"{path}: not an input file (magic {magic!r})")
    if version != INPUTS_VERSION:
        raise errors.VersionMismatch(f"{path}: input file version {version}, expected {INPUTS_VERSION}")
    pos = _HEADER.size
    bundle = InputBundle()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (elements,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + 4 * elements > len(data):
                raise errors.CorruptPayload(f"{path}: values of '{name}' are truncated")
            values = np.frombuffer(data, dtype=_WIRE, count=elements, offset=pos).astype(ff.DTYPE)
            pos += 4 * elements
            bundle.values[name] = values % np.uint64(PRIME)
    except struct.error:
        raise errors.CorruptPayload(f"{path}: input file is truncated")
    if pos != len(data):
        raise errors.CorruptPayload(f"{path}: {len(data) - pos} trailing byte(s)")
    return bundle


def inputs_from_json(path: str) -> InputBundle:
    """{name: int | [ints]} as written by hand"""
    with open(path, "r", encoding="utf-8") as f:
        return InputBundle.from_mapping(json.load(f))


def random_inputs(graph: CircuitGraph, rng: np.random.Generator) -> InputBundle:
    """Uniform values shaped to the circuit's descriptors (0/1 for bit parameters)"""
    bundle = InputBundle()
    bit_loads = {n.operands[0] for n in graph.nodes.values() if n.kind == NodeKind.LOAD and n.bit}
    for desc in graph.inputs:
        count = max(desc.element_count, 1)
        if graph.nodes[desc.node].bit or desc.node in bit_loads:
            bundle.values[desc.name] = rng.integers(0, 2, size=count, dtype=ff.DTYPE)
        else:
            bundle.values[desc.name] = ff.random_batch(rng, count)
    return bundle


# ===== VALIDATION =====

def check_input_shapes(graph: CircuitGraph, bundle: InputBundle):
    for desc in graph.inputs:
        if desc.name not in bundle.values:
            raise errors.ShapeMismatch(f"no value for input '{desc.name}'")
        length = bundle.values[desc.name].shape[0]
        if not desc.accepts(length):
            expected = f"at least {desc.element_count}" if desc.dynamic else str(desc.element_count)
            raise errors.ShapeMismatch(f"input '{desc.name}' has {length} element(s), expected {expected}")
    extra = set(bundle.values) - {d.name for d in graph.inputs}
    if extra:
        raise errors.ShapeMismatch(f"unknown input(s): {sorted(extra)}")


def triple_deficit(store: TripleStore, demand: TripleDemand) -> List[str]:
    """Human-readable shortfalls of store against demand"""
    left = store.remaining()
    missing = []
    if left["scalar"] < demand.scalar:
        missing.append(f"{demand.scalar - left['scalar']} scalar triple(s)")
    for shape, need in sorted(demand.matrix.items()):
        have = left["matrix"].get(shape, 0)
        if have < need:
            missing.append(f"{need - have} matrix triple(s) of shape {shape[0]}x{shape[1]}")
    if left["masks"] < demand.masks:
        missing.append(f"{demand.masks - left['masks']} input mask(s)")
    return missing


def check_triples(graph: CircuitGraph, store: TripleStore, slice_size: int = SLICE_SIZE, loop_trips: int = 1):
    missing = triple_deficit(store, count_triple_demand(graph, loop_trips, slice_size))
    if missing:
        raise errors.InsufficientTriples(f"party {store.party} is short of " + ", ".join(missing))


def load_run_bundle(circuit_path: str, triples_path: Optional[str], inputs_path: Optional[str] = None,
                    slice_size: int = SLICE_SIZE, loop_trips: int = 1) -> RunBundle:
    """Load and validate everything a party needs before the online phase"""
    started = time.perf_counter()
    graph = load_circuit(circuit_path)
    if not triples_path or not os.path.exists(triples_path):
        raise errors.InsufficientTriples(f"no triple store at '{triples_path}'")
    store = load_store(triples_path)
    check_triples(graph, store, slice_size, loop_trips)
    inputs = None
    if inputs_path:
        inputs = load_inputs(inputs_path)
        check_input_shapes(graph, inputs)
    elapsed = time.perf_counter() - started
    logger.info("setup for party %d loaded in %.3f s", store.party, elapsed)
    return RunBundle(graph, store, inputs, elapsed)


# ===== INPUT SHARING =====

def confirm_broadcasts(session: PartySession, received: List[np.ndarray]):
    """Every party echoes a digest of what the owner sent it; any difference aborts"""
    h = hashlib.sha256()
    for payload in received:
        h.update(struct.pack("<I", len(payload)))
        h.update(lanes_to_bytes(payload))
    digests = exchange(session, MsgType.CONTROL, session.next_batch_ids(1)[0], bytes_to_lanes(h.digest()))
    mine = lanes_to_bytes(digests[session.party])
    for peer in sorted(digests):
        if lanes_to_bytes(digests[peer]) != mine:
            raise errors.InputMismatch(f"party {peer} saw different input broadcasts than party {session.party}")


def share_inputs(graph: CircuitGraph, session: PartySession, bundle: Optional[InputBundle] = None,
                 owner: int = INPUT_OWNER) -> Dict[int, Union[np.ndarray, ShareBatch]]:
    """Bind every parameter to a value handle keyed by its Input node id

    The owner opens x - r for a preprocessed mask r; the others only hold shares
    of r. Public parameters are broadcast in the clear by the owner.
    """
    if not graph.inputs:
        return {}
    is_owner = session.party == owner
    if is_owner:
        if bundle is None:
            raise errors.ShapeMismatch(f"party {owner} owns the inputs but has none")
        check_input_shapes(graph, bundle)
        lengths = ff.as_batch([bundle.values[d.name].shape[0] for d in graph.inputs])
    else:
        lengths = None
    lengths = broadcast_from(session, owner, session.next_batch_ids(1)[0], lengths)
    received = [lengths]
    if lengths.shape[0] != len(graph.inputs):
        raise errors.ShapeMismatch(f"owner announced {lengths.shape[0]} input(s), circuit has {len(graph.inputs)}")

    bindings: Dict[int, Union[np.ndarray, ShareBatch]] = {}
    used_masks = 0
    for desc, length in zip(graph.inputs, (int(v) for v in lengths)):
        if not desc.accepts(length):
            raise errors.ShapeMismatch(f"input '{desc.name}' has {length} element(s), expected {desc.element_count}")
        clear = bundle.values[desc.name] if is_owner else None
        if not desc.private:
            bindings[desc.node] = broadcast_from(session, owner, session.next_batch_ids(1)[0], clear)
            received.append(bindings[desc.node])
            continue
        mask_shares, mask_clear = session.store.take_masks(length)
        used_masks += length
        diff = ff.batch_sub(clear, mask_clear) if is_owner else None
        diff = broadcast_from(session, owner, session.next_batch_ids(1)[0], diff)
        received.append(diff)
        bindings[desc.node] = add_public_const(mask_shares, diff, session.party, session.alpha_share)
    confirm_broadcasts(session, received)
    logger.info("party %d bound %d input(s) using %d mask(s)", session.party, len(bindings), used_masks)
    return bindings
