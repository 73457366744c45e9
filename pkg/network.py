"""Party-to-party transport: framed messages over sockets or in-memory queues

Every frame carries a 16-byte header (message type, lane count, batch id)
followed by lane-count little-endian u32 field elements. Incoming frames land
in a Mailbox keyed by (sender, type, batch id), so concurrent openings are
matched by id regardless of arrival order.
"""
import logging
import socket
import struct
import threading
import time
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

import errors
import field as ff
from config import CONNECT_TIMEOUT, FRAME_HEADER_SIZE, IO_TIMEOUT

logger = logging.getLogger(__name__)


# ===== FRAMES =====

class MsgType(IntEnum):
    OPEN_SHARES = 1
    COMMIT = 2
    REVEAL = 3
    NONCE = 4
    CONTROL = 5


HEADER = struct.Struct("<B3xIQ")
assert HEADER.size == FRAME_HEADER_SIZE

_WIRE = np.dtype("<u4")


@dataclass
class Frame:
    msg_type: MsgType
    batch_id: int
    payload: np.ndarray

    @property
    def lane_count(self) -> int:
        return int(self.payload.shape[0])


MAX_BATCH_ID = (1 << 64) - 1


class BatchIdSequence:
    """Strictly increasing batch ids

    Every party draws from its own sequence in the same logical order (input
    sharing, then block entries in chain order), so equal ids name the same
    operation on every party.
    """

    def __init__(self, start: int = 1):
        self._next = start
        self._lock = threading.Lock()

    def take(self, count: int = 1) -> List[int]:
        if count < 0:
            raise ValueError(f"cannot take {count} batch id(s)")
        with self._lock:
            first = self._next
            if first + count - 1 > MAX_BATCH_ID:
                raise errors.BatchIdExhausted(f"{count} more batch id(s) would pass {MAX_BATCH_ID:#x}")
            self._next = first + count
        return list(range(first, first + count))

    def take_one(self) -> int:
        return self.take(1)[0]

    @property
    def issued(self) -> int:
        with self._lock:
            return self._next - 1


def encode_frame(frame: Frame) -> bytes:
    payload = np.asarray(frame.payload).astype(_WIRE, copy=False)
    return HEADER.pack(int(frame.msg_type), payload.shape[0], frame.batch_id) + payload.tobytes()


def decode_header(data: bytes) -> Tuple[MsgType, int, int]:
    """(msg-type, lane-count, batch-id) of a 16-byte header"""
    if len(data) != HEADER.size:
        raise errors.MalformedShareMessage(f"frame header has {len(data)} bytes")
    code, lanes, batch_id = HEADER.unpack(data)
    try:
        return MsgType(code), lanes, batch_id
    except ValueError:
        raise errors.MalformedShareMessage(f"unknown message type {code}")


def decode_frame(data: bytes) -> Frame:
    msg_type, lanes, batch_id = decode_header(data[:HEADER.size])
    body = data[HEADER.size:]
    if len(body) != lanes * 4:
        raise errors.MalformedShareMessage(f"frame announces {lanes} lanes but carries {len(body)} bytes")
    payload = np.frombuffer(body, dtype=_WIRE).astype(ff.DTYPE)
    return Frame(msg_type, batch_id, payload)


def bytes_to_lanes(raw: bytes) -> np.ndarray:
    """Pack opaque bytes (digests, salts, nonces) into u32 lanes"""
    return np.frombuffer(raw, dtype=_WIRE).astype(ff.DTYPE)


def lanes_to_bytes(lanes: np.ndarray) -> bytes:
    return np.asarray(lanes).astype(_WIRE).tobytes()


# ===== MAILBOX =====

class Mailbox:
    """Frames received by one party, matched to waiters by (peer, type, batch id)"""

    def __init__(self):
        self._lock = threading.Lock()
        self._frames: Dict[Tuple[int, MsgType, int], Frame] = {}
        self._waiters: Dict[Tuple[int, MsgType, int], Future] = {}
        self._failure: Optional[Exception] = None

    def deposit(self, peer: int, frame: Frame):
        key = (peer, frame.msg_type, frame.batch_id)
        with self._lock:
            waiter = self._waiters.pop(key, None)
            duplicate = waiter is None and key in self._frames
            if waiter is None and not duplicate:
                self._frames[key] = frame
                return
        if duplicate:
            self.fail(errors.MalformedShareMessage(
                f"party {peer} sent batch {frame.batch_id:#x} of type {frame.msg_type.name} twice"))
            return
        waiter.set_result(frame)

    def expect(self, peer: int, msg_type: MsgType, batch_id: int) -> Future:
        """Future resolved with the matching frame"""
        key = (peer, msg_type, batch_id)
        with self._lock:
            if self._failure is not None:
                fut = Future()
                fut.set_exception(self._failure)
                return fut
            frame = self._frames.pop(key, None)
            if frame is None:
                fut = self._waiters.get(key)
                if fut is None:
                    fut = Future()
                    self._waiters[key] = fut
                return fut
        fut = Future()
        fut.set_result(frame)
        return fut

    def fail(self, exc: Exception):
        """Wake every waiter with exc; later expectations fail immediately"""
        with self._lock:
            if self._failure is None:
                self._failure = exc
            waiters = list(self._waiters.values())
            self._waiters.clear()
        for fut in waiters:
            if not fut.done():
                fut.set_exception(exc)


# ===== COUNTERS =====

class TrafficCounters:
    """Exact per-peer byte and frame counts"""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_sent: Dict[int, int] = {}
        self.bytes_received: Dict[int, int] = {}
        self.frames_sent: Dict[int, int] = {}

    def sent(self, peer: int, size: int):
        with self._lock:
            self.bytes_sent[peer] = self.bytes_sent.get(peer, 0) + size
            self.frames_sent[peer] = self.frames_sent.get(peer, 0) + 1

    def received(self, peer: int, size: int):
        with self._lock:
            self.bytes_received[peer] = self.bytes_received.get(peer, 0) + size

    def total_sent(self) -> int:
        with self._lock:
            return sum(self.bytes_sent.values())

    def snapshot(self) -> Dict[str, Dict[int, int]]:
        with self._lock:
            return {"bytes_sent": dict(self.bytes_sent), "bytes_received": dict(self.bytes_received),
                    "frames_sent": dict(self.frames_sent)}


# ===== SOCKET TRANSPORT =====

@dataclass
class PartyConfig:
    party: int
    n: int
    endpoints: Dict[int, Tuple[str, int]]
    connect_timeout: float = CONNECT_TIMEOUT
    io_timeout: float = IO_TIMEOUT

    def __post_init__(self):
        if sorted(self.endpoints) != list(range(self.n)):
            raise ValueError(f"endpoints must list parties 0..{self.n - 1}, got {sorted(self.endpoints)}")
        if not 0 <= self.party < self.n:
            raise ValueError(f"party index {self.party} outside 0..{self.n - 1}")


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    while size:
        chunk = sock.recv(min(size, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed")
        chunks.append(chunk)
        size -= len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> Tuple[Frame, int]:
    head = _recv_exact(sock, HEADER.size)
    msg_type, lanes, batch_id = decode_header(head)
    body = _recv_exact(sock, lanes * 4)
    return decode_frame(head + body), HEADER.size + len(body)


class SocketTransport:
    """One TCP stream per peer; a reader thread per stream feeds the mailbox"""

    def __init__(self, party: int, sockets: Dict[int, socket.socket], mailbox: Mailbox, counters: TrafficCounters):
        self.party = party
        self.sockets = sockets
        self.mailbox = mailbox
        self.counters = counters
        self._send_locks = {peer: threading.Lock() for peer in sockets}
        self._closing = False
        self._readers: List[threading.Thread] = []

    def start(self):
        for peer, sock in self.sockets.items():
            t = threading.Thread(target=self._read_loop, args=(peer, sock), name=f"reader-{self.party}-{peer}",
                                 daemon=True)
            t.start()
            self._readers.append(t)

    def _read_loop(self, peer: int, sock: socket.socket):
        try:
            while True:
                frame, size = _read_frame(sock)
                self.counters.received(peer, size)
                self.mailbox.deposit(peer, frame)
        except (OSError, ConnectionError, errors.MalformedShareMessage) as e:
            if not self._closing:
                logger.warning("party %d: link to party %d failed: %s", self.party, peer, e)
                exc = e if isinstance(e, errors.MalformedShareMessage) else errors.PeerTimeout(
                    f"party {peer} disconnected: {e}")
                self.mailbox.fail(exc)

    def send(self, peer: int, frame: Frame):
        data = encode_frame(frame)
        with self._send_locks[peer]:
            self.sockets[peer].sendall(data)
        self.counters.sent(peer, len(data))

    def close(self):
        self._closing = True
        for sock in self.sockets.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def _dial(peer: int, endpoint: Tuple[str, int], deadline: float) -> socket.socket:
    while True:
        try:
            return socket.create_connection(endpoint, timeout=max(0.1, deadline - time.monotonic()))
        except OSError:
            if time.monotonic() >= deadline:
                raise errors.ConnectTimeout(peer, f"{endpoint[0]}:{endpoint[1]}")
            time.sleep(0.05)


def connect_mesh(config: PartyConfig, alpha_share: int = 0, store=None) -> "PartySession":
    """Full pairwise mesh: listen for higher indices, dial lower ones"""
    deadline = time.monotonic() + config.connect_timeout
    me = config.party
    sockets: Dict[int, socket.socket] = {}
    counters = TrafficCounters()

    listener = None
    expected = set(range(me + 1, config.n))
    if expected:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(config.endpoints[me])
        listener.listen(config.n)

    try:
        for peer in range(me):
            sock = _dial(peer, config.endpoints[peer], deadline)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = encode_frame(Frame(MsgType.CONTROL, 0, ff.as_batch([me])))
            sock.sendall(hello)
            counters.sent(peer, len(hello))
            sockets[peer] = sock

        while expected:
            listener.settimeout(max(0.05, deadline - time.monotonic()))
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                missing = min(expected)
                host, port = config.endpoints[missing]
                raise errors.ConnectTimeout(missing, f"{host}:{port}")
            sock.settimeout(max(0.05, deadline - time.monotonic()))
            frame, size = _read_frame(sock)
            claimed = int(frame.payload[0]) if frame.msg_type == MsgType.CONTROL and frame.lane_count == 1 else -1
            if claimed not in expected:
                sock.close()
                if claimed in sockets:
                    raise errors.IndexCollision(f"two peers claim party index {claimed}")
                raise errors.IndexCollision(f"unexpected handshake from index {claimed}")
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            counters.received(claimed, size)
            sockets[claimed] = sock
            expected.discard(claimed)
    except Exception:
        for sock in sockets.values():
            sock.close()
        raise
    finally:
        if listener is not None:
            listener.close()

    for sock in sockets.values():
        sock.settimeout(None)
    mailbox = Mailbox()
    transport = SocketTransport(me, sockets, mailbox, counters)
    transport.start()
    logger.info("party %d connected to %d peer(s)", me, len(sockets))
    return PartySession(me, config.n, transport, mailbox, counters, alpha_share=alpha_share, store=store,
                        io_timeout=config.io_timeout)


# ===== SIMULATED TRANSPORT =====

@dataclass
class Fault:
    kind: str
    sender: int
    receiver: int
    msg_type: MsgType
    batch_id: Optional[int] = None
    seconds: float = 0.0
    hold: int = 1
    nth: int = 0
    lane: int = 0
    bit: int = 0


class FaultPlan:
    """Scripted delays, reorderings and bit flips for the simulated network"""

    def __init__(self):
        self.faults: List[Fault] = []
        self._seen: Dict[Tuple[int, int, MsgType], int] = {}
        self._lock = threading.Lock()
        self.applied: List[Fault] = []

    def delay(self, sender: int, receiver: int, msg_type: MsgType, batch_id: Optional[int] = None,
              seconds: float = 0.05) -> "FaultPlan":
        self.faults.append(Fault("delay", sender, receiver, msg_type, batch_id=batch_id, seconds=seconds))
        return self

    def reorder(self, sender: int, receiver: int, msg_type: MsgType, hold_batches: int = 1) -> "FaultPlan":
        """Hold the next frame of the stream until hold_batches later frames went through"""
        self.faults.append(Fault("reorder", sender, receiver, msg_type, hold=hold_batches))
        return self

    def bit_flip(self, sender: int, receiver: int, msg_type: MsgType, nth: int = 0, lane: int = 0,
                 bit: int = 0) -> "FaultPlan":
        self.faults.append(Fault("bit_flip", sender, receiver, msg_type, nth=nth, lane=lane, bit=bit))
        return self

    def match(self, sender: int, receiver: int, frame: Frame) -> List[Fault]:
        """Faults triggered by this frame (each bit flip and reorder fires once)"""
        key = (sender, receiver, frame.msg_type)
        with self._lock:
            index = self._seen.get(key, 0)
            self._seen[key] = index + 1
            hits = []
            for f in self.faults:
                if (f.sender, f.receiver, f.msg_type) != key or f in self.applied:
                    continue
                if f.kind == "delay" and f.batch_id not in (None, frame.batch_id):
                    continue
                if f.kind == "bit_flip" and f.nth != index:
                    continue
                hits.append(f)
                if f.kind != "delay":
                    self.applied.append(f)
            return hits


class SimulatedNetwork:
    """n parties wired by in-memory mailboxes"""

    def __init__(self, n: int, fault_plan: Optional[FaultPlan] = None):
        self.n = n
        self.fault_plan = fault_plan or FaultPlan()
        self.mailboxes = [Mailbox() for _ in range(n)]
        self.counters = [TrafficCounters() for _ in range(n)]
        self._held: Dict[Tuple[int, int, MsgType], List] = {}
        self._lock = threading.Lock()
        self._timers: List[threading.Timer] = []

    def transport(self, party: int) -> "SimulatedTransport":
        return SimulatedTransport(self, party)

    def sessions(self, alpha_shares: Optional[List[int]] = None, stores: Optional[List] = None,
                 io_timeout: float = IO_TIMEOUT) -> List["PartySession"]:
        sessions = []
        for i in range(self.n):
            sessions.append(PartySession(i, self.n, self.transport(i), self.mailboxes[i], self.counters[i],
                                         alpha_share=alpha_shares[i] if alpha_shares else 0,
                                         store=stores[i] if stores else None, io_timeout=io_timeout))
        return sessions

    def _deliver(self, sender: int, receiver: int, data: bytes):
        try:
            frame = decode_frame(data)
        except errors.MalformedShareMessage as e:
            self.mailboxes[receiver].fail(e)
            return
        self.counters[receiver].received(sender, len(data))
        self.mailboxes[receiver].deposit(sender, frame)

    def route(self, sender: int, receiver: int, frame: Frame):
        data = bytearray(encode_frame(frame))
        self.counters[sender].sent(receiver, len(data))
        delay = 0.0
        hold = None
        for f in self.fault_plan.match(sender, receiver, frame):
            if f.kind == "bit_flip":
                pos = HEADER.size + 4 * f.lane + f.bit // 8
                if pos < len(data):
                    data[pos] ^= 1 << (f.bit % 8)
                    logger.debug("flipped bit %d of lane %d in %s frame %d -> %d", f.bit, f.lane,
                                 frame.msg_type.name, sender, receiver)
            elif f.kind == "delay":
                delay = max(delay, f.seconds)
            elif f.kind == "reorder":
                hold = f.hold
        stream = (sender, receiver, frame.msg_type)
        payload = bytes(data)
        with self._lock:
            held = self._held.setdefault(stream, [])
            if hold is not None:
                held.append([hold, payload])
                # released by later frames, or by a timer if none follow
                timer = threading.Timer(0.5, self._flush, args=(stream,))
                timer.daemon = True
                self._timers.append(timer)
                timer.start()
                return
            release = []
            for entry in held:
                entry[0] -= 1
            release = [e[1] for e in held if e[0] <= 0]
            held[:] = [e for e in held if e[0] > 0]
        self._send_later(sender, receiver, payload, delay)
        for late in release:
            self._send_later(sender, receiver, late, delay)

    def _flush(self, stream):
        with self._lock:
            held = self._held.get(stream, [])
            release = [e[1] for e in held]
            held.clear()
        for payload in release:
            self._deliver(stream[0], stream[1], payload)

    def _send_later(self, sender: int, receiver: int, payload: bytes, delay: float):
        if delay <= 0:
            self._deliver(sender, receiver, payload)
            return
        timer = threading.Timer(delay, self._deliver, args=(sender, receiver, payload))
        timer.daemon = True
        self._timers.append(timer)
        timer.start()

    def close(self):
        for timer in self._timers:
            timer.cancel()


class SimulatedTransport:
    def __init__(self, network: SimulatedNetwork, party: int):
        self.network = network
        self.party = party

    def send(self, peer: int, frame: Frame):
        self.network.route(self.party, peer, frame)

    def close(self):
        pass


# ===== SESSION =====

class OpenLog:
    """Opened values and the local MAC shares behind them, keyed by batch id"""

    def __init__(self):
        self._cond = threading.Condition()
        self._entries: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def record(self, batch_id: int, opened: np.ndarray, macs: np.ndarray):
        with self._cond:
            self._entries[batch_id] = (opened, macs)
            self._cond.notify_all()

    def pending_ids(self) -> List[int]:
        with self._cond:
            return sorted(self._entries)

    def lanes(self) -> int:
        with self._cond:
            return sum(v.shape[0] for v, _ in self._entries.values())

    def collect(self, batch_ids: Optional[List[int]] = None, timeout: Optional[float] = None
                ) -> Tuple[np.ndarray, np.ndarray]:
        """Remove and concatenate entries (all when batch_ids is None), waiting for missing ones"""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            if batch_ids is None:
                batch_ids = sorted(self._entries)
            while any(b not in self._entries for b in batch_ids):
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    missing = [b for b in batch_ids if b not in self._entries]
                    raise errors.PeerTimeout(f"{len(missing)} opening(s) never completed")
                self._cond.wait(remaining)
            entries = [self._entries.pop(b) for b in sorted(batch_ids)]
        if not entries:
            empty = np.zeros(0, dtype=ff.DTYPE)
            return empty, empty.copy()
        return (np.concatenate([e[0] for e in entries]), np.concatenate([e[1] for e in entries]))


class PartySession:
    """One party's view of a run: identity, MAC-key share, links and counters"""

    def __init__(self, party: int, n: int, transport, mailbox: Mailbox, counters: TrafficCounters,
                 alpha_share: int = 0, store=None, io_timeout: float = IO_TIMEOUT):
        self.party = party
        self.n = n
        self.transport = transport
        self.mailbox = mailbox
        self.counters = counters
        self.alpha_share = alpha_share
        self.store = store
        self.io_timeout = io_timeout
        self.open_log = OpenLog()
        self.batch_ids = BatchIdSequence()

    def next_batch_ids(self, count: int = 1) -> List[int]:
        return self.batch_ids.take(count)

    @property
    def peers(self) -> List[int]:
        return [j for j in range(self.n) if j != self.party]

    @property
    def connection_count(self) -> int:
        return len(self.peers)

    def send(self, peer: int, frame: Frame):
        self.transport.send(peer, frame)

    def close(self):
        self.transport.close()


# ===== COLLECTIVES =====

class PendingExchange:
    """Frames expected from every peer for one (type, batch id)"""

    def __init__(self, session: PartySession, msg_type: MsgType, batch_id: int, lanes: Optional[int],
                 own: Optional[np.ndarray], senders: List[int]):
        self.session = session
        self.msg_type = msg_type
        self.batch_id = batch_id
        self.lanes = lanes
        self.own = own
        self.futures = {p: session.mailbox.expect(p, msg_type, batch_id) for p in senders}

    def frames(self, timeout: Optional[float] = None) -> Dict[int, np.ndarray]:
        timeout = self.session.io_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        out = {}
        for peer, fut in self.futures.items():
            try:
                frame = fut.result(timeout=max(0.0, deadline - time.monotonic()))
            except FutureTimeout:
                raise errors.PeerTimeout(
                    f"party {self.session.party}: no {self.msg_type.name} frame {self.batch_id:#x} from party {peer}")
            if self.lanes is not None and frame.lane_count != self.lanes:
                raise errors.LaneCountMismatch(
                    f"party {peer} sent {frame.lane_count} lane(s) for batch {self.batch_id:#x}, expected {self.lanes}")
            out[peer] = frame.payload
        return out

    def sum(self, timeout: Optional[float] = None) -> np.ndarray:
        total = np.array(self.own, dtype=ff.DTYPE, copy=True)
        for payload in self.frames(timeout).values():
            total = ff.batch_add(total, payload)
        return total

    def add_done_callback(self, fn: Callable[["PendingExchange"], None]):
        """Call fn once every peer frame has arrived (or one failed)"""
        remaining = [len(self.futures)]
        lock = threading.Lock()
        if not self.futures:
            fn(self)
            return

        def one_done(_):
            with lock:
                remaining[0] -= 1
                last = remaining[0] == 0
            if last:
                fn(self)

        for fut in self.futures.values():
            fut.add_done_callback(one_done)


def post_exchange(session: PartySession, msg_type: MsgType, batch_id: int, payload: np.ndarray,
                  check_lanes: bool = True) -> PendingExchange:
    """Send payload to every peer and expect one frame back from each"""
    payload = np.asarray(payload, dtype=ff.DTYPE)
    pending = PendingExchange(session, msg_type, batch_id, payload.shape[0] if check_lanes else None,
                              payload, session.peers)
    frame = Frame(msg_type, batch_id, payload)
    for peer in session.peers:
        session.send(peer, frame)
    return pending


def exchange(session: PartySession, msg_type: MsgType, batch_id: int, payload: np.ndarray,
             check_lanes: bool = True) -> Dict[int, np.ndarray]:
    """All-to-all: every party's payload, own included"""
    out = post_exchange(session, msg_type, batch_id, payload, check_lanes).frames()
    out[session.party] = np.asarray(payload, dtype=ff.DTYPE)
    return out


def broadcast_open(session: PartySession, shares: np.ndarray, batch_id: int) -> np.ndarray:
    """Element-wise sum of every party's shares for this batch"""
    return post_exchange(session, MsgType.OPEN_SHARES, batch_id, shares).sum()


def broadcast_from(session: PartySession, sender: int, batch_id: int, payload: Optional[np.ndarray] = None,
                   msg_type: MsgType = MsgType.CONTROL) -> np.ndarray:
    """sender sends payload to everyone; the others receive it"""
    if session.party == sender:
        frame = Frame(msg_type, batch_id, np.asarray(payload, dtype=ff.DTYPE))
        for peer in session.peers:
            session.send(peer, frame)
        return frame.payload
    pending = PendingExchange(session, msg_type, batch_id, None, None, [sender])
    return pending.frames()[sender]
