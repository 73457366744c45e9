"""Authenticated additive shares and the SPDZ online protocol

A party holds, for every secret x, a value share x_i and a MAC share m_i with
Σ x_i = x and Σ m_i = α·x, where α is itself additively shared. Linear
operations are local; multiplication consumes Beaver triples and two openings;
every opened value is logged and later verified by the batched MAC check.
"""
import hashlib
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import errors
import field as ff
from config import PRIME, TRIPLES_MAGIC, TRIPLES_VERSION
from network import (
    MsgType, PartySession, PendingExchange, bytes_to_lanes, exchange, lanes_to_bytes, post_exchange,
)

logger = logging.getLogger(__name__)


# ===== SHARES =====

@dataclass
class AuthShare:
    """One party's share of a single secret"""
    value: int
    mac: int


class ShareBatch:
    """Contiguous value and MAC planes of one party's shares

    Backed by a single (2, n) uint64 array; slicing returns views.
    """

    __slots__ = ("planes",)

    def __init__(self, planes: np.ndarray):
        if planes.ndim != 2 or planes.shape[0] != 2:
            raise ValueError(f"share planes must have shape (2, n), got {planes.shape}")
        self.planes = planes

    @classmethod
    def zeros(cls, count: int) -> "ShareBatch":
        return cls(np.zeros((2, count), dtype=ff.DTYPE))

    @classmethod
    def from_planes(cls, values, macs) -> "ShareBatch":
        return cls(np.stack([np.asarray(values, dtype=ff.DTYPE), np.asarray(macs, dtype=ff.DTYPE)]))

    @classmethod
    def concat(cls, batches: Sequence["ShareBatch"]) -> "ShareBatch":
        return cls(np.concatenate([b.planes for b in batches], axis=1))

    @property
    def values(self) -> np.ndarray:
        return self.planes[0]

    @property
    def macs(self) -> np.ndarray:
        return self.planes[1]

    @property
    def count(self) -> int:
        return int(self.planes.shape[1])

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, key) -> "ShareBatch":
        if not isinstance(key, slice):
            raise TypeError("ShareBatch only supports slicing; use share(i) for one lane")
        return ShareBatch(self.planes[:, key])

    def share(self, i: int) -> AuthShare:
        return AuthShare(int(self.planes[0, i]), int(self.planes[1, i]))

    def copy(self) -> "ShareBatch":
        return ShareBatch(self.planes.copy())

    def __repr__(self) -> str:
        return f"ShareBatch(count={self.count})"


Shared = Union[AuthShare, ShareBatch]


def _public_plane(k, count: int) -> np.ndarray:
    arr = np.asarray(k, dtype=ff.DTYPE) % np.uint64(PRIME)
    return np.broadcast_to(arr, (count,)) if arr.ndim == 0 or arr.shape[0] == 1 else arr


# ===== LOCAL OPERATIONS =====

def add_local(a: Shared, b: Shared) -> Shared:
    """[a] + [b]; no communication"""
    if isinstance(a, AuthShare):
        return AuthShare(ff.add(a.value, b.value), ff.add(a.mac, b.mac))
    return ShareBatch(ff.batch_add(a.planes, b.planes))


def sub_local(a: Shared, b: Shared) -> Shared:
    if isinstance(a, AuthShare):
        return AuthShare(ff.sub(a.value, b.value), ff.sub(a.mac, b.mac))
    return ShareBatch(ff.batch_sub(a.planes, b.planes))


def neg_local(a: Shared) -> Shared:
    if isinstance(a, AuthShare):
        return AuthShare(ff.neg(a.value), ff.neg(a.mac))
    return ShareBatch(ff.batch_neg(a.planes))


def add_public_const(a: Shared, k, party: int, alpha_share: int) -> Shared:
    """[a] + k: party 0 adds k to its value share, every party adds α_i·k to its MAC share"""
    if isinstance(a, AuthShare):
        k = ff.reduce(int(k))
        value = ff.add(a.value, k) if party == 0 else a.value
        return AuthShare(value, ff.add(a.mac, ff.mul(alpha_share, k)))
    k = _public_plane(k, a.count)
    out = a.planes.copy()
    if party == 0:
        ff.batch_add(out[0], k, out=out[0])
    ff.batch_add(out[1], ff.batch_mul(k, np.uint64(alpha_share)), out=out[1])
    return ShareBatch(out)


def sub_public_const(a: Shared, k, party: int, alpha_share: int) -> Shared:
    """[a] - k"""
    if isinstance(a, AuthShare):
        return add_public_const(a, ff.neg(int(k)), party, alpha_share)
    return add_public_const(a, ff.batch_neg(_public_plane(k, a.count)), party, alpha_share)


def public_sub(k, a: Shared, party: int, alpha_share: int) -> Shared:
    """k - [a]"""
    return add_public_const(neg_local(a), k, party, alpha_share)


def mul_public_const(a: Shared, k) -> Shared:
    """k·[a], scaling both the value and the MAC share"""
    if isinstance(a, AuthShare):
        k = ff.reduce(int(k))
        return AuthShare(ff.mul(a.value, k), ff.mul(a.mac, k))
    return ShareBatch(ff.batch_mul(a.planes, _public_plane(k, a.count)))


# ===== DEALER-SIDE HELPERS =====

def share_value(x: int, n: int, alpha: int, rng: np.random.Generator) -> List[AuthShare]:
    """Split x into n authenticated shares (dealer and tests only)"""
    batches = share_batch(ff.as_batch([x]), n, alpha, rng)
    return [b.share(0) for b in batches]


def _split(total: np.ndarray, n: int, rng: np.random.Generator) -> List[np.ndarray]:
    parts = [ff.random_batch(rng, total.shape[0]) for _ in range(n - 1)]
    last = total.copy()
    for p in parts:
        last = ff.batch_sub(last, p)
    return parts + [last]


def share_batch(values: np.ndarray, n: int, alpha: int, rng: np.random.Generator) -> List[ShareBatch]:
    """Authenticated shares of a whole array, one ShareBatch per party"""
    if n < 2:
        raise ValueError("sharing needs at least two parties")
    values = ff.batch_reduce(values)
    value_parts = _split(values, n, rng)
    mac_parts = _split(ff.batch_mul(values, np.uint64(alpha)), n, rng)
    return [ShareBatch.from_planes(v, m) for v, m in zip(value_parts, mac_parts)]


def reconstruct(shares: Sequence[Shared]):
    """Σ value shares: an int for AuthShares, an array for ShareBatches"""
    if isinstance(shares[0], AuthShare):
        return sum(s.value for s in shares) % PRIME
    total = np.zeros(shares[0].count, dtype=ff.DTYPE)
    for s in shares:
        total = ff.batch_add(total, s.values)
    return total


def reconstruct_mac(shares: Sequence[Shared]):
    if isinstance(shares[0], AuthShare):
        return sum(s.mac for s in shares) % PRIME
    total = np.zeros(shares[0].count, dtype=ff.DTYPE)
    for s in shares:
        total = ff.batch_add(total, s.macs)
    return total


def check_mac_consistency(shares: Sequence[Shared], alpha: int) -> bool:
    """Σ m_i = α·Σ x_i on every lane"""
    value = reconstruct(shares)
    mac = reconstruct_mac(shares)
    if isinstance(shares[0], AuthShare):
        return mac == ff.mul(alpha, value)
    return bool(np.array_equal(mac, ff.batch_mul(value, np.uint64(alpha))))


# ===== TRIPLES =====

class _Consumable:
    """Single-use guard shared by scalar and matrix triples"""

    def __init__(self):
        self._lock = threading.Lock()
        self.consumed = False

    def claim(self):
        with self._lock:
            if self.consumed:
                raise errors.TripleExhausted("triple was already consumed")
            self.consumed = True


class BeaverTriple(_Consumable):
    """Shares of (A, B, C) with C = A·B, one lane per multiplication"""

    def __init__(self, a: ShareBatch, b: ShareBatch, c: ShareBatch):
        super().__init__()
        self.a, self.b, self.c = a, b, c

    @property
    def lanes(self) -> int:
        return self.a.count

    def __getitem__(self, key: slice) -> "BeaverTriple":
        return BeaverTriple(self.a[key], self.b[key], self.c[key])


class MatrixTriple(_Consumable):
    """Shares of A (rows x cols, row-major), B (cols) and C = A·B (rows)"""

    def __init__(self, rows: int, cols: int, a: ShareBatch, b: ShareBatch, c: ShareBatch):
        super().__init__()
        self.rows, self.cols = rows, cols
        self.a, self.b, self.c = a, b, c

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols


@dataclass(eq=False)
class TripleStore:
    """One party's preprocessed material"""
    party: int
    n: int
    alpha_share: int
    scalar_a: ShareBatch = field(default_factory=lambda: ShareBatch.zeros(0))
    scalar_b: ShareBatch = field(default_factory=lambda: ShareBatch.zeros(0))
    scalar_c: ShareBatch = field(default_factory=lambda: ShareBatch.zeros(0))
    matrix: Dict[Tuple[int, int], List[MatrixTriple]] = field(default_factory=dict)
    masks: ShareBatch = field(default_factory=lambda: ShareBatch.zeros(0))
    clear_masks: Optional[np.ndarray] = None
    _scalar_used: int = field(default=0, init=False)
    _matrix_used: Dict[Tuple[int, int], int] = field(default_factory=dict, init=False)
    _masks_used: int = field(default=0, init=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    @property
    def scalar_count(self) -> int:
        return self.scalar_a.count

    def take_scalar(self, count: int) -> BeaverTriple:
        """Reserve the next count scalar triples"""
        with self._lock:
            start = self._scalar_used
            if start + count > self.scalar_count:
                raise errors.TripleExhausted(
                    f"party {self.party}: need {count} scalar triple(s), {self.scalar_count - start} left")
            self._scalar_used += count
        window = slice(start, start + count)
        return BeaverTriple(self.scalar_a[window], self.scalar_b[window], self.scalar_c[window])

    def take_matrix(self, rows: int, cols: int) -> MatrixTriple:
        shape = (rows, cols)
        with self._lock:
            pool = self.matrix.get(shape)
            if pool is None:
                raise errors.TripleShapeMismatch(
                    f"party {self.party}: no matrix triples shaped {rows}x{cols} (have {sorted(self.matrix)})")
            used = self._matrix_used.get(shape, 0)
            if used >= len(pool):
                raise errors.TripleExhausted(f"party {self.party}: matrix triples {rows}x{cols} used up")
            self._matrix_used[shape] = used + 1
        return pool[used]

    def take_masks(self, count: int) -> Tuple[ShareBatch, Optional[np.ndarray]]:
        """Next count input-mask shares, plus their clear values on the owner"""
        with self._lock:
            start = self._masks_used
            if start + count > self.masks.count:
                raise errors.MaskExhausted(
                    f"party {self.party}: need {count} input mask(s), {self.masks.count - start} left")
            self._masks_used += count
        clear = None if self.clear_masks is None else self.clear_masks[start:start + count]
        return self.masks[start:start + count], clear

    def remaining(self) -> Dict[str, object]:
        with self._lock:
            return {
                "scalar": self.scalar_count - self._scalar_used,
                "matrix": {s: len(p) - self._matrix_used.get(s, 0) for s, p in self.matrix.items()},
                "masks": self.masks.count - self._masks_used,
            }

    def consumed(self) -> Dict[str, int]:
        with self._lock:
            return {"scalar": self._scalar_used, "tiles": sum(self._matrix_used.values()),
                    "masks": self._masks_used}


# ===== TRIPLE STORE FILE =====

_STORE_HEADER = struct.Struct("<4sIQIIQ")
_WIRE = np.dtype("<u4")


def _put(parts: List[bytes], arr: np.ndarray):
    parts.append(np.asarray(arr).astype(_WIRE).tobytes())


def serialize_store(store: TripleStore) -> bytes:
    parts = [_STORE_HEADER.pack(TRIPLES_MAGIC, TRIPLES_VERSION, PRIME, store.party, store.n, store.alpha_share)]
    count = store.scalar_count
    parts.append(struct.pack("<Q", count))
    # one (A, B, C, mA, mB, mC) record per triple
    records = np.stack([store.scalar_a.values, store.scalar_b.values, store.scalar_c.values,
                        store.scalar_a.macs, store.scalar_b.macs, store.scalar_c.macs], axis=1)
    _put(parts, records)
    parts.append(struct.pack("<I", len(store.matrix)))
    for (rows, cols), pool in sorted(store.matrix.items()):
        parts.append(struct.pack("<III", rows, cols, len(pool)))
        for t in pool:
            for sb in (t.a, t.b, t.c):
                _put(parts, sb.values)
                _put(parts, sb.macs)
    parts.append(struct.pack("<Q", store.masks.count))
    _put(parts, store.masks.values)
    _put(parts, store.masks.macs)
    if store.clear_masks is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        _put(parts, store.clear_masks)
    return b"".join(parts)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise errors.CorruptPayload("triple store is truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def lanes(self, count: int) -> np.ndarray:
        size = 4 * count
        if self.pos + size > len(self.data):
            raise errors.CorruptPayload("triple store is truncated")
        arr = np.frombuffer(self.data, dtype=_WIRE, count=count, offset=self.pos).astype(ff.DTYPE)
        self.pos += size
        if count and int(arr.max()) >= PRIME:
            raise errors.CorruptPayload("triple store holds a value outside the field")
        return arr

    def batch(self, count: int) -> ShareBatch:
        return ShareBatch.from_planes(self.lanes(count), self.lanes(count))


def deserialize_store(data: bytes) -> TripleStore:
    if len(data) < _STORE_HEADER.size:
        raise errors.CorruptPayload("triple store is truncated")
    magic, version, prime, party, n, alpha_share = _STORE_HEADER.unpack_from(data, 0)
    if magic != TRIPLES_MAGIC:
        raise errors.VersionMismatch(f"not a triple store (magic {magic!r})")
    if version != TRIPLES_VERSION:
        raise errors.VersionMismatch(f"triple store version {version}, expected {TRIPLES_VERSION}")
    if prime != PRIME:
        raise errors.VersionMismatch(f"triple store is over p={prime}, expected {PRIME}")
    cur = _Cursor(data)
    cur.pos = _STORE_HEADER.size
    (count,) = cur.unpack("<Q")
    records = cur.lanes(6 * count).reshape(count, 6)
    store = TripleStore(party=party, n=n, alpha_share=alpha_share)
    store.scalar_a = ShareBatch.from_planes(records[:, 0], records[:, 3])
    store.scalar_b = ShareBatch.from_planes(records[:, 1], records[:, 4])
    store.scalar_c = ShareBatch.from_planes(records[:, 2], records[:, 5])
    (shapes,) = cur.unpack("<I")
    for _ in range(shapes):
        rows, cols, how_many = cur.unpack("<III")
        pool = []
        for _ in range(how_many):
            a = cur.batch(rows * cols)
            b = cur.batch(cols)
            c = cur.batch(rows)
            pool.append(MatrixTriple(rows, cols, a, b, c))
        store.matrix[(rows, cols)] = pool
    (mask_count,) = cur.unpack("<Q")
    store.masks = cur.batch(mask_count)
    (owner,) = cur.unpack("<B")
    if owner:
        store.clear_masks = cur.lanes(mask_count)
    if cur.pos != len(data):
        raise errors.CorruptPayload(f"{len(data) - cur.pos} trailing byte(s) after the triple store")
    return store


def save_store(store: TripleStore, path: str):
    with open(path, "wb") as f:
        f.write(serialize_store(store))
    logger.info("wrote triple store for party %d to %s", store.party, path)


def load_store(path: str) -> TripleStore:
    with open(path, "rb") as f:
        return deserialize_store(f.read())


# ===== OPENING =====

class Opening:
    """Broadcast of value shares whose sum becomes public

    The (opened value, local MAC share) pairs go to the session's open log
    the first time result() succeeds.
    """

    def __init__(self, session: PartySession, shares: ShareBatch, batch_id: int):
        self.session = session
        self.shares = shares
        self.batch_id = batch_id
        self._pending: PendingExchange = post_exchange(session, MsgType.OPEN_SHARES, batch_id, shares.values)
        self._opened: Optional[np.ndarray] = None
        self._lock = threading.Lock()

    def result(self, timeout: Optional[float] = None) -> np.ndarray:
        with self._lock:
            if self._opened is None:
                self._opened = self._pending.sum(timeout)
                self.session.open_log.record(self.batch_id, self._opened, np.array(self.shares.macs, copy=True))
            return self._opened

    def when_ready(self, fn: Callable[["Opening"], None]):
        """Run fn(self) once every peer's shares arrived (or the link failed)"""
        self._pending.add_done_callback(lambda _: fn(self))


def open_shares(session: PartySession, shares: Shared, batch_id: int):
    """Open a share or a batch; returns the public int or array"""
    if isinstance(shares, AuthShare):
        return int(Opening(session, ShareBatch.from_planes([shares.value], [shares.mac]), batch_id).result()[0])
    return Opening(session, shares, batch_id).result()


# ===== BEAVER MULTIPLICATION =====

def beaver_combine(triple: BeaverTriple, d: np.ndarray, e: np.ndarray, party: int, alpha_share: int) -> ShareBatch:
    """z = C + d·B + e·A + d·e on the CPU beaver kernel"""
    from backend import CpuBackend, KernelOp, KernelRequest
    return CpuBackend().execute(KernelRequest(KernelOp.BEAVER, [], d.shape[0], party, alpha_share, triple=triple,
                                              opened=(d, e)))


class PendingMultiply:
    """A Beaver multiplication whose d and e are being opened"""

    def __init__(self, triple: BeaverTriple, opening: Opening, lanes: int, combine):
        self.triple = triple
        self.opening = opening
        self.lanes = lanes
        self.combine = combine or beaver_combine

    def finish(self, timeout: Optional[float] = None) -> ShareBatch:
        opened = self.opening.result(timeout)
        d, e = opened[:self.lanes], opened[self.lanes:]
        session = self.opening.session
        return self.combine(self.triple, d, e, session.party, session.alpha_share)

    def when_ready(self, fn: Callable[["PendingMultiply"], None]):
        self.opening.when_ready(lambda _: fn(self))


def beaver_begin(x: ShareBatch, y: ShareBatch, triple: BeaverTriple, session: PartySession, batch_id: int,
                 combine=None) -> PendingMultiply:
    """Claim the triple and open [d..., e...] = [x - A, y - B] in one frame"""
    if x.count != y.count:
        raise errors.LaneMismatch(f"multiplying {x.count} lane(s) by {y.count}")
    if triple.lanes < x.count:
        raise errors.TripleShortage(f"{x.count} lane(s) to multiply, triple covers {triple.lanes}")
    triple.claim()
    triple = triple[:x.count] if triple.lanes > x.count else triple
    masked = ShareBatch.concat([sub_local(x, triple.a), sub_local(y, triple.b)])
    return PendingMultiply(triple, Opening(session, masked, batch_id), x.count, combine)


def beaver_multiply_batch(x: ShareBatch, y: ShareBatch, triple: BeaverTriple, session: PartySession,
                          batch_id: int, combine=None) -> ShareBatch:
    return beaver_begin(x, y, triple, session, batch_id, combine).finish()


def beaver_multiply(x: AuthShare, y: AuthShare, triple: BeaverTriple, session: PartySession,
                    batch_id: int) -> AuthShare:
    xs = ShareBatch.from_planes([x.value], [x.mac])
    ys = ShareBatch.from_planes([y.value], [y.mac])
    return beaver_multiply_batch(xs, ys, triple, session, batch_id).share(0)


# ===== MAC CHECK =====

def _commitment(sigma: int, salt: bytes) -> bytes:
    return hashlib.sha256(struct.pack("<I", sigma) + salt).digest()


def mac_check(session: PartySession, opened: np.ndarray, macs: np.ndarray, checkpoint: int,
              rng: Optional[np.random.Generator] = None) -> bool:
    """Batched check that every logged opening is consistent under α

    Nonces are exchanged and hashed into a shared coin that seeds the random
    coefficients; σ_i is committed with a salted sha256 before it is revealed.
    An empty log passes without sending anything.
    """
    opened = np.asarray(opened, dtype=ff.DTYPE)
    if opened.shape[0] == 0:
        return True
    if rng is None:
        nonce, salt = os.urandom(32), os.urandom(32)
    else:
        nonce, salt = rng.bytes(32), rng.bytes(32)

    nonces = exchange(session, MsgType.NONCE, checkpoint, bytes_to_lanes(nonce))
    coin = hashlib.sha256(b"".join(lanes_to_bytes(nonces[i]) for i in range(session.n))).digest()
    coefficients = ff.random_batch(np.random.default_rng(int.from_bytes(coin, "little")), opened.shape[0])

    residue = ff.batch_sub(macs, ff.batch_mul(opened, np.uint64(session.alpha_share)))
    sigma = ff.batch_sum(ff.batch_mul(coefficients, residue))

    commits = exchange(session, MsgType.COMMIT, checkpoint, bytes_to_lanes(_commitment(sigma, salt)))
    reveal = np.concatenate([ff.as_batch([sigma]), bytes_to_lanes(salt)])
    reveals = exchange(session, MsgType.REVEAL, checkpoint, reveal)

    total = 0
    for peer in range(session.n):
        payload = reveals[peer]
        peer_sigma = int(payload[0])
        if peer != session.party and _commitment(peer_sigma, lanes_to_bytes(payload[1:])) != lanes_to_bytes(commits[peer]):
            raise errors.CommitmentMismatch(f"party {peer} revealed a value that does not match its commitment")
        total = (total + peer_sigma) % PRIME
    if total != 0:
        logger.error("party %d: MAC check %d failed over %d opened value(s)", session.party, checkpoint, opened.shape[0])
        raise errors.MacCheckFailed(f"MAC check {checkpoint} failed over {opened.shape[0]} opened value(s)")
    logger.info("party %d: MAC check %d passed (%d value(s))", session.party, checkpoint, opened.shape[0])
    return True
