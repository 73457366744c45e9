"""Arithmetic over the prime field F_p, p = 2^32 - 5

Scalars are plain Python ints in [0, p). Batches are numpy uint64 arrays whose
entries are in [0, p); products of two entries stay below 2^64 so a single
multiply followed by `% P` is exact.
"""
from typing import Iterable

import numpy as np

from config import PRIME

P = PRIME
DTYPE = np.uint64
_P64 = np.uint64(P)
HALF = (P - 1) // 2


# ===== SCALAR OPERATIONS =====

def reduce(x: int) -> int:
    """Map any integer into [0, p)"""
    return x % P


def add(a: int, b: int) -> int:
    return (a + b) % P


def sub(a: int, b: int) -> int:
    return (a - b) % P


def mul(a: int, b: int) -> int:
    return (a * b) % P


def neg(a: int) -> int:
    return (-a) % P


def pow_(a: int, e: int) -> int:
    """a**e mod p; negative exponents use the inverse"""
    return pow(a % P, e, P)


def inv(a: int) -> int:
    if a % P == 0:
        raise ZeroDivisionError("0 has no inverse in F_p")
    return pow(a % P, P - 2, P)


def to_signed(v: int) -> int:
    """Read a field element as a signed integer (upper half is negative)"""
    v %= P
    return v - P if v > HALF else v


def from_int(x: int) -> int:
    """Embed an IR integer constant (signed or unsigned 32-bit) into F_p"""
    return x % P


# ===== BATCH OPERATIONS =====

def as_batch(values: Iterable[int]) -> np.ndarray:
    """Build a reduced uint64 batch from Python ints"""
    arr = np.asarray([int(v) % P for v in values], dtype=DTYPE)
    return arr


def batch_reduce(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=DTYPE) % _P64


def batch_add(a: np.ndarray, b, out: np.ndarray = None) -> np.ndarray:
    out = np.add(a, b, out=out, dtype=DTYPE)
    return np.remainder(out, _P64, out=out)


def batch_sub(a: np.ndarray, b, out: np.ndarray = None) -> np.ndarray:
    # a + (p - b) keeps everything unsigned
    out = np.add(a, np.subtract(_P64, b, dtype=DTYPE), out=out, dtype=DTYPE)
    return np.remainder(out, _P64, out=out)


def batch_mul(a: np.ndarray, b, out: np.ndarray = None) -> np.ndarray:
    out = np.multiply(a, b, out=out, dtype=DTYPE)
    return np.remainder(out, _P64, out=out)


def batch_neg(a: np.ndarray) -> np.ndarray:
    return np.subtract(_P64, a, dtype=DTYPE) % _P64


def batch_sum(a: np.ndarray) -> int:
    """Sum of all lanes mod p (no overflow for any realistic lane count)"""
    total = 0
    flat = np.asarray(a, dtype=DTYPE).ravel()
    # chunks of 2^31 lanes cannot overflow uint64
    step = 1 << 31
    for start in range(0, flat.size, step):
        total += int(flat[start:start + step].sum(dtype=DTYPE))
    return total % P


def batch_product(a: np.ndarray) -> int:
    result = 1
    for v in np.asarray(a, dtype=DTYPE).ravel():
        result = (result * int(v)) % P
    return result


def random_batch(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform field elements"""
    return rng.integers(0, P, size=count, dtype=DTYPE)


def random_element(rng: np.random.Generator) -> int:
    return int(rng.integers(0, P, dtype=DTYPE))


# ===== MATRIX-VECTOR =====

_LIMB = np.uint64(16)
_LIMB_MASK = np.uint64(0xFFFF)
_COLUMN_CHUNK = 1 << 15


def matvec_mod(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact (m @ v) mod p for reduced uint64 operands

    m is split into 16-bit limbs so each partial dot product over a column
    chunk of 2^15 stays below 2^63.
    """
    m = np.asarray(m, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    rows, cols = m.shape
    if cols != v.shape[0]:
        raise ValueError(f"matvec shape mismatch: {m.shape} x {v.shape}")
    lo = m & _LIMB_MASK
    hi = m >> _LIMB
    acc_lo = np.zeros(rows, dtype=DTYPE)
    acc_hi = np.zeros(rows, dtype=DTYPE)
    for start in range(0, cols, _COLUMN_CHUNK):
        stop = min(cols, start + _COLUMN_CHUNK)
        vc = v[start:stop]
        acc_lo = (acc_lo + (lo[:, start:stop] @ vc) % _P64) % _P64
        acc_hi = (acc_hi + (hi[:, start:stop] @ vc) % _P64) % _P64
    return (acc_lo + (acc_hi * np.uint64(1 << 16)) % _P64) % _P64
