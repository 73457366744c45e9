"""Batched share kernels behind a pluggable back-end interface

Kernels work on ShareBatch planes: one fused pass covers the value and the MAC
plane, and wide requests are cut into KERNEL_CHUNK-lane blocks.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

import errors
import field as ff
from config import ENABLE_GPU_STUB, GPU_THREADS_PER_BLOCK, KERNEL_CHUNK, SLICE_SIZE, min_kernel_size
from spdz import BeaverTriple, ShareBatch

logger = logging.getLogger(__name__)


class KernelOp(str, Enum):
    ADD = "add"
    SUB = "sub"
    ADD_PUBLIC = "add-public"
    SUB_PUBLIC = "sub-public"
    PUBLIC_SUB = "public-sub"
    MUL_PUBLIC = "mul-public"
    BEAVER = "beaver"
    REDUCE_ADD = "reduce-add"
    MATVEC_PUBLIC_LEFT = "matvec-public-left"
    MATVEC_SHARED_LEFT = "matvec-shared-left"


@dataclass
class KernelRequest:
    op: KernelOp
    inputs: Sequence[object]
    lanes: int
    party: int = 0
    alpha_share: int = 0
    triple: Optional[BeaverTriple] = None
    opened: Optional[Tuple[np.ndarray, np.ndarray]] = None
    dims: Optional[Tuple[int, int]] = None


@dataclass
class BackendCapability:
    name: str
    min_kernel_size: int = 1
    threads_per_block: Optional[int] = None

    def __post_init__(self):
        if self.min_kernel_size < 1:
            raise ValueError("min_kernel_size must be at least 1")


# ===== MATRIX-VECTOR =====

def matvec_public_left(matrix: np.ndarray, vec: ShareBatch) -> ShareBatch:
    """Public (rows, cols) matrix times a shared vector"""
    return ShareBatch.from_planes(ff.matvec_mod(matrix, vec.values), ff.matvec_mod(matrix, vec.macs))


def matvec_shared_left(matrix: ShareBatch, rows: int, cols: int, vec: np.ndarray) -> ShareBatch:
    """Shared row-major (rows, cols) matrix times a public vector"""
    values = matrix.values.reshape(rows, cols)
    macs = matrix.macs.reshape(rows, cols)
    return ShareBatch.from_planes(ff.matvec_mod(values, vec), ff.matvec_mod(macs, vec))


# ===== CPU =====

class CpuBackend:
    """Reference numpy implementation"""

    def __init__(self, chunk: int = KERNEL_CHUNK):
        self.chunk = max(1, chunk)
        self.capability = BackendCapability("cpu", min_kernel_size=1)

    def _check_lanes(self, req: KernelRequest, *batches):
        for b in batches:
            n = b.count if isinstance(b, ShareBatch) else np.asarray(b).shape[0]
            if n != req.lanes and not (not isinstance(b, ShareBatch) and n == 1):
                raise errors.LaneMismatch(f"{req.op.value}: operand has {n} lane(s), request says {req.lanes}")

    def _blocks(self, lanes: int):
        for start in range(0, lanes, self.chunk):
            yield slice(start, min(lanes, start + self.chunk))

    @staticmethod
    def _public(k, window: slice) -> np.ndarray:
        k = np.asarray(k, dtype=ff.DTYPE)
        return k if k.shape[0] == 1 else k[window]

    def execute(self, req: KernelRequest):
        op = req.op
        if op in (KernelOp.ADD, KernelOp.SUB):
            a, b = req.inputs
            self._check_lanes(req, a, b)
            out = ShareBatch.zeros(req.lanes)
            fn = ff.batch_add if op == KernelOp.ADD else ff.batch_sub
            for w in self._blocks(req.lanes):
                fn(a.planes[:, w], b.planes[:, w], out=out.planes[:, w])
            return out

        if op in (KernelOp.ADD_PUBLIC, KernelOp.SUB_PUBLIC, KernelOp.PUBLIC_SUB):
            a, k = req.inputs
            self._check_lanes(req, a, k)
            out = ShareBatch.zeros(req.lanes)
            alpha = np.uint64(req.alpha_share)
            for w in self._blocks(req.lanes):
                kw = ff.batch_reduce(self._public(k, w))
                src = a.planes[:, w]
                dst = out.planes[:, w]
                if op == KernelOp.PUBLIC_SUB:
                    np.copyto(dst, ff.batch_neg(src))
                else:
                    np.copyto(dst, src)
                if op == KernelOp.SUB_PUBLIC:
                    kw = ff.batch_neg(kw)
                if req.party == 0:
                    ff.batch_add(dst[0], kw, out=dst[0])
                ff.batch_add(dst[1], ff.batch_mul(kw, alpha), out=dst[1])
            return out

        if op == KernelOp.MUL_PUBLIC:
            a, k = req.inputs
            self._check_lanes(req, a, k)
            out = ShareBatch.zeros(req.lanes)
            for w in self._blocks(req.lanes):
                ff.batch_mul(a.planes[:, w], ff.batch_reduce(self._public(k, w)), out=out.planes[:, w])
            return out

        if op == KernelOp.BEAVER:
            t = req.triple
            if t is None or t.lanes < req.lanes:
                have = 0 if t is None else t.lanes
                raise errors.TripleShortage(f"beaver kernel needs {req.lanes} triple lane(s), got {have}")
            d, e = req.opened
            self._check_lanes(req, d, e)
            out = ShareBatch.zeros(req.lanes)
            alpha = np.uint64(req.alpha_share)
            for w in self._blocks(req.lanes):
                dw, ew = d[w], e[w]
                dst = out.planes[:, w]
                ff.batch_add(t.c.planes[:, w], ff.batch_mul(t.b.planes[:, w], dw), out=dst)
                ff.batch_add(dst, ff.batch_mul(t.a.planes[:, w], ew), out=dst)
                de = ff.batch_mul(dw, ew)
                if req.party == 0:
                    ff.batch_add(dst[0], de, out=dst[0])
                ff.batch_add(dst[1], ff.batch_mul(de, alpha), out=dst[1])
            return out

        if op == KernelOp.REDUCE_ADD:
            (a,) = req.inputs
            self._check_lanes(req, a)
            return ShareBatch.from_planes([ff.batch_sum(a.values)], [ff.batch_sum(a.macs)])

        if op == KernelOp.MATVEC_PUBLIC_LEFT:
            matrix, vec = req.inputs
            rows, cols = req.dims
            if vec.count != cols or np.asarray(matrix).shape != (rows, cols):
                raise errors.LaneMismatch(f"matvec {rows}x{cols} with a {vec.count}-lane vector")
            return matvec_public_left(matrix, vec)

        if op == KernelOp.MATVEC_SHARED_LEFT:
            matrix, vec = req.inputs
            rows, cols = req.dims
            if matrix.count != rows * cols or np.asarray(vec).shape[0] != cols:
                raise errors.LaneMismatch(f"matvec {rows}x{cols} with {matrix.count} matrix lane(s)")
            return matvec_shared_left(matrix, rows, cols, vec)

        raise ValueError(f"unknown kernel {op}")


class GpuBackend:
    """Capability record for a device back end; no kernels ship with it"""

    def __init__(self, threads_per_block: int = GPU_THREADS_PER_BLOCK, slice_size: int = SLICE_SIZE):
        self.capability = BackendCapability("gpu", min_kernel_size=min_kernel_size(slice_size),
                                            threads_per_block=threads_per_block)

    def execute(self, req: KernelRequest):
        raise errors.BackendUnavailable(f"no GPU kernels are built; cannot run {req.op.value} on {req.lanes} lane(s)")


# ===== SELECTION =====

def select_backend(lanes: int, backends: Sequence, min_size: int):
    """CPU below min_size or when nothing else is registered, else the preferred back end"""
    cpu = next(b for b in backends if b.capability.name == "cpu")
    preferred = [b for b in backends if b is not cpu]
    if not preferred or lanes < min_size:
        return cpu
    return preferred[0]


class BackendRegistry:
    def __init__(self, slice_size: int = SLICE_SIZE):
        self.backends: List = [CpuBackend()]
        self.min_size = min_kernel_size(slice_size)
        self._warned = False

    def register(self, backend):
        if isinstance(backend, GpuBackend) and not ENABLE_GPU_STUB:
            raise errors.BackendUnavailable("the GPU stub is disabled; set MPC_ENABLE_GPU_STUB=1 to register it")
        self.backends.append(backend)
        logger.info("registered back end '%s' (min kernel size %d)", backend.capability.name,
                    backend.capability.min_kernel_size)

    @property
    def cpu(self) -> CpuBackend:
        return self.backends[0]

    def execute(self, req: KernelRequest):
        backend = select_backend(req.lanes, self.backends, self.min_size)
        try:
            return backend.execute(req)
        except errors.BackendUnavailable as e:
            if backend is self.cpu:
                raise
            if not self._warned:
                logger.warning("%s; falling back to the CPU back end", e)
                self._warned = True
            return self.cpu.execute(req)


def default_registry(slice_size: int = SLICE_SIZE, enable_gpu: bool = ENABLE_GPU_STUB) -> BackendRegistry:
    registry = BackendRegistry(slice_size)
    if enable_gpu:
        registry.register(GpuBackend(slice_size=slice_size))
    return registry
