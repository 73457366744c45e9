# Runtime and protocol configuration
import os
from typing import Dict, Tuple

from dotenv import load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
    """Read an integer from the environment"""
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    return int(raw, 0)


def _env_float(name: str, default: float) -> float:
    """Read a float from the environment"""
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    return float(raw)


def _env_flag(name: str, default: bool = False) -> bool:
    """Read a boolean flag from the environment"""
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


# ===== FIXED PROTOCOL CONSTANTS =====

PRIME = 4294967291  # 2^32 - 5
INPUT_BITS = 32

CIRCUIT_MAGIC = b"MPCG"
CIRCUIT_VERSION = 1
TRIPLES_MAGIC = b"MPCT"
TRIPLES_VERSION = 1
INPUTS_MAGIC = b"MPCI"
INPUTS_VERSION = 1

FRAME_HEADER_SIZE = 16

# ===== TUNABLES =====

SLICE_SIZE = _env_int("MPC_SLICE_SIZE", 262140)
KERNEL_CHUNK = _env_int("MPC_KERNEL_CHUNK", 1 << 16)
CONNECT_TIMEOUT = _env_float("MPC_CONNECT_TIMEOUT", 10.0)
IO_TIMEOUT = _env_float("MPC_IO_TIMEOUT", 30.0)
MAC_CHECK_THRESHOLD = _env_int("MPC_MAC_CHECK_THRESHOLD", 1 << 20)
ORACLE_ITERATION_CAP = _env_int("MPC_ORACLE_ITERATION_CAP", 1 << 24)
BRANCH_PARK_AFTER = _env_int("MPC_BRANCH_PARK_AFTER", 4)
GPU_THREADS_PER_BLOCK = _env_int("MPC_GPU_THREADS_PER_BLOCK", 1024)
ENABLE_GPU_STUB = _env_flag("MPC_ENABLE_GPU_STUB")
LOG_LEVEL = os.environ.get("MPC_LOG_LEVEL", "INFO").upper()
INPUT_OWNER = _env_int("MPC_INPUT_OWNER", 0)


def min_kernel_size(slice_size: int) -> int:
    """Lane threshold below which kernels fall back to the CPU path"""
    return max(1, slice_size // 4)


def read_endpoints(path: str) -> Dict[int, Tuple[str, int]]:
    """Parse an endpoints file of `index host:port` lines"""
    endpoints = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                index_text, address = line.split()
                host, port_text = address.rsplit(":", 1)
                index = int(index_text)
                port = int(port_text)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'index host:port', got {line!r}")
            if index in endpoints:
                raise ValueError(f"{path}:{lineno}: party index {index} listed twice")
            endpoints[index] = (host, port)
    return endpoints
