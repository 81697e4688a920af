"""The 13 benchmark workload kinds that expand to the 215 feature columns.

Workloads are deterministic, parameterized actions meant to run inside
measurement brackets. Side effects stay under a designated scratch
directory; stochastic workloads consume a session-seeded generator, except
``cpu_urandom`` which by definition reads the system entropy interface.
"""

from __future__ import annotations

import csv
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import schema
from .probes import Component

URANDOM_BYTES = 100 * 1024 * 1024
MEM_RESERVE_BYTES = 100 * 1024 * 1024
CSV_FIXTURE_BYTES = 500 * 1000
STORAGE_BLOCK_BYTES = 100 * 1024
STORAGE_REPETITIONS = schema.STORAGE_REPETITIONS
LIST_LENGTH = 1000
FIB_N = 20

# The GPU kernels run on 96x96 matrices: small enough to keep one sample's
# GPU section well under 50 ms on a desktop surrogate, large enough that the
# kernel dominates bracket overhead.
MATRIX_DIM = 96
MATRIX_SEED = 0x5EED

HASH_PAYLOAD_BYTES = 1024
FIXED_HASH_PAYLOAD = bytes(range(256)) * 4
HASH_FUNCTION_NAME = "fnv1a64-seeded"

_PAGE = 4096


class WorkloadError(RuntimeError):
    """A workload could not run or violated its contract."""


@dataclass(frozen=True)
class WorkloadSpec:
    id: str
    target_component: Component
    params: Mapping[str, object]


def registry() -> list[WorkloadSpec]:
    """All workload kinds with their fixed parameters."""
    return [
        WorkloadSpec("cpu_sleep", Component.CPU, {"durations_s": schema.CPU_SLEEP_DURATIONS_S}),
        WorkloadSpec("cpu_string_hash", Component.CPU, {"payload_bytes": HASH_PAYLOAD_BYTES, "hash": HASH_FUNCTION_NAME}),
        WorkloadSpec("cpu_pseudo_random", Component.CPU, {"generator": "session-seeded"}),
        WorkloadSpec("cpu_urandom", Component.CPU, {"bytes": URANDOM_BYTES}),
        WorkloadSpec("cpu_fib", Component.CPU, {"n": FIB_N}),
        WorkloadSpec("gpu_matrixmul", Component.GPU, {"dim": MATRIX_DIM}),
        WorkloadSpec("gpu_matrixsum", Component.GPU, {"dim": MATRIX_DIM}),
        WorkloadSpec("gpu_scopy", Component.GPU, {"dim": MATRIX_DIM}),
        WorkloadSpec("mem_list_creation", Component.MEMORY, {"elements": LIST_LENGTH}),
        WorkloadSpec("mem_reserve", Component.MEMORY, {"bytes": MEM_RESERVE_BYTES}),
        WorkloadSpec("mem_csv_read", Component.MEMORY, {"bytes": CSV_FIXTURE_BYTES}),
        WorkloadSpec("storage_read", Component.STORAGE, {"block_bytes": STORAGE_BLOCK_BYTES, "repetitions": STORAGE_REPETITIONS}),
        WorkloadSpec("storage_write", Component.STORAGE, {"block_bytes": STORAGE_BLOCK_BYTES, "repetitions": STORAGE_REPETITIONS}),
    ]


@dataclass(frozen=True)
class FeatureBinding:
    """Maps one feature column to its (workload, variant) pair.

    ``variant`` is the sleep duration for cpu_sleep columns, the 1-based
    repetition index for storage columns, and None otherwise.
    """

    column: str
    workload_id: str
    variant: int | None
    target_component: Component


def feature_bindings() -> list[FeatureBinding]:
    """One binding per performance column, in schema order."""
    bindings: list[FeatureBinding] = []
    for d in schema.CPU_SLEEP_DURATIONS_S:
        bindings.append(FeatureBinding(f"cpu_sleep_{d}s", "cpu_sleep", d, Component.CPU))
    for col in schema.CPU_OP_COLUMNS:
        bindings.append(FeatureBinding(col, col, None, Component.CPU))
    for col in schema.GPU_COLUMNS:
        bindings.append(FeatureBinding(col, col, None, Component.GPU))
    for col in schema.MEMORY_COLUMNS:
        bindings.append(FeatureBinding(col, col, None, Component.MEMORY))
    for i in range(1, STORAGE_REPETITIONS + 1):
        bindings.append(FeatureBinding(f"storage_read_{i}", "storage_read", i, Component.STORAGE))
    for i in range(1, STORAGE_REPETITIONS + 1):
        bindings.append(FeatureBinding(f"storage_write_{i}", "storage_write", i, Component.STORAGE))
    return bindings


FEATURE_BINDINGS = feature_bindings()


def run_fib(n: int) -> int:
    """Iterative Fibonacci with F(1) = F(2) = 1."""
    if n < 1:
        raise WorkloadError(f"n must be >= 1, got {n}")
    a, b = 1, 1
    for _ in range(n - 2):
        a, b = b, a + b
    return b if n > 1 else a


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def run_string_hash(payload: bytes, seed: int) -> int:
    """Seeded 64-bit FNV-1a over the payload.

    The interpreter's built-in string hash is not portable across builds, so
    the benchmark carries its own fixed, seedable, non-cryptographic hash;
    the function name is recorded in session metadata.
    """
    if not payload:
        raise WorkloadError("hash payload must be non-empty")
    h = _FNV_OFFSET
    for byte in (seed & _MASK64).to_bytes(8, "little") + bytes(payload):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def run_pseudo_random(rng: random.Random) -> float:
    return rng.random()


def run_urandom(buffer: bytearray, path: str = "/dev/urandom") -> int:
    """Fill ``buffer`` from the system entropy interface; returns bytes read."""
    try:
        with open(path, "rb", buffering=0) as fh:
            view = memoryview(buffer)
            filled = 0
            while filled < len(buffer):
                n = fh.readinto(view[filled:])
                if not n:
                    break
                filled += n
    except OSError:
        buffer[:] = os.urandom(len(buffer))
        filled = len(buffer)
    if filled != len(buffer):
        raise WorkloadError(f"short entropy read: {filled} of {len(buffer)} bytes")
    return filled


def run_list_creation(n: int = LIST_LENGTH) -> list[int]:
    return list(range(n))


def run_mem_reserve(n_bytes: int = MEM_RESERVE_BYTES) -> bytearray:
    """Allocate and touch every page of an n-byte buffer."""
    buf = bytearray(n_bytes)
    for offset in range(0, n_bytes, _PAGE):
        buf[offset] = 1
    return buf


def write_csv_fixture(path: str | Path, n_bytes: int = CSV_FIXTURE_BYTES) -> Path:
    """Deterministic CSV fixture of (at least) ``n_bytes`` bytes."""
    path = Path(path)
    row_template = "{i},{a},{b},{c}\n"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        size = 0
        i = 0
        while size < n_bytes:
            line = row_template.format(i=i, a=i * 3 + 1, b=(i * 7) % 997, c=i % 13)
            fh.write(line)
            size += len(line)
            i += 1
    return path


def run_csv_read(path: str | Path) -> int:
    """Read and parse the fixture; returns the row count."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        count = 0
        for _row in csv.reader(fh):
            count += 1
    return count


class GpuSurrogate:
    """CPU stand-in for the GPU kernels, flagged so surrogate data is never
    mixed with true-GPU data.

    Real GPU backends implement the same three methods against device
    buffers and report their own backend name.
    """

    backend_name = "cpu-surrogate"

    def __init__(self, dim: int = MATRIX_DIM, seed: int = MATRIX_SEED):
        rng = np.random.default_rng(seed)
        self.a = rng.standard_normal((dim, dim), dtype=np.float32)
        self.b = rng.standard_normal((dim, dim), dtype=np.float32)
        self.out = np.empty_like(self.a)

    def matrixmul(self) -> None:
        np.matmul(self.a, self.b, out=self.out)

    def matrixsum(self) -> None:
        np.add(self.a, self.b, out=self.out)

    def scopy(self) -> None:
        np.copyto(self.out, self.a)


def run_gpu_surrogate(kind: str, backend: GpuSurrogate) -> None:
    try:
        op = getattr(backend, kind.removeprefix("gpu_"))
    except AttributeError:
        raise WorkloadError(f"unknown GPU kernel: {kind}") from None
    op()


def _deterministic_block(index: int, size: int = STORAGE_BLOCK_BYTES) -> bytes:
    return bytes([(index * 31 + k) & 0xFF for k in range(256)]) * (size // 256)


class StorageScratch:
    """Preallocated scratch file for the per-op storage brackets.

    Offsets advance sequentially, one block per repetition index, and wrap
    at the file size. Writes are fsynced inside the measured operation;
    reads drop the page cache for their range first, where the platform
    allows.
    """

    def __init__(
        self,
        path: str | Path,
        block_bytes: int = STORAGE_BLOCK_BYTES,
        repetitions: int = STORAGE_REPETITIONS,
    ):
        self.path = Path(path)
        self.block_bytes = block_bytes
        self.repetitions = repetitions
        self.size = block_bytes * repetitions
        with open(self.path, "wb") as fh:
            for i in range(repetitions):
                fh.write(_deterministic_block(i, block_bytes))
            fh.flush()
            os.fsync(fh.fileno())
        self._fd = os.open(self.path, os.O_RDWR)
        self._blocks = [_deterministic_block(i, block_bytes) for i in range(repetitions)]

    def _offset(self, rep_index: int) -> int:
        return ((rep_index - 1) % self.repetitions) * self.block_bytes

    def invalidate(self, rep_index: int) -> None:
        """Drop cached pages for the block so the read hits the device."""
        try:
            os.posix_fadvise(
                self._fd, self._offset(rep_index), self.block_bytes, os.POSIX_FADV_DONTNEED
            )
        except (AttributeError, OSError):
            pass

    def read_op(self, rep_index: int) -> None:
        data = os.pread(self._fd, self.block_bytes, self._offset(rep_index))
        if len(data) != self.block_bytes:
            raise WorkloadError(f"short read at repetition {rep_index}")

    def write_op(self, rep_index: int) -> None:
        written = os.pwrite(self._fd, self._blocks[(rep_index - 1) % self.repetitions],
                            self._offset(rep_index))
        if written != self.block_bytes:
            raise WorkloadError(f"short write at repetition {rep_index}")
        os.fsync(self._fd)

    def read_back(self, rep_index: int) -> bytes:
        return os.pread(self._fd, self.block_bytes, self._offset(rep_index))

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self) -> "StorageScratch":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def run_storage_io(direction: str, scratch: StorageScratch, probes, observer_id: str) -> list[float]:
    """Exactly one bracket per repetition; returns the per-op deltas.

    Any I/O error discards the partial results and propagates, aborting the
    sample.
    """
    if direction not in ("read", "write"):
        raise WorkloadError(f"direction must be read or write, got {direction!r}")
    deltas: list[float] = []
    for i in range(1, scratch.repetitions + 1):
        if direction == "read":
            scratch.invalidate(i)
            workload = lambda i=i: scratch.read_op(i)
        else:
            workload = lambda i=i: scratch.write_op(i)
        m = probes.measure(observer_id, Component.STORAGE, f"storage_{direction}_{i}", workload)
        deltas.append(float(m.delta))
    return deltas
