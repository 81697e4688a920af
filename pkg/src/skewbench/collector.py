"""Measurement sessions: stability preflight, per-sample assembly, and
session segmentation.

A session appends complete rows to the device's CSV until the configured
sample count is reached, then stops; a supervisor loop restarts the process
for the next session, which resets accumulated process noise the same way a
device reboot would. Rows are written atomically (one write plus flush per
sample), so a killed session always leaves a parseable file.

The preflight only observes the host; it never mutates system state.
Applying the stability measures (fixed frequency governor, elevated
priority, ASLR off, core isolation, a fixed hash seed environment) is the
operator's job; the report records what was found. Interpreter build-time
optimizations are not applicable here and are not checked.
"""

from __future__ import annotations

import gc
import json
import os
import random
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import schema, workloads
from .probes import CounterRegistry, host_registry, observer_for
from .simulator import VirtualDevice, VirtualDeviceRuntime
from .workloads import (
    FEATURE_BINDINGS,
    FIXED_HASH_PAYLOAD,
    GpuSurrogate,
    StorageScratch,
    FeatureBinding,
)

SCHED_FIFO = 1
SCHED_RR = 2


class SessionError(RuntimeError):
    """The session cannot start or continue."""


class DegradedEnvironment(SessionError):
    """Stability measures are missing and the config does not allow that."""


class CheckStatus(Enum):
    SATISFIED = "satisfied"
    UNSATISFIED = "unsatisfied"
    NOT_APPLICABLE = "not-applicable"
    UNKNOWN = "unknown"


STABILITY_CHECKS = (
    "fixed_frequency",
    "kernel_priority",
    "aslr_disabled",
    "core_isolation",
    "fixed_hash_seed",
    "gc_disabled",
)


@dataclass(frozen=True)
class StabilityReport:
    checks: dict[str, CheckStatus]

    def __post_init__(self):
        if tuple(self.checks) != STABILITY_CHECKS:
            raise ValueError(f"report must cover exactly {STABILITY_CHECKS}")

    @property
    def degraded(self) -> bool:
        return any(
            status in (CheckStatus.UNSATISFIED, CheckStatus.UNKNOWN)
            for status in self.checks.values()
        )

    def to_json(self) -> dict[str, str]:
        return {name: status.value for name, status in self.checks.items()}


@dataclass
class SessionConfig:
    device_mac: str
    device_model: str
    working_dir: Path
    samples_per_session: int = 800
    seed: int = 0
    pinned_core: int | None = None
    require_fixed_frequency: bool = False
    allow_degraded: bool = False

    def __post_init__(self):
        self.working_dir = Path(self.working_dir)
        self.device_mac = self.device_mac.lower()
        if self.samples_per_session < 1:
            raise ValueError("samples_per_session must be >= 1")
        if not schema.is_valid_mac(self.device_mac):
            raise ValueError(f"not a MAC address: {self.device_mac!r}")


class PlatformProbe:
    """Best-effort host introspection, rooted for testability."""

    def __init__(self, root: str | Path = "/"):
        self.root = Path(root)

    def _read(self, relative: str) -> str | None:
        try:
            return (self.root / relative).read_text().strip()
        except OSError:
            return None

    def governors(self) -> list[str] | None:
        base = self.root / "sys/devices/system/cpu"
        if not base.exists():
            return None
        values = []
        for cpu_dir in sorted(base.glob("cpu[0-9]*")):
            gov = cpu_dir / "cpufreq/scaling_governor"
            try:
                values.append(gov.read_text().strip())
            except OSError:
                continue
        return values or None

    def sched_policy(self) -> int | None:
        try:
            return os.sched_getscheduler(0)
        except (AttributeError, OSError):
            return None

    def niceness(self) -> int | None:
        try:
            return os.getpriority(os.PRIO_PROCESS, 0)
        except (AttributeError, OSError):
            return None

    def aslr(self) -> str | None:
        return self._read("proc/sys/kernel/randomize_va_space")

    def isolated_cpus(self) -> set[int] | None:
        raw = self._read("sys/devices/system/cpu/isolated")
        if raw is None:
            return None
        cpus: set[int] = set()
        for part in raw.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                cpus.update(range(int(lo), int(hi) + 1))
            else:
                cpus.add(int(part))
        return cpus

    def cpu_count(self) -> int:
        return os.cpu_count() or 1

    def hash_seed_env(self) -> str | None:
        return os.environ.get("PYTHONHASHSEED")

    def gc_enabled(self) -> bool:
        return gc.isenabled()

    def temperature_c(self) -> float | None:
        base = self.root / "sys/class/thermal"
        if not base.exists():
            return None
        for zone in sorted(base.glob("thermal_zone*")):
            try:
                milli = int((zone / "temp").read_text().strip())
            except (OSError, ValueError):
                continue
            return milli / 1000.0
        return None


def preflight(config: SessionConfig, probe: PlatformProbe | None = None) -> StabilityReport:
    """Detect the stability measures; unknown is a valid status."""
    probe = probe or PlatformProbe()
    checks: dict[str, CheckStatus] = {}

    governors = probe.governors()
    if governors is None:
        checks["fixed_frequency"] = CheckStatus.UNKNOWN
    elif all(g == "performance" for g in governors):
        checks["fixed_frequency"] = CheckStatus.SATISFIED
    else:
        checks["fixed_frequency"] = CheckStatus.UNSATISFIED

    policy = probe.sched_policy()
    if policy in (SCHED_FIFO, SCHED_RR):
        checks["kernel_priority"] = CheckStatus.SATISFIED
    else:
        nice = probe.niceness()
        if nice is None:
            checks["kernel_priority"] = CheckStatus.UNKNOWN
        elif nice <= -10:
            checks["kernel_priority"] = CheckStatus.SATISFIED
        else:
            checks["kernel_priority"] = CheckStatus.UNSATISFIED

    aslr = probe.aslr()
    if aslr is None:
        checks["aslr_disabled"] = CheckStatus.UNKNOWN
    elif aslr == "0":
        checks["aslr_disabled"] = CheckStatus.SATISFIED
    else:
        checks["aslr_disabled"] = CheckStatus.UNSATISFIED

    if probe.cpu_count() == 1:
        checks["core_isolation"] = CheckStatus.NOT_APPLICABLE
    else:
        isolated = probe.isolated_cpus()
        if isolated is None:
            checks["core_isolation"] = CheckStatus.UNKNOWN
        elif config.pinned_core is not None and config.pinned_core in isolated:
            checks["core_isolation"] = CheckStatus.SATISFIED
        else:
            checks["core_isolation"] = CheckStatus.UNSATISFIED

    seed_env = probe.hash_seed_env()
    if seed_env is not None and seed_env.isdigit():
        checks["fixed_hash_seed"] = CheckStatus.SATISFIED
    else:
        checks["fixed_hash_seed"] = CheckStatus.UNSATISFIED

    checks["gc_disabled"] = (
        CheckStatus.SATISFIED if not probe.gc_enabled() else CheckStatus.UNSATISFIED
    )

    return StabilityReport(checks)


def simulated_stability_report() -> StabilityReport:
    """No physical system behind a virtual device: nothing to stabilize."""
    return StabilityReport({name: CheckStatus.NOT_APPLICABLE for name in STABILITY_CHECKS})


def read_temperature(probe: PlatformProbe | None = None) -> float:
    value = (probe or PlatformProbe()).temperature_c()
    return schema.TEMPERATURE_UNAVAILABLE_C if value is None else value


@dataclass
class SessionLog:
    """JSON-lines session journal."""

    events: list[dict] = field(default_factory=list)

    def add(self, event: str, **payload) -> None:
        self.events.append({"event": event, **payload})

    def write(self, path: Path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    @property
    def sample_count(self) -> int:
        return sum(1 for e in self.events if e["event"] == "sample" and e.get("ok"))


@dataclass
class SessionResult:
    csv_path: Path
    rows_written: int
    degraded: bool
    aborted: bool
    abort_reason: str | None
    log: SessionLog


class HostAdapter:
    """Real-hardware session backend: host counters and real workloads."""

    is_virtual = False

    def __init__(self, config: SessionConfig, probe: PlatformProbe | None = None,
                 registry: CounterRegistry | None = None):
        self.config = config
        self.probe = probe or PlatformProbe()
        self.registry = registry if registry is not None else host_registry()
        self._rng = random.Random(config.seed)
        self._surrogate: GpuSurrogate | None = None
        self._scratch: StorageScratch | None = None
        self._fixture: Path | None = None
        self._urandom_buf: bytearray | None = None

    def setup(self) -> None:
        scratch_dir = self.config.working_dir / "scratch"
        scratch_dir.mkdir(parents=True, exist_ok=True)
        self._surrogate = GpuSurrogate()
        self._fixture = workloads.write_csv_fixture(scratch_dir / "fixture.csv")
        self._scratch = StorageScratch(scratch_dir / "scratch.bin")
        self._urandom_buf = bytearray(workloads.URANDOM_BYTES)

    def teardown(self) -> None:
        if self._scratch is not None:
            self._scratch.close()
            self._scratch = None
        self._urandom_buf = None

    def now(self) -> float:
        return time.time()

    def preflight(self) -> StabilityReport:
        return preflight(self.config, self.probe)

    def read_temperature(self) -> float:
        return read_temperature(self.probe)

    def backend_names(self) -> dict[str, str]:
        return {"gpu": self._surrogate.backend_name if self._surrogate else "none",
                "hash": workloads.HASH_FUNCTION_NAME}

    def executable(self, binding: FeatureBinding):
        if self._scratch is None or self._surrogate is None:
            raise SessionError("adapter not set up")
        kind = binding.workload_id
        if kind == "cpu_sleep":
            duration = float(binding.variant)
            return None, lambda: time.sleep(duration)
        if kind == "cpu_string_hash":
            seed = self.config.seed
            return None, lambda: workloads.run_string_hash(FIXED_HASH_PAYLOAD, seed)
        if kind == "cpu_pseudo_random":
            return None, self._rng.random
        if kind == "cpu_urandom":
            buf = self._urandom_buf
            return None, lambda: workloads.run_urandom(buf)
        if kind == "cpu_fib":
            return None, lambda: workloads.run_fib(workloads.FIB_N)
        if kind.startswith("gpu_"):
            surrogate = self._surrogate
            return None, lambda: workloads.run_gpu_surrogate(kind, surrogate)
        if kind == "mem_list_creation":
            return None, workloads.run_list_creation
        if kind == "mem_reserve":
            return None, workloads.run_mem_reserve
        if kind == "mem_csv_read":
            fixture = self._fixture
            return None, lambda: workloads.run_csv_read(fixture)
        if kind == "storage_read":
            rep = int(binding.variant)
            return (lambda: self._scratch.invalidate(rep)), (lambda: self._scratch.read_op(rep))
        if kind == "storage_write":
            rep = int(binding.variant)
            return None, lambda: self._scratch.write_op(rep)
        raise SessionError(f"no executable for workload kind {kind!r}")


class VirtualAdapter:
    """Session backend for a simulated device running in virtual time."""

    is_virtual = True

    def __init__(self, runtime: VirtualDeviceRuntime):
        self.runtime = runtime
        self.registry = runtime.registry()

    @classmethod
    def for_device(cls, device: VirtualDevice, start_time: float,
                   sample_seed: int | None = None) -> "VirtualAdapter":
        return cls(VirtualDeviceRuntime(device, start_time, sample_seed))

    def setup(self) -> None:
        pass

    def teardown(self) -> None:
        pass

    def now(self) -> float:
        return self.runtime.now()

    def preflight(self) -> StabilityReport:
        return simulated_stability_report()

    def read_temperature(self) -> float:
        return self.runtime.read_temperature()

    def backend_names(self) -> dict[str, str]:
        return {"gpu": "simulator", "hash": "simulator"}

    def executable(self, binding: FeatureBinding):
        return self.runtime.executable(binding)


def collect_sample(config: SessionConfig, adapter) -> schema.SampleVector:
    """Assemble one complete row: timestamp, temperature, then every feature
    in schema order, each measured through its cross-component bracket.

    Any workload or measurement failure propagates and the partial sample is
    discarded by the caller; no row is ever half-written.
    """
    values = np.empty(schema.DEFAULT_SCHEMA.n_numeric)
    values[schema.TIMESTAMP_INDEX] = adapter.now()
    values[schema.TEMPERATURE_INDEX] = adapter.read_temperature()
    registry = adapter.registry
    for i, binding in enumerate(FEATURE_BINDINGS):
        prepare, workload = adapter.executable(binding)
        if prepare is not None:
            prepare()
        observer = observer_for(registry, binding.target_component)
        measurement = registry.measure(
            observer.id, binding.target_component, binding.column, workload
        )
        values[schema.FEATURE_OFFSET + i] = float(measurement.delta)
    sample = schema.SampleVector(values, config.device_mac)
    sample.validate()
    return sample


def _ensure_mac_model_entry(directory: Path, mac: str, model: str) -> None:
    path = directory / schema.MAC_MODEL_FILENAME
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            existing_mac, _, existing_model = line.partition(",")
            if existing_mac == mac:
                if existing_model != model:
                    raise SessionError(
                        f"{path}: {mac} already registered as {existing_model!r}, "
                        f"not {model!r}"
                    )
                return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"{mac},{model}\n")


def _format_row(sample: schema.SampleVector) -> str:
    cells = ",".join(schema.format_value(v) for v in sample.values)
    return f"{cells},{sample.label}\n"


def run_session(config: SessionConfig, adapter=None, progress=None) -> SessionResult:
    """Run one bounded collection session.

    Appends at most ``samples_per_session`` rows to ``<MAC>.csv`` under the
    working directory, emits the session journal beside it, and stops. A
    ``progress`` callable, if given, is invoked after each appended row;
    raising from it aborts the session cleanly (used by supervisors to stop
    early).
    """
    if adapter is None:
        adapter = HostAdapter(config)
    log = SessionLog()
    log.add("session_start", mac=config.device_mac, model=config.device_model,
            samples_per_session=config.samples_per_session, seed=config.seed,
            virtual=adapter.is_virtual, started_at=adapter.now())

    report = adapter.preflight()
    log.add("preflight", checks=report.to_json(), degraded=report.degraded)
    if config.require_fixed_frequency and report.checks["fixed_frequency"] is not CheckStatus.SATISFIED:
        raise DegradedEnvironment("fixed frequency required but not detected")
    if report.degraded and not config.allow_degraded:
        raise DegradedEnvironment(
            "stability measures missing (degraded host); pass allow_degraded to proceed"
        )

    config.working_dir.mkdir(parents=True, exist_ok=True)
    log_path = config.working_dir / f"{config.device_mac.replace(':', '-')}.session.jsonl"
    csv_path = config.working_dir / f"{config.device_mac}.csv"

    gc_was_enabled = gc.isenabled()
    if not adapter.is_virtual and gc_was_enabled:
        gc.disable()
    adapter.setup()
    rows_written = 0
    abort_reason: str | None = None
    try:
        log.add("backends", **adapter.backend_names())
        observers = sorted(
            {observer_for(adapter.registry, b.target_component).id for b in FEATURE_BINDINGS}
        )
        for observer_id in observers:
            log.add("bracket_overhead", **adapter.registry.measure_overhead(observer_id))

        _ensure_mac_model_entry(config.working_dir, config.device_mac, config.device_model)
        new_file = not csv_path.exists() or csv_path.stat().st_size == 0
        with open(csv_path, "a", encoding="utf-8", newline="") as fh:
            if new_file:
                fh.write(",".join(schema.DEFAULT_SCHEMA.columns) + "\n")
                fh.flush()
            for index in range(config.samples_per_session):
                try:
                    sample = collect_sample(config, adapter)
                except SessionError:
                    raise
                except KeyboardInterrupt:
                    abort_reason = f"interrupted during sample {index}"
                    log.add("sample", index=index, ok=False, error="interrupted")
                    break
                except Exception as exc:  # workload/measurement failure
                    abort_reason = f"sample {index}: {exc}"
                    log.add("sample", index=index, ok=False, error=str(exc))
                    break
                fh.write(_format_row(sample))
                fh.flush()
                rows_written += 1
                log.add("sample", index=index, ok=True, timestamp=sample.timestamp)
                if progress is not None:
                    try:
                        progress(index, sample)
                    except (Exception, KeyboardInterrupt) as exc:
                        abort_reason = f"stopped by supervisor at sample {index}: {exc}"
                        break
    finally:
        adapter.teardown()
        if not adapter.is_virtual and gc_was_enabled:
            gc.enable()
        log.add("session_end", rows_written=rows_written, aborted=abort_reason is not None,
                abort_reason=abort_reason, ended_at=adapter.now())
        log.write(log_path)

    return SessionResult(
        csv_path=csv_path,
        rows_written=rows_written,
        degraded=report.degraded,
        aborted=abort_reason is not None,
        abort_reason=abort_reason,
        log=log,
    )
