"""Synthetic fleets of virtual devices with fixed per-device clock skew.

The physical model: every device multiplies one base oscillator into
per-component frequencies, and manufacturing spread leaves each device with
a fixed CPU and GPU frequency skew plus a fixed per-feature offset. Each
sample adds independent multiplicative jitter, and temperature moves
features through per-feature linear coefficients. Counter readings are
whole counts, so simulated values are rounded to the nearest integer.

For one feature the model is::

    value = base * (1 + (gpu_skew - cpu_skew) * 1e-6 + offset)
                 * (1 + temp_coeff * (T(t) - T_ref))
                 * (1 + eps),        eps ~ Normal(0, jitter_sigma)

where ``base`` is duration * nominal GPU frequency for CPU-side features
(observed in GPU cycles) and the nominal duration in nanoseconds for
everything else (observed in CPU-side time). ``T(t)`` follows a daily
sinusoid plus Gaussian noise and is deterministic in (seed, t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import schema
from .probes import Component, CounterRegistry, CounterSource
from .workloads import FEATURE_BINDINGS, FeatureBinding

PPM = 1e-6
SECONDS_PER_DAY = 86400.0

NON_SLEEP_KINDS = (
    "cpu_string_hash",
    "cpu_pseudo_random",
    "cpu_urandom",
    "cpu_fib",
    "gpu_matrixmul",
    "gpu_matrixsum",
    "gpu_scopy",
    "mem_list_creation",
    "mem_reserve",
    "mem_csv_read",
    "storage_read",
    "storage_write",
)

CPU_SIM_SOURCE_ID = "cpu-sim"
GPU_SIM_SOURCE_ID = "gpu-sim"
TIMER_SIM_SOURCE_ID = "timer-sim"


@dataclass(frozen=True)
class TempProfile:
    """Daily temperature model: mean + amplitude * sin(2*pi*t/day) + noise."""

    mean_c: float = 50.0
    daily_amplitude_c: float = 3.0
    noise_sigma_c: float = 0.3


@dataclass(frozen=True)
class DeviceModelSpec:
    """Nominal frequencies, workload durations, and spread parameters for
    one hardware model.

    ``skew_sigma_ppm`` is the inter-device manufacturing spread of each
    component clock; ``offset_sigma_ppm`` the per-feature device-constant
    spread; ``jitter_sigma`` the per-sample multiplicative noise (relative),
    overridable per workload kind. ``write_center_split`` > 0 puts each
    device's storage-write center on one of two values split by that
    relative amount.
    """

    model_name: str
    cpu_freq_hz: float
    gpu_freq_hz: float
    op_duration_ns: Mapping[str, float]
    skew_sigma_ppm: float = 200.0
    offset_sigma_ppm: float = 600.0
    jitter_sigma: float = 5e-4
    jitter_overrides: Mapping[str, float] = field(default_factory=dict)
    temp_coeff_sleep: float = 0.0
    temp_coeff_other: float = 1e-5
    temp_coeff_overrides: Mapping[str, float] = field(default_factory=dict)
    temp_profile: TempProfile = field(default_factory=TempProfile)
    write_center_split: float = 0.0

    def __post_init__(self):
        if self.cpu_freq_hz <= 0 or self.gpu_freq_hz <= 0:
            raise ValueError("frequencies must be positive")
        if self.skew_sigma_ppm < 0 or self.offset_sigma_ppm < 0 or self.jitter_sigma < 0:
            raise ValueError("spread parameters must be non-negative")
        missing = [k for k in NON_SLEEP_KINDS if k not in self.op_duration_ns]
        if missing:
            raise ValueError(f"op_duration_ns missing kinds: {missing}")


@dataclass(frozen=True)
class ModelVectors:
    """Per-feature arrays derived from a model spec, in schema order."""

    base: np.ndarray          # nominal counter value per feature
    duration_s: np.ndarray    # nominal wall-clock cost per feature
    jitter: np.ndarray        # relative jitter sigma per feature
    temp_coeff: np.ndarray    # relative change per degree C
    is_write: np.ndarray      # storage_write column mask

    @property
    def sample_wallclock_s(self) -> float:
        return float(self.duration_s.sum())


def model_vectors(spec: DeviceModelSpec) -> ModelVectors:
    n = len(FEATURE_BINDINGS)
    base = np.empty(n)
    duration = np.empty(n)
    jitter = np.empty(n)
    coeff = np.empty(n)
    is_write = np.zeros(n, dtype=bool)
    for i, binding in enumerate(FEATURE_BINDINGS):
        kind = binding.workload_id
        if kind == "cpu_sleep":
            dur_s = float(binding.variant)
            base[i] = dur_s * spec.gpu_freq_hz
            coeff[i] = spec.temp_coeff_overrides.get(kind, spec.temp_coeff_sleep)
        else:
            dur_s = spec.op_duration_ns[kind] * 1e-9
            if binding.target_component is Component.CPU:
                base[i] = dur_s * spec.gpu_freq_hz
            else:
                base[i] = spec.op_duration_ns[kind]
            coeff[i] = spec.temp_coeff_overrides.get(kind, spec.temp_coeff_other)
        duration[i] = dur_s
        jitter[i] = spec.jitter_overrides.get(kind, spec.jitter_sigma)
        is_write[i] = kind == "storage_write"
    return ModelVectors(base, duration, jitter, coeff, is_write)


@dataclass(frozen=True)
class VirtualDevice:
    """One simulated device: skews and offsets are fixed for its lifetime."""

    mac: str
    model: DeviceModelSpec
    cpu_skew_ppm: float
    gpu_skew_ppm: float
    feature_offsets: np.ndarray   # (215,) relative, device-constant
    write_center_shift: float     # relative, +/- split/2 (0 when unimodal)
    rng_seed: int


@dataclass(frozen=True)
class FarmConfig:
    models: tuple[tuple[DeviceModelSpec, int], ...]
    master_seed: int = 1
    samples_per_device: int = 100
    start_time: float = 1_700_000_000.0

    def __post_init__(self):
        if any(count < 1 for _, count in self.models):
            raise ValueError("device counts must be >= 1")
        if self.samples_per_device < 1:
            raise ValueError("samples_per_device must be >= 1")


def make_device(spec: DeviceModelSpec, mac: str, device_seed: int) -> VirtualDevice:
    """Draw one device's fixed parameters from the model distributions."""
    rng = np.random.default_rng(device_seed)
    cpu_skew, gpu_skew = rng.normal(0.0, spec.skew_sigma_ppm, size=2)
    offsets = rng.normal(0.0, spec.offset_sigma_ppm * PPM, size=len(FEATURE_BINDINGS))
    if spec.write_center_split > 0:
        side = 1.0 if rng.random() < 0.5 else -1.0
        shift = side * spec.write_center_split / 2.0
    else:
        rng.random()  # keep the draw count fixed across configurations
        shift = 0.0
    rng_seed = int(rng.integers(0, 2**63))
    return VirtualDevice(mac, spec, float(cpu_skew), float(gpu_skew), offsets, shift, rng_seed)


def _device_mac(model_index: int, device_index: int) -> str:
    return f"02:53:42:{model_index:02x}:{device_index >> 8:02x}:{device_index & 0xff:02x}"


def make_farm(config: FarmConfig) -> list[VirtualDevice]:
    """Deterministic fleet: same config, same devices."""
    devices: list[VirtualDevice] = []
    for model_index, (spec, count) in enumerate(config.models):
        for device_index in range(count):
            seed_seq = np.random.SeedSequence(
                [int(config.master_seed), model_index, device_index]
            )
            device_seed = int(seed_seq.generate_state(1, np.uint64)[0])
            mac = _device_mac(model_index, device_index)
            devices.append(make_device(spec, mac, device_seed))
    return devices


def modeled_temperature(profile: TempProfile, t: float) -> float:
    """Noise-free part of T(t); deterministic in t."""
    phase = 2.0 * math.pi * (t % SECONDS_PER_DAY) / SECONDS_PER_DAY
    return profile.mean_c + profile.daily_amplitude_c * math.sin(phase)


def _expectation_vector(device: VirtualDevice, vectors: ModelVectors, temperature_c: float) -> np.ndarray:
    rel = (device.gpu_skew_ppm - device.cpu_skew_ppm) * PPM
    shift = np.where(vectors.is_write, device.write_center_shift, 0.0)
    scale = 1.0 + rel + device.feature_offsets + shift
    temp_factor = 1.0 + vectors.temp_coeff * (temperature_c - device.model.temp_profile.mean_c)
    return vectors.base * scale * temp_factor


def feature_expectation(
    device: VirtualDevice, column: str, t: float, temperature_c: float | None = None
) -> float:
    """Jitter-free closed form for one feature at virtual time ``t``."""
    vectors = model_vectors(device.model)
    if temperature_c is None:
        temperature_c = modeled_temperature(device.model.temp_profile, t)
    i = schema.FEATURE_COLUMNS.index(column)
    return float(_expectation_vector(device, vectors, temperature_c)[i])


def sample_values(
    device: VirtualDevice, vectors: ModelVectors, t: float, rng: np.random.Generator
) -> tuple[float, np.ndarray]:
    """One sample: measured temperature plus all 215 rounded feature values.

    Consumes exactly one scalar normal (temperature noise) and one batch of
    215 normals (per-feature jitter), in that order.
    """
    z = rng.standard_normal()
    temperature = modeled_temperature(device.model.temp_profile, t) + device.model.temp_profile.noise_sigma_c * z
    eps = rng.standard_normal(len(FEATURE_BINDINGS))
    values = _expectation_vector(device, vectors, temperature) * (1.0 + vectors.jitter * eps)
    return temperature, np.maximum(np.rint(values), 1.0)


def simulate_feature(device: VirtualDevice, column: str, t: float, rng: np.random.Generator) -> float:
    """Single-feature draw; advances the generator by two normals."""
    vectors = model_vectors(device.model)
    z = rng.standard_normal()
    temperature = modeled_temperature(device.model.temp_profile, t) + device.model.temp_profile.noise_sigma_c * z
    i = schema.FEATURE_COLUMNS.index(column)
    eps = rng.standard_normal()
    value = _expectation_vector(device, vectors, temperature)[i] * (1.0 + vectors.jitter[i] * eps)
    return float(max(np.rint(value), 1.0))


def simulate_device_rows(
    device: VirtualDevice, n_samples: int, start_time: float
) -> np.ndarray:
    """``(n, 217)`` numeric rows for one device: timestamp, temperature, features."""
    vectors = model_vectors(device.model)
    cost = vectors.sample_wallclock_s
    rng = np.random.default_rng(device.rng_seed)
    rows = np.empty((n_samples, 2 + len(FEATURE_BINDINGS)))
    for k in range(n_samples):
        t = start_time + k * cost
        temperature, values = sample_values(device, vectors, t, rng)
        rows[k, 0] = t
        rows[k, 1] = temperature
        rows[k, 2:] = values
    return rows


def simulate_dataset(
    farm: list[VirtualDevice],
    samples_per_device: int,
    start_time: float = 1_700_000_000.0,
) -> schema.Dataset:
    devices = [schema.DeviceRecord(d.mac, d.model.model_name) for d in farm]
    samples = {
        d.mac: simulate_device_rows(d, samples_per_device, start_time) for d in farm
    }
    return schema.Dataset(devices, samples)


def simulate_farm_dataset(config: FarmConfig) -> schema.Dataset:
    return simulate_dataset(make_farm(config), config.samples_per_device, config.start_time)


class VirtualDeviceRuntime:
    """Counter sources and virtual workload execution for one device.

    Used by the collector to run sessions in virtual time: each workload
    execution advances integer counters so the observer's bracket delta is
    exactly the simulated feature value, and advances the virtual clock by
    the workload's nominal duration. Sessions driven through this runtime
    produce the same rows as :func:`simulate_device_rows` under the same
    seed.
    """

    def __init__(self, device: VirtualDevice, start_time: float, sample_seed: int | None = None):
        self.device = device
        self.vectors = model_vectors(device.model)
        self.start_time = float(start_time)
        self.clock = float(start_time)
        self.samples_done = 0
        self.rng = np.random.default_rng(device.rng_seed if sample_seed is None else sample_seed)
        self._rates = {
            CPU_SIM_SOURCE_ID: 1e9 * (1.0 + device.cpu_skew_ppm * PPM),
            GPU_SIM_SOURCE_ID: device.model.gpu_freq_hz * (1.0 + device.gpu_skew_ppm * PPM),
            TIMER_SIM_SOURCE_ID: 1e9 * (1.0 + device.cpu_skew_ppm * PPM),
        }
        self._counters = {name: 0 for name in self._rates}
        self._sample_temperature: float | None = None
        self._sample_values: np.ndarray | None = None
        self._cursor = 0

    def registry(self) -> CounterRegistry:
        reg = CounterRegistry(include_host_timer=False, idle=self.advance)
        reg.register(
            CounterSource(CPU_SIM_SOURCE_ID, Component.CPU, 1e9),
            lambda: self._counters[CPU_SIM_SOURCE_ID],
        )
        reg.register(
            CounterSource(GPU_SIM_SOURCE_ID, Component.GPU, self.device.model.gpu_freq_hz),
            lambda: self._counters[GPU_SIM_SOURCE_ID],
        )
        reg.register(
            CounterSource(TIMER_SIM_SOURCE_ID, Component.TIMER, 1e9),
            lambda: self._counters[TIMER_SIM_SOURCE_ID],
        )
        return reg

    def now(self) -> float:
        """Virtual time; exact sample-boundary schedule between samples.

        Sessions run on a logical schedule of ``start + k * sample_cost``;
        idling between samples (calibration intervals) does not shift it.
        """
        if self._sample_values is None or self._cursor == len(FEATURE_BINDINGS):
            return self.start_time + self.samples_done * self.vectors.sample_wallclock_s
        return self.clock

    def advance(self, dt: float) -> None:
        """Idle in virtual time (calibration intervals, supervisor waits)."""
        self.clock += dt
        for name, rate in self._rates.items():
            self._counters[name] += int(round(rate * dt))

    def read_temperature(self) -> float:
        """Begin a sample: draw its temperature and feature jitters."""
        if self._sample_values is not None and self._cursor < len(self._sample_values):
            raise RuntimeError("previous sample still in progress")
        self.clock = self.start_time + self.samples_done * self.vectors.sample_wallclock_s
        temperature, values = sample_values(self.device, self.vectors, self.clock, self.rng)
        self._sample_temperature = temperature
        self._sample_values = values
        self._cursor = 0
        return temperature

    def executable(self, binding: FeatureBinding):
        """(prepare, workload) pair for the collector's measurement bracket."""

        def workload():
            if self._sample_values is None:
                raise RuntimeError("read_temperature must start the sample")
            i = self._cursor
            if FEATURE_BINDINGS[i].column != binding.column:
                raise RuntimeError(
                    f"workload order mismatch: expected {FEATURE_BINDINGS[i].column}, "
                    f"got {binding.column}"
                )
            value = int(self._sample_values[i])
            observer = GPU_SIM_SOURCE_ID if binding.target_component is Component.CPU else CPU_SIM_SOURCE_ID
            duration = float(self.vectors.duration_s[i])
            for name, rate in self._rates.items():
                if name == observer:
                    self._counters[name] += value
                else:
                    self._counters[name] += int(round(rate * duration))
            self.clock += duration
            self._cursor += 1
            if self._cursor == len(FEATURE_BINDINGS):
                self.samples_done += 1

        return None, workload


# ---------------------------------------------------------------------------
# Default fleet: four hardware models mirroring a 45-device testbed with a
# 500 MHz GPU on the newest model and 400 MHz on the rest.
# ---------------------------------------------------------------------------

def default_models() -> dict[str, DeviceModelSpec]:
    rpi4 = DeviceModelSpec(
        model_name="RPi4like",
        cpu_freq_hz=1.5e9,
        gpu_freq_hz=5.0e8,
        op_duration_ns={
            "cpu_string_hash": 115_000,
            "cpu_pseudo_random": 2_800,
            "cpu_urandom": 1_350_000_000,
            "cpu_fib": 5_200,
            "gpu_matrixmul": 10_800_000,
            "gpu_matrixsum": 1_250_000,
            "gpu_scopy": 860_000,
            "mem_list_creation": 58_000,
            "mem_reserve": 205_000_000,
            "mem_csv_read": 41_000_000,
            "storage_read": 2_400_000,
            "storage_write": 3_900_000,
        },
        temp_coeff_other=1e-5,
        temp_profile=TempProfile(mean_c=52.0, daily_amplitude_c=3.0, noise_sigma_c=0.3),
        write_center_split=0.01,
    )
    rpi3 = DeviceModelSpec(
        model_name="RPi3like",
        cpu_freq_hz=1.4e9,
        gpu_freq_hz=4.0e8,
        op_duration_ns={
            "cpu_string_hash": 145_000,
            "cpu_pseudo_random": 3_600,
            "cpu_urandom": 2_250_000_000,
            "cpu_fib": 6_800,
            "gpu_matrixmul": 16_500_000,
            "gpu_matrixsum": 2_100_000,
            "gpu_scopy": 1_400_000,
            "mem_list_creation": 76_000,
            "mem_reserve": 310_000_000,
            "mem_csv_read": 63_000_000,
            "storage_read": 3_200_000,
            "storage_write": 5_600_000,
        },
        temp_coeff_other=5e-4,
        temp_profile=TempProfile(mean_c=55.0, daily_amplitude_c=4.0, noise_sigma_c=0.3),
    )
    rpi1 = DeviceModelSpec(
        model_name="RPi1like",
        cpu_freq_hz=7.0e8,
        gpu_freq_hz=4.0e8,
        op_duration_ns={
            "cpu_string_hash": 340_000,
            "cpu_pseudo_random": 8_400,
            "cpu_urandom": 5_600_000_000,
            "cpu_fib": 15_500,
            "gpu_matrixmul": 31_000_000,
            "gpu_matrixsum": 4_300_000,
            "gpu_scopy": 2_700_000,
            "mem_list_creation": 170_000,
            "mem_reserve": 690_000_000,
            "mem_csv_read": 150_000_000,
            "storage_read": 5_500_000,
            "storage_write": 8_900_000,
        },
        temp_coeff_other=1e-5,
        temp_profile=TempProfile(mean_c=47.0, daily_amplitude_c=3.5, noise_sigma_c=0.3),
    )
    zero = DeviceModelSpec(
        model_name="RPiZerolike",
        cpu_freq_hz=1.0e9,
        gpu_freq_hz=4.0e8,
        op_duration_ns={
            "cpu_string_hash": 235_000,
            "cpu_pseudo_random": 5_900,
            "cpu_urandom": 3_900_000_000,
            "cpu_fib": 10_700,
            "gpu_matrixmul": 22_000_000,
            "gpu_matrixsum": 3_000_000,
            "gpu_scopy": 1_900_000,
            "mem_list_creation": 118_000,
            "mem_reserve": 480_000_000,
            "mem_csv_read": 104_000_000,
            "storage_read": 4_600_000,
            "storage_write": 7_300_000,
        },
        temp_coeff_other=1e-5,
        temp_profile=TempProfile(mean_c=44.0, daily_amplitude_c=3.0, noise_sigma_c=0.25),
    )
    return {m.model_name: m for m in (rpi4, rpi3, rpi1, zero)}


DEFAULT_FLEET_COUNTS = (("RPi4like", 15), ("RPi3like", 10), ("RPi1like", 10), ("RPiZerolike", 10))


def default_farm_config(
    master_seed: int = 1,
    samples_per_device: int = 100,
    start_time: float = 1_700_000_000.0,
) -> FarmConfig:
    models = default_models()
    return FarmConfig(
        models=tuple((models[name], count) for name, count in DEFAULT_FLEET_COUNTS),
        master_seed=master_seed,
        samples_per_device=samples_per_device,
        start_time=start_time,
    )


def with_heterogeneous_scales(config: FarmConfig, noisy_jitter: float = 0.03) -> FarmConfig:
    """Raise the jitter of every non-CPU workload kind.

    Produces a farm where feature scales are wildly heterogeneous: CPU
    features stay clean while GPU, memory, and storage features drown in
    noise, which unweighted distance metrics cannot shrug off.
    """
    noisy = {k: noisy_jitter for k in NON_SLEEP_KINDS if not k.startswith("cpu_")}
    models = tuple(
        (replace(spec, jitter_overrides={**spec.jitter_overrides, **noisy}), count)
        for spec, count in config.models
    )
    return replace(config, models=models)


# ---------------------------------------------------------------------------
# JSON configuration
# ---------------------------------------------------------------------------

def model_spec_to_json(spec: DeviceModelSpec) -> dict:
    return {
        "model_name": spec.model_name,
        "cpu_freq_hz": spec.cpu_freq_hz,
        "gpu_freq_hz": spec.gpu_freq_hz,
        "op_duration_ns": dict(spec.op_duration_ns),
        "skew_sigma_ppm": spec.skew_sigma_ppm,
        "offset_sigma_ppm": spec.offset_sigma_ppm,
        "jitter_sigma": spec.jitter_sigma,
        "jitter_overrides": dict(spec.jitter_overrides),
        "temp_coeff_sleep": spec.temp_coeff_sleep,
        "temp_coeff_other": spec.temp_coeff_other,
        "temp_coeff_overrides": dict(spec.temp_coeff_overrides),
        "temp_profile": {
            "mean_c": spec.temp_profile.mean_c,
            "daily_amplitude_c": spec.temp_profile.daily_amplitude_c,
            "noise_sigma_c": spec.temp_profile.noise_sigma_c,
        },
        "write_center_split": spec.write_center_split,
    }


def model_spec_from_json(obj: Mapping) -> DeviceModelSpec:
    profile = obj.get("temp_profile", {})
    return DeviceModelSpec(
        model_name=obj["model_name"],
        cpu_freq_hz=float(obj["cpu_freq_hz"]),
        gpu_freq_hz=float(obj["gpu_freq_hz"]),
        op_duration_ns={k: float(v) for k, v in obj["op_duration_ns"].items()},
        skew_sigma_ppm=float(obj.get("skew_sigma_ppm", 200.0)),
        offset_sigma_ppm=float(obj.get("offset_sigma_ppm", 600.0)),
        jitter_sigma=float(obj.get("jitter_sigma", 5e-4)),
        jitter_overrides={k: float(v) for k, v in obj.get("jitter_overrides", {}).items()},
        temp_coeff_sleep=float(obj.get("temp_coeff_sleep", 0.0)),
        temp_coeff_other=float(obj.get("temp_coeff_other", 1e-5)),
        temp_coeff_overrides={k: float(v) for k, v in obj.get("temp_coeff_overrides", {}).items()},
        temp_profile=TempProfile(
            mean_c=float(profile.get("mean_c", 50.0)),
            daily_amplitude_c=float(profile.get("daily_amplitude_c", 3.0)),
            noise_sigma_c=float(profile.get("noise_sigma_c", 0.3)),
        ),
        write_center_split=float(obj.get("write_center_split", 0.0)),
    )


def farm_config_to_json(config: FarmConfig) -> dict:
    return {
        "master_seed": config.master_seed,
        "samples_per_device": config.samples_per_device,
        "start_time": config.start_time,
        "models": [
            {"count": count, "spec": model_spec_to_json(spec)}
            for spec, count in config.models
        ],
    }


def farm_config_from_json(obj: Mapping) -> FarmConfig:
    return FarmConfig(
        models=tuple(
            (model_spec_from_json(entry["spec"]), int(entry["count"]))
            for entry in obj["models"]
        ),
        master_seed=int(obj.get("master_seed", 1)),
        samples_per_device=int(obj.get("samples_per_device", 100)),
        start_time=float(obj.get("start_time", 1_700_000_000.0)),
    )
