from __future__ import annotations

import gc
import os

import numpy as np
import pytest

from skewbench import collector, schema
from skewbench.collector import (
    CheckStatus,
    DegradedEnvironment,
    HostAdapter,
    PlatformProbe,
    SessionConfig,
    VirtualAdapter,
    collect_sample,
    preflight,
    read_temperature,
    run_session,
    simulated_stability_report,
)
from skewbench.probes import CounterRegistry
from skewbench.simulator import (
    default_models,
    make_device,
    model_vectors,
    simulate_device_rows,
)

MAC = "02:53:42:00:00:07"


def sim_device(seed: int = 7, model: str = "RPi4like"):
    return make_device(default_models()[model], MAC, seed)


def sim_config(tmp_path, samples: int = 3, **overrides) -> SessionConfig:
    defaults = dict(
        device_mac=MAC,
        device_model="RPi4like",
        working_dir=tmp_path,
        samples_per_session=samples,
        seed=3,
    )
    defaults.update(overrides)
    return SessionConfig(**defaults)


class FakeProbe(PlatformProbe):
    """Injectable host answers for preflight tests."""

    def __init__(self, root, *, policy=None, nice=0, env_seed=None, gc_on=True, cpus=4):
        super().__init__(root)
        self._policy = policy
        self._nice = nice
        self._env_seed = env_seed
        self._gc_on = gc_on
        self._cpus = cpus

    def sched_policy(self):
        return self._policy

    def niceness(self):
        return self._nice

    def hash_seed_env(self):
        return self._env_seed

    def gc_enabled(self):
        return self._gc_on

    def cpu_count(self):
        return self._cpus


def fake_sysfs(tmp_path, governors=None, aslr=None, isolated=None, temp_milli=None):
    root = tmp_path / "root"
    if governors is not None:
        for i, gov in enumerate(governors):
            d = root / f"sys/devices/system/cpu/cpu{i}/cpufreq"
            d.mkdir(parents=True)
            (d / "scaling_governor").write_text(gov + "\n")
    if aslr is not None:
        d = root / "proc/sys/kernel"
        d.mkdir(parents=True)
        (d / "randomize_va_space").write_text(aslr + "\n")
    if isolated is not None:
        d = root / "sys/devices/system/cpu"
        d.mkdir(parents=True, exist_ok=True)
        (d / "isolated").write_text(isolated + "\n")
    if temp_milli is not None:
        d = root / "sys/class/thermal/thermal_zone0"
        d.mkdir(parents=True)
        (d / "temp").write_text(f"{temp_milli}\n")
    return root


class TestPreflight:
    def test_bare_host_all_unknown_or_unsatisfied(self, tmp_path):
        probe = FakeProbe(tmp_path / "root", nice=0, env_seed=None, gc_on=True)
        report = preflight(sim_config(tmp_path), probe)
        assert report.degraded
        for status in report.checks.values():
            assert status in (CheckStatus.UNKNOWN, CheckStatus.UNSATISFIED)

    def test_every_measure_appears_exactly_once(self, tmp_path):
        report = preflight(sim_config(tmp_path), FakeProbe(tmp_path))
        assert tuple(report.checks) == collector.STABILITY_CHECKS

    def test_performance_governor_satisfied(self, tmp_path):
        root = fake_sysfs(tmp_path, governors=["performance", "performance"])
        report = preflight(sim_config(tmp_path), FakeProbe(root))
        assert report.checks["fixed_frequency"] is CheckStatus.SATISFIED

    def test_mixed_governor_unsatisfied(self, tmp_path):
        root = fake_sysfs(tmp_path, governors=["performance", "ondemand"])
        report = preflight(sim_config(tmp_path), FakeProbe(root))
        assert report.checks["fixed_frequency"] is CheckStatus.UNSATISFIED

    def test_elevated_priority_detected(self, tmp_path):
        probe = FakeProbe(tmp_path, nice=-15)
        report = preflight(sim_config(tmp_path), probe)
        assert report.checks["kernel_priority"] is CheckStatus.SATISFIED

    def test_realtime_policy_detected(self, tmp_path):
        probe = FakeProbe(tmp_path, policy=collector.SCHED_RR)
        report = preflight(sim_config(tmp_path), probe)
        assert report.checks["kernel_priority"] is CheckStatus.SATISFIED

    def test_aslr_states(self, tmp_path):
        root = fake_sysfs(tmp_path, aslr="0")
        assert preflight(sim_config(tmp_path), FakeProbe(root)).checks["aslr_disabled"] is CheckStatus.SATISFIED
        root2 = fake_sysfs(tmp_path / "two", aslr="2")
        assert preflight(sim_config(tmp_path), FakeProbe(root2)).checks["aslr_disabled"] is CheckStatus.UNSATISFIED

    def test_core_isolation(self, tmp_path):
        root = fake_sysfs(tmp_path, isolated="3")
        config = sim_config(tmp_path, pinned_core=3)
        assert preflight(config, FakeProbe(root)).checks["core_isolation"] is CheckStatus.SATISFIED
        config_wrong = sim_config(tmp_path, pinned_core=1)
        assert preflight(config_wrong, FakeProbe(root)).checks["core_isolation"] is CheckStatus.UNSATISFIED

    def test_single_core_isolation_not_applicable(self, tmp_path):
        probe = FakeProbe(tmp_path, cpus=1)
        assert preflight(sim_config(tmp_path), probe).checks["core_isolation"] is CheckStatus.NOT_APPLICABLE

    def test_hash_seed_and_gc(self, tmp_path):
        probe = FakeProbe(tmp_path, env_seed="0", gc_on=False)
        report = preflight(sim_config(tmp_path), probe)
        assert report.checks["fixed_hash_seed"] is CheckStatus.SATISFIED
        assert report.checks["gc_disabled"] is CheckStatus.SATISFIED

    def test_simulated_all_not_applicable(self):
        report = simulated_stability_report()
        assert not report.degraded
        assert all(s is CheckStatus.NOT_APPLICABLE for s in report.checks.values())


class TestTemperature:
    def test_thermal_zone_read(self, tmp_path):
        root = fake_sysfs(tmp_path, temp_milli=45200)
        assert read_temperature(PlatformProbe(root)) == 45.2

    def test_sentinel_when_unavailable(self, tmp_path):
        assert read_temperature(PlatformProbe(tmp_path / "nowhere")) == -273.0

    def test_simulator_passthrough(self, tmp_path):
        adapter = VirtualAdapter.for_device(sim_device(), start_time=0.0)
        temp = adapter.read_temperature()
        profile = default_models()["RPi4like"].temp_profile
        assert abs(temp - profile.mean_c) < 5.0


class TestCollectSample:
    def test_virtual_sample_matches_simulator_oracle(self, tmp_path):
        device = sim_device(seed=11)
        adapter = VirtualAdapter.for_device(device, start_time=500.0)
        config = sim_config(tmp_path)
        sample = collect_sample(config, adapter)
        expected = simulate_device_rows(device, 1, start_time=500.0)[0]
        assert np.array_equal(sample.values, expected)
        assert sample.label == MAC

    def test_two_samples_monotone_timestamps(self, tmp_path):
        adapter = VirtualAdapter.for_device(sim_device(), start_time=0.0)
        config = sim_config(tmp_path)
        first = collect_sample(config, adapter)
        second = collect_sample(config, adapter)
        assert second.timestamp >= first.timestamp

    def test_exactly_one_workload_invocation_per_bracket(self, tmp_path, monkeypatch):
        counts = []
        original = CounterRegistry.measure

        def spy(self, observer_id, observed_component, workload_id, workload, duration_tag=""):
            calls = [0]

            def counted():
                calls[0] += 1
                return workload()

            result = original(self, observer_id, observed_component, workload_id, counted, duration_tag)
            counts.append(calls[0])
            return result

        monkeypatch.setattr(CounterRegistry, "measure", spy)
        adapter = VirtualAdapter.for_device(sim_device(), start_time=0.0)
        collect_sample(sim_config(tmp_path), adapter)
        assert len(counts) == 215
        assert all(c == 1 for c in counts)

    def test_cpu_features_observed_by_gpu_counter(self, tmp_path):
        device = sim_device()
        adapter = VirtualAdapter.for_device(device, start_time=0.0)
        seen = []
        original = adapter.registry.measure

        def spy(observer_id, observed_component, workload_id, workload, duration_tag=""):
            seen.append((observer_id, workload_id))
            return original(observer_id, observed_component, workload_id, workload, duration_tag)

        adapter.registry.measure = spy
        collect_sample(sim_config(tmp_path), adapter)
        observers = dict(((w, o) for o, w in seen))
        assert observers["cpu_sleep_1s"] == "gpu-sim"
        assert observers["cpu_fib"] == "gpu-sim"
        assert observers["gpu_matrixmul"] == "cpu-sim"
        assert observers["storage_write_100"] == "cpu-sim"


class TestRunSession:
    def test_three_rows(self, tmp_path):
        config = sim_config(tmp_path, samples=3)
        adapter = VirtualAdapter.for_device(sim_device(), start_time=0.0)
        result = run_session(config, adapter)
        assert result.rows_written == 3
        assert not result.aborted
        lines = result.csv_path.read_text().splitlines()
        assert len(lines) == 4  # header + 3 rows
        ds = schema.read_dataset(tmp_path)
        assert ds.n_samples == 3
        assert ds.devices == [schema.DeviceRecord(MAC, "RPi4like")]

    def test_session_rows_equal_direct_simulation(self, tmp_path):
        device = sim_device(seed=23)
        config = sim_config(tmp_path, samples=4)
        run_session(config, VirtualAdapter.for_device(device, start_time=100.0))
        ds = schema.read_dataset(tmp_path)
        direct = simulate_device_rows(device, 4, start_time=100.0)
        assert np.array_equal(ds.rows(MAC), direct)

    def test_byte_identical_under_fixed_seed(self, tmp_path):
        for sub in ("a", "b"):
            device = sim_device(seed=5)
            config = sim_config(tmp_path / sub, samples=5)
            run_session(config, VirtualAdapter.for_device(device, start_time=0.0))
        a = (tmp_path / "a" / f"{MAC}.csv").read_bytes()
        b = (tmp_path / "b" / f"{MAC}.csv").read_bytes()
        assert a == b

    def test_kill_injection_leaves_valid_csv(self, tmp_path):
        for kill_at in (0, 2, 4):
            out = tmp_path / f"kill{kill_at}"
            device = sim_device(seed=kill_at)

            def killer(index, sample):
                if index == kill_at:
                    raise KeyboardInterrupt("injected kill")

            config = sim_config(out, samples=6)
            result = run_session(config, VirtualAdapter.for_device(device, 0.0), progress=killer)
            assert result.aborted
            assert result.rows_written == kill_at + 1
            ds = schema.read_dataset(out)  # parses with the full schema
            assert ds.n_samples == kill_at + 1

    def test_degraded_host_refused_without_flag(self, tmp_path):
        config = sim_config(tmp_path, samples=1, allow_degraded=False)
        probe = FakeProbe(tmp_path / "root")
        adapter = HostAdapter(config, probe=probe)
        with pytest.raises(DegradedEnvironment):
            run_session(config, adapter)
        assert not (tmp_path / f"{MAC}.csv").exists()

    def test_require_fixed_frequency(self, tmp_path):
        config = sim_config(tmp_path, samples=1, allow_degraded=True, require_fixed_frequency=True)
        adapter = HostAdapter(config, probe=FakeProbe(tmp_path / "root"))
        with pytest.raises(DegradedEnvironment, match="fixed frequency"):
            run_session(config, adapter)

    def test_virtual_session_not_degraded(self, tmp_path):
        config = sim_config(tmp_path, samples=1, allow_degraded=False)
        result = run_session(config, VirtualAdapter.for_device(sim_device(), 0.0))
        assert not result.degraded
        assert result.rows_written == 1

    def test_session_log_written(self, tmp_path):
        config = sim_config(tmp_path, samples=2)
        run_session(config, VirtualAdapter.for_device(sim_device(), 0.0))
        log_path = tmp_path / f"{MAC.replace(':', '-')}.session.jsonl"
        lines = log_path.read_text().splitlines()
        import json

        events = [json.loads(line) for line in lines]
        kinds = [e["event"] for e in events]
        assert kinds[0] == "session_start"
        assert "preflight" in kinds
        assert "bracket_overhead" in kinds
        assert kinds[-1] == "session_end"
        assert sum(1 for e in events if e["event"] == "sample") == 2

    def test_supervisor_restart_appends(self, tmp_path):
        device = sim_device(seed=9)
        cost = model_vectors(device.model).sample_wallclock_s
        config = sim_config(tmp_path, samples=2)
        run_session(config, VirtualAdapter.for_device(device, start_time=0.0))
        run_session(config, VirtualAdapter.for_device(device, start_time=2 * cost))
        ds = schema.read_dataset(tmp_path)
        assert ds.n_samples == 4

    def test_mac_model_conflict_rejected(self, tmp_path):
        run_session(sim_config(tmp_path, samples=1), VirtualAdapter.for_device(sim_device(), 0.0))
        other = sim_config(tmp_path, samples=1, device_model="SomethingElse")
        with pytest.raises(collector.SessionError, match="already registered"):
            run_session(other, VirtualAdapter.for_device(sim_device(), 1e6))

    def test_gc_restored_after_session(self, tmp_path):
        assert gc.isenabled()
        config = sim_config(tmp_path, samples=1)
        run_session(config, VirtualAdapter.for_device(sim_device(), 0.0))
        assert gc.isenabled()
