from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skewbench import schema
from skewbench.schema import (
    AGGREGATED_SCHEMA,
    DEFAULT_SCHEMA,
    CellParseError,
    Dataset,
    DatasetError,
    DeviceRecord,
    SampleVector,
    SchemaViolation,
    aggregate_storage_features,
    aggregate_storage_matrix,
    read_dataset,
    write_dataset,
)


def make_row(rng: np.random.Generator, timestamp: float) -> np.ndarray:
    row = np.empty(217)
    row[0] = timestamp
    row[1] = 40.0 + rng.normal(0, 2)
    row[2:] = rng.uniform(1e3, 1e9, size=215)
    return row


def make_dataset(n_devices: int = 2, n_samples: int = 3, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    devices = []
    samples = {}
    for d in range(n_devices):
        mac = f"02:00:00:00:{d >> 8:02x}:{d & 0xFF:02x}"
        devices.append(DeviceRecord(mac, f"model{d % 3}"))
        rows = np.stack([make_row(rng, 1.6e9 + 140.0 * k) for k in range(n_samples)])
        samples[mac] = rows
    return Dataset(devices, samples)


class TestSchemaShape:
    def test_default_column_count(self):
        assert DEFAULT_SCHEMA.n_columns == 218

    def test_default_column_order(self):
        cols = DEFAULT_SCHEMA.columns
        assert cols[0] == "timestamp"
        assert cols[1] == "temperature"
        assert cols[2:7] == ("cpu_sleep_1s", "cpu_sleep_2s", "cpu_sleep_5s",
                             "cpu_sleep_10s", "cpu_sleep_120s")
        assert cols[7:11] == ("cpu_string_hash", "cpu_pseudo_random",
                              "cpu_urandom", "cpu_fib")
        assert cols[11:14] == ("gpu_matrixmul", "gpu_matrixsum", "gpu_scopy")
        assert cols[14:17] == ("mem_list_creation", "mem_reserve", "mem_csv_read")
        assert cols[17] == "storage_read_1"
        assert cols[116] == "storage_read_100"
        assert cols[117] == "storage_write_1"
        assert cols[216] == "storage_write_100"
        assert cols[217] == "mac"

    def test_aggregated_column_count(self):
        # 218 - 200 + 8 = 26
        assert AGGREGATED_SCHEMA.n_columns == 26

    def test_feature_columns_count(self):
        assert len(DEFAULT_SCHEMA.feature_columns) == 215

    def test_mac_validation(self):
        assert schema.is_valid_mac("dc:a6:32:14:a8:d8")
        assert not schema.is_valid_mac("dc:a6:32:14:a8")
        assert not schema.is_valid_mac("DC:A6:32:14:A8:D8")
        with pytest.raises(ValueError):
            DeviceRecord("nonsense", "RPi4")

    def test_model_tag_rejects_separators(self):
        with pytest.raises(ValueError):
            DeviceRecord("02:00:00:00:00:01", "bad,model")


class TestWriteRead:
    def test_single_device_line_count(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=2)
        write_dataset(ds, tmp_path)
        csv_path = tmp_path / f"{ds.devices[0].mac}.csv"
        assert len(csv_path.read_text().splitlines()) == 3  # header + 2 rows
        assert len((tmp_path / "MAC-Model.txt").read_text().splitlines()) == 1

    def test_empty_dataset(self, tmp_path):
        ds = Dataset([], {})
        write_dataset(ds, tmp_path)
        assert (tmp_path / "MAC-Model.txt").read_text() == ""
        assert list(tmp_path.glob("*.csv")) == []
        back = read_dataset(tmp_path)
        assert back.devices == []

    def test_45_device_fleet_shape(self, tmp_path):
        ds = make_dataset(n_devices=45, n_samples=1)
        write_dataset(ds, tmp_path)
        assert len(list(tmp_path.glob("*.csv"))) == 45
        assert len((tmp_path / "MAC-Model.txt").read_text().splitlines()) == 45

    def test_round_trip_identity(self, tmp_path):
        ds = make_dataset(n_devices=3, n_samples=4, seed=7)
        write_dataset(ds, tmp_path)
        back = read_dataset(tmp_path)
        assert back.equals(ds)

    def test_rewrite_byte_identical(self, tmp_path):
        ds = make_dataset(seed=11)
        first = tmp_path / "a"
        second = tmp_path / "b"
        write_dataset(ds, first)
        write_dataset(read_dataset(first), second)
        for path in first.iterdir():
            assert (second / path.name).read_bytes() == path.read_bytes()

    def test_headerless_round_trip(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=2, seed=3)
        write_dataset(ds, tmp_path)
        csv_path = tmp_path / f"{ds.devices[0].mac}.csv"
        lines = csv_path.read_text().splitlines()
        csv_path.write_text("\n".join(lines[1:]) + "\n")
        back = read_dataset(tmp_path)
        assert back.equals(ds)

    def test_column_count_mismatch_names_row(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=2)
        write_dataset(ds, tmp_path)
        csv_path = tmp_path / f"{ds.devices[0].mac}.csv"
        lines = csv_path.read_text().splitlines()
        cells = lines[2].split(",")
        lines[2] = ",".join(cells[:216] + cells[217:])  # drop one column -> 217
        csv_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaViolation, match="row 3"):
            read_dataset(tmp_path)

    def test_non_numeric_cell_location(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=1)
        write_dataset(ds, tmp_path)
        csv_path = tmp_path / f"{ds.devices[0].mac}.csv"
        lines = csv_path.read_text().splitlines()
        cells = lines[1].split(",")
        cells[5] = "oops"
        lines[1] = ",".join(cells)
        csv_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CellParseError, match="cpu_sleep_10s"):
            read_dataset(tmp_path)

    def test_missing_mac_model(self, tmp_path):
        with pytest.raises(DatasetError, match="MAC-Model.txt"):
            read_dataset(tmp_path)

    def test_duplicate_mac_rejected(self, tmp_path):
        dev = DeviceRecord("02:00:00:00:00:01", "m")
        ds = Dataset([dev, DeviceRecord("02:00:00:00:00:01", "m2")], {})
        with pytest.raises(SchemaViolation, match="duplicate"):
            write_dataset(ds, tmp_path)

    def test_label_mismatch_detected(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=1)
        write_dataset(ds, tmp_path)
        csv_path = tmp_path / f"{ds.devices[0].mac}.csv"
        text = csv_path.read_text().replace(ds.devices[0].mac + "\n", "02:ff:ff:ff:ff:ff\n")
        csv_path.write_text(text)
        with pytest.raises(SchemaViolation, match="label"):
            read_dataset(tmp_path)

    def test_decreasing_timestamp_rejected(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=2)
        mac = ds.devices[0].mac
        ds.samples[mac][1, 0] = ds.samples[mac][0, 0] - 10.0
        with pytest.raises(SchemaViolation, match="timestamps"):
            write_dataset(ds, tmp_path)

    def test_nan_cell_rejected(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=1)
        write_dataset(ds, tmp_path)
        csv_path = tmp_path / f"{ds.devices[0].mac}.csv"
        lines = csv_path.read_text().splitlines()
        cells = lines[1].split(",")
        cells[3] = "nan"
        lines[1] = ",".join(cells)
        csv_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaViolation, match="non-finite"):
            read_dataset(tmp_path)


@st.composite
def small_datasets(draw):
    n_devices = draw(st.integers(min_value=0, max_value=3))
    devices = []
    samples = {}
    for d in range(n_devices):
        mac = f"02:aa:00:00:00:{d:02x}"
        devices.append(DeviceRecord(mac, draw(st.sampled_from(["A", "B", "longer-tag"]))))
        n = draw(st.integers(min_value=0, max_value=4))
        vals = draw(
            st.lists(
                st.floats(min_value=1e-3, max_value=1e12, allow_nan=False),
                min_size=n * 215,
                max_size=n * 215,
            )
        )
        rows = np.empty((n, 217))
        base_ts = draw(st.floats(min_value=0, max_value=2e9))
        for k in range(n):
            rows[k, 0] = base_ts + 10.0 * k
            rows[k, 1] = draw(st.floats(min_value=-273.0, max_value=120.0, allow_nan=False))
            rows[k, 2:] = vals[k * 215 : (k + 1) * 215]
        samples[mac] = rows
    return Dataset(devices, samples)


class TestRoundTripProperty:
    @settings(max_examples=25, deadline=None)
    @given(small_datasets())
    def test_read_write_inverse(self, tmp_path_factory, ds):
        directory = tmp_path_factory.mktemp("rt")
        write_dataset(ds, directory)
        assert read_dataset(directory).equals(ds)


class TestStorageAggregation:
    def make_sample(self, reads, writes) -> SampleVector:
        vals = np.empty(217)
        vals[0] = 1.6e9
        vals[1] = 45.0
        vals[2:17] = 1.0
        vals[17:117] = reads
        vals[117:217] = writes
        return SampleVector(vals, "02:00:00:00:00:01")

    def test_sequence_1_to_100(self):
        s = self.make_sample(np.arange(1.0, 101.0), np.full(100, 7.0))
        out = aggregate_storage_features(s)
        assert out.values.shape == (25,)
        reads = out.values[17:21]
        assert reads[0] == pytest.approx(50.5)
        assert reads[1] == pytest.approx(50.5)  # mean of 50th and 51st order stats
        assert reads[2] == 1.0
        assert reads[3] == 100.0

    def test_constant_block(self):
        s = self.make_sample(np.full(100, 7.0), np.full(100, 7.0))
        out = aggregate_storage_features(s)
        assert np.array_equal(out.values[17:21], [7.0, 7.0, 7.0, 7.0])
        assert np.array_equal(out.values[21:25], [7.0, 7.0, 7.0, 7.0])

    def test_non_storage_columns_unchanged(self):
        rng = np.random.default_rng(5)
        s = self.make_sample(rng.uniform(1, 10, 100), rng.uniform(1, 10, 100))
        out = aggregate_storage_features(s)
        assert np.array_equal(out.values[:17], s.values[:17])
        assert out.label == s.label

    def test_matches_streaming_recomputation(self):
        # Independent oracle: recompute every aggregate with a direct loop.
        rng = np.random.default_rng(42)
        reads = rng.lognormal(mean=14.5, sigma=0.1, size=100)
        writes = rng.lognormal(mean=15.0, sigma=0.2, size=100)
        s = self.make_sample(reads, writes)
        out = aggregate_storage_features(s)

        def oracle(block):
            total = 0.0
            lo = float("inf")
            hi = float("-inf")
            for v in block:
                total += v
                lo = min(lo, v)
                hi = max(hi, v)
            ordered = sorted(block)
            median = (ordered[49] + ordered[50]) / 2.0
            return [total / len(block), median, lo, hi]

        assert np.allclose(out.values[17:21], oracle(list(reads)), rtol=1e-12)
        assert np.allclose(out.values[21:25], oracle(list(writes)), rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(100))))
    def test_permutation_invariant(self, perm):
        base = np.linspace(1.0, 3.0, 100)
        s1 = self.make_sample(base, base)
        s2 = self.make_sample(base[perm], base[perm])
        a = aggregate_storage_features(s1).values
        b = aggregate_storage_features(s2).values
        assert np.allclose(a[17:], b[17:], rtol=1e-12)

    def test_matrix_level_matches_per_sample(self):
        ds = make_dataset(n_devices=1, n_samples=5, seed=9)
        mac = ds.devices[0].mac
        rows = ds.samples[mac]
        mat = aggregate_storage_matrix(rows)
        for i in range(len(rows)):
            per_sample = aggregate_storage_features(SampleVector(rows[i], mac))
            assert np.allclose(mat[i], per_sample.values, rtol=1e-12)

    def test_aggregated_round_trip(self, tmp_path):
        ds = make_dataset(n_devices=1, n_samples=3, seed=2)
        mac = ds.devices[0].mac
        agg_rows = aggregate_storage_matrix(ds.samples[mac])
        agg = Dataset(ds.devices, {mac: agg_rows}, AGGREGATED_SCHEMA)
        write_dataset(agg, tmp_path)
        back = read_dataset(tmp_path)
        assert back.schema == AGGREGATED_SCHEMA
        assert back.equals(agg)
