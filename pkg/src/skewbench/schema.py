"""Dataset schema and on-disk interchange for device benchmark samples.

A dataset is a directory with one CSV file per device, named after the
device MAC address, plus a ``MAC-Model.txt`` file mapping each MAC to its
hardware model tag. Every CSV row is one sample: Unix timestamp, core
temperature, 215 performance features, and the MAC label, in a fixed order
of 218 columns.

Numeric cells are written with ``repr`` so floats round-trip exactly and a
re-write of a freshly read dataset is byte-identical.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CPU_SLEEP_DURATIONS_S: tuple[int, ...] = (1, 2, 5, 10, 120)
STORAGE_REPETITIONS = 100

CONTEXT_COLUMNS = ("timestamp", "temperature")
SLEEP_COLUMNS = tuple(f"cpu_sleep_{d}s" for d in CPU_SLEEP_DURATIONS_S)
CPU_OP_COLUMNS = ("cpu_string_hash", "cpu_pseudo_random", "cpu_urandom", "cpu_fib")
GPU_COLUMNS = ("gpu_matrixmul", "gpu_matrixsum", "gpu_scopy")
MEMORY_COLUMNS = ("mem_list_creation", "mem_reserve", "mem_csv_read")
STORAGE_READ_COLUMNS = tuple(f"storage_read_{i}" for i in range(1, STORAGE_REPETITIONS + 1))
STORAGE_WRITE_COLUMNS = tuple(f"storage_write_{i}" for i in range(1, STORAGE_REPETITIONS + 1))
STORAGE_AGGREGATE_STATS = ("avg", "median", "min", "max")
LABEL_COLUMN = "mac"

FEATURE_COLUMNS = (
    SLEEP_COLUMNS
    + CPU_OP_COLUMNS
    + GPU_COLUMNS
    + MEMORY_COLUMNS
    + STORAGE_READ_COLUMNS
    + STORAGE_WRITE_COLUMNS
)

STORAGE_AGGREGATE_COLUMNS = tuple(
    f"storage_{direction}_{stat}"
    for direction in ("read", "write")
    for stat in STORAGE_AGGREGATE_STATS
)

MAC_MODEL_FILENAME = "MAC-Model.txt"

# Numeric-part indices (label excluded).
TIMESTAMP_INDEX = 0
TEMPERATURE_INDEX = 1
FEATURE_OFFSET = 2
STORAGE_READ_SLICE = slice(17, 117)
STORAGE_WRITE_SLICE = slice(117, 217)

# Temperature sentinel for platforms with no readable thermal zone.
TEMPERATURE_UNAVAILABLE_C = -273.0

_MAC_PATTERN = re.compile(r"^[0-9a-f]{2}(:[0-9a-f]{2}){5}$")


class DatasetError(Exception):
    """Base class for dataset format and I/O errors."""


class SchemaViolation(DatasetError):
    """A row or file does not conform to the fixed column contract."""


class CellParseError(DatasetError):
    """A cell that must be numeric could not be parsed."""


class DatasetWriteError(DatasetError):
    """Write aborted partway; carries the files already written."""

    def __init__(self, message: str, written: list[str]):
        super().__init__(message)
        self.written = written


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered column names; the label column is always last."""

    columns: tuple[str, ...]

    def __post_init__(self):
        if self.columns[-1] != LABEL_COLUMN:
            raise ValueError(f"last column must be {LABEL_COLUMN!r}")
        if self.columns[:2] != CONTEXT_COLUMNS:
            raise ValueError(f"first columns must be {CONTEXT_COLUMNS}")

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def n_numeric(self) -> int:
        return len(self.columns) - 1

    @property
    def feature_columns(self) -> tuple[str, ...]:
        """Performance columns: everything between the context pair and the label."""
        return self.columns[FEATURE_OFFSET:-1]

    def index(self, column: str) -> int:
        return self.columns.index(column)


DEFAULT_SCHEMA = FeatureSchema(CONTEXT_COLUMNS + FEATURE_COLUMNS + (LABEL_COLUMN,))

AGGREGATED_SCHEMA = FeatureSchema(
    CONTEXT_COLUMNS
    + SLEEP_COLUMNS
    + CPU_OP_COLUMNS
    + GPU_COLUMNS
    + MEMORY_COLUMNS
    + STORAGE_AGGREGATE_COLUMNS
    + (LABEL_COLUMN,)
)

assert DEFAULT_SCHEMA.n_columns == 218
assert AGGREGATED_SCHEMA.n_columns == 26

_KNOWN_SCHEMAS = {s.n_columns: s for s in (DEFAULT_SCHEMA, AGGREGATED_SCHEMA)}


def is_valid_mac(mac: str) -> bool:
    return bool(_MAC_PATTERN.match(mac))


@dataclass(frozen=True, eq=False)
class SampleVector:
    """One dataset row: numeric values in schema order plus the MAC label."""

    values: np.ndarray
    label: str

    def validate(self, schema: FeatureSchema = DEFAULT_SCHEMA) -> None:
        if self.values.shape != (schema.n_numeric,):
            raise SchemaViolation(
                f"expected {schema.n_numeric} numeric values, got {self.values.shape}"
            )
        if not is_valid_mac(self.label):
            raise SchemaViolation(f"label is not a MAC address: {self.label!r}")
        if not np.all(np.isfinite(self.values)):
            raise SchemaViolation("sample contains non-finite values")
        perf = self.values[FEATURE_OFFSET:]
        if not np.all(perf > 0):
            raise SchemaViolation("performance values must be strictly positive")

    def value(self, column: str, schema: FeatureSchema = DEFAULT_SCHEMA) -> float:
        return float(self.values[schema.index(column)])

    @property
    def timestamp(self) -> float:
        return float(self.values[TIMESTAMP_INDEX])

    @property
    def temperature(self) -> float:
        return float(self.values[TEMPERATURE_INDEX])


@dataclass(frozen=True)
class DeviceRecord:
    """Associates a device MAC with its hardware model tag."""

    mac: str
    model: str

    def __post_init__(self):
        object.__setattr__(self, "mac", self.mac.lower())
        if not is_valid_mac(self.mac):
            raise ValueError(f"not a MAC address: {self.mac!r}")
        if not self.model or any(c in self.model for c in ",\n\r"):
            raise ValueError(f"invalid model tag: {self.model!r}")


@dataclass
class Dataset:
    """Devices plus per-device sample matrices in schema order.

    ``samples`` maps each MAC to an ``(n, n_numeric)`` float64 array; the
    label column is implied by the key.
    """

    devices: list[DeviceRecord]
    samples: dict[str, np.ndarray]
    schema: FeatureSchema = DEFAULT_SCHEMA

    def validate(self) -> None:
        macs = [d.mac for d in self.devices]
        if len(set(macs)) != len(macs):
            raise SchemaViolation("duplicate MAC in device records")
        unknown = set(self.samples) - set(macs)
        if unknown:
            raise SchemaViolation(f"samples for unknown devices: {sorted(unknown)}")
        width = self.schema.n_numeric
        for mac, rows in self.samples.items():
            if rows.ndim != 2 or rows.shape[1] != width:
                raise SchemaViolation(
                    f"device {mac}: expected shape (n, {width}), got {rows.shape}"
                )
            if rows.size == 0:
                continue
            if not np.all(np.isfinite(rows)):
                raise SchemaViolation(f"device {mac}: non-finite values")
            if not np.all(rows[:, FEATURE_OFFSET:] > 0):
                raise SchemaViolation(f"device {mac}: non-positive performance values")
            ts = rows[:, TIMESTAMP_INDEX]
            if np.any(np.diff(ts) < 0):
                raise SchemaViolation(f"device {mac}: timestamps decrease")

    def rows(self, mac: str) -> np.ndarray:
        return self.samples.get(mac, np.empty((0, self.schema.n_numeric)))

    def sample_vectors(self, mac: str) -> list[SampleVector]:
        return [SampleVector(row.copy(), mac) for row in self.rows(mac)]

    def model_of(self, mac: str) -> str:
        for dev in self.devices:
            if dev.mac == mac:
                return dev.model
        raise KeyError(mac)

    @property
    def n_samples(self) -> int:
        return sum(len(rows) for rows in self.samples.values())

    def equals(self, other: "Dataset") -> bool:
        return (
            self.schema == other.schema
            and self.devices == other.devices
            and set(self.samples) == set(other.samples)
            and all(np.array_equal(self.samples[m], other.samples[m]) for m in self.samples)
        )


def format_value(v: float) -> str:
    """Shortest decimal representation that round-trips to the same float."""
    return repr(float(v))


def write_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write one ``<MAC>.csv`` per device plus ``MAC-Model.txt``.

    Raises :class:`DatasetWriteError` on I/O failure, listing the files
    already written so the caller can report or clean up the partial state.
    """
    dataset.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = ",".join(dataset.schema.columns)
    written: list[str] = []
    try:
        mac_model = directory / MAC_MODEL_FILENAME
        with open(mac_model, "w", encoding="utf-8", newline="") as fh:
            for dev in dataset.devices:
                fh.write(f"{dev.mac},{dev.model}\n")
        written.append(str(mac_model))
        for dev in dataset.devices:
            path = directory / f"{dev.mac}.csv"
            rows = dataset.rows(dev.mac)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(header + "\n")
                for row in rows:
                    cells = ",".join(format_value(v) for v in row)
                    fh.write(f"{cells},{dev.mac}\n")
            written.append(str(path))
    except OSError as exc:
        raise DatasetWriteError(
            f"dataset write aborted ({exc}); files already written: {written}", written
        ) from exc


def _detect_schema(first_cells: list[str], path: Path) -> tuple[FeatureSchema, bool]:
    """Return (schema, header_present). Header is detected by the first cell."""
    if first_cells[0] == "timestamp":
        for schema in _KNOWN_SCHEMAS.values():
            if tuple(first_cells) == schema.columns:
                return schema, True
        raise SchemaViolation(f"{path}: header does not match any known schema")
    schema = _KNOWN_SCHEMAS.get(len(first_cells))
    if schema is None:
        raise SchemaViolation(
            f"{path}: row 1 has {len(first_cells)} columns; expected one of "
            f"{sorted(_KNOWN_SCHEMAS)}"
        )
    return schema, False


def _parse_row(cells: list[str], schema: FeatureSchema, mac: str, path: Path, lineno: int) -> np.ndarray:
    if len(cells) != schema.n_columns:
        raise SchemaViolation(
            f"{path}: row {lineno}: expected {schema.n_columns} columns, got {len(cells)}"
        )
    if cells[-1].lower() != mac:
        raise SchemaViolation(
            f"{path}: row {lineno}: label {cells[-1]!r} does not match device MAC {mac}"
        )
    out = np.empty(schema.n_numeric)
    for i, cell in enumerate(cells[:-1]):
        try:
            out[i] = float(cell)
        except ValueError:
            raise CellParseError(
                f"{path}: row {lineno}: column {schema.columns[i]!r}: "
                f"not numeric: {cell!r}"
            ) from None
        if not math.isfinite(out[i]):
            raise SchemaViolation(
                f"{path}: row {lineno}: column {schema.columns[i]!r}: non-finite value"
            )
    return out


def _read_device_csv(path: Path, mac: str) -> tuple[np.ndarray | None, FeatureSchema | None]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        return None, None
    schema, has_header = _detect_schema(lines[0].split(","), path)
    data_lines = lines[1:] if has_header else lines
    rows = np.empty((len(data_lines), schema.n_numeric))
    start = 2 if has_header else 1
    for i, line in enumerate(data_lines):
        rows[i] = _parse_row(line.split(","), schema, mac, path, start + i)
    return rows, schema


def read_dataset(directory: str | Path) -> Dataset:
    """Inverse of :func:`write_dataset`; values round-trip exactly."""
    directory = Path(directory)
    mac_model = directory / MAC_MODEL_FILENAME
    if not mac_model.exists():
        raise DatasetError(f"missing {MAC_MODEL_FILENAME} in {directory}")
    devices: list[DeviceRecord] = []
    seen: set[str] = set()
    with open(mac_model, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            mac, sep, model = line.partition(",")
            if not sep:
                raise SchemaViolation(f"{mac_model}: line {lineno}: expected 'MAC,model'")
            try:
                record = DeviceRecord(mac.strip(), model.strip())
            except ValueError as exc:
                raise SchemaViolation(f"{mac_model}: line {lineno}: {exc}") from None
            if record.mac in seen:
                raise SchemaViolation(f"{mac_model}: line {lineno}: duplicate MAC {record.mac}")
            seen.add(record.mac)
            devices.append(record)

    schema: FeatureSchema | None = None
    samples: dict[str, np.ndarray] = {}
    for dev in devices:
        path = directory / f"{dev.mac}.csv"
        if not path.exists():
            continue
        rows, file_schema = _read_device_csv(path, dev.mac)
        if file_schema is not None:
            if schema is not None and file_schema != schema:
                raise SchemaViolation(f"{path}: schema differs from other files in {directory}")
            schema = file_schema
        if rows is not None:
            samples[dev.mac] = rows

    resolved = schema or DEFAULT_SCHEMA
    for dev in devices:
        samples.setdefault(dev.mac, np.empty((0, resolved.n_numeric)))
    dataset = Dataset(devices, samples, resolved)
    dataset.validate()
    return dataset


def _storage_aggregates(block: np.ndarray) -> np.ndarray:
    # Median of an even-length block is the mean of the two central order
    # statistics, which is what np.median computes.
    return np.array([block.mean(), float(np.median(block)), block.min(), block.max()])


def aggregate_storage_features(sample: SampleVector) -> SampleVector:
    """Collapse the 200 storage columns to avg/median/min/max per direction.

    The result conforms to :data:`AGGREGATED_SCHEMA` (26 columns including
    the label); all non-storage columns are unchanged.
    """
    sample.validate(DEFAULT_SCHEMA)
    vals = sample.values
    head = vals[: STORAGE_READ_SLICE.start]
    reads = _storage_aggregates(vals[STORAGE_READ_SLICE])
    writes = _storage_aggregates(vals[STORAGE_WRITE_SLICE])
    return SampleVector(np.concatenate([head, reads, writes]), sample.label)


def aggregate_storage_matrix(values: np.ndarray) -> np.ndarray:
    """Vectorized storage aggregation over an ``(n, 217)`` numeric matrix."""
    head = values[:, : STORAGE_READ_SLICE.start]
    out = [head]
    for sl in (STORAGE_READ_SLICE, STORAGE_WRITE_SLICE):
        block = values[:, sl]
        out.append(
            np.column_stack(
                [
                    block.mean(axis=1),
                    np.median(block, axis=1),
                    block.min(axis=1),
                    block.max(axis=1),
                ]
            )
        )
    return np.hstack(out)
