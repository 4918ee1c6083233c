"""Column typing, scaling, windowing and timestamp features for mixed-type tables.

A raw table (``pandas.DataFrame``) is described by a :class:`TableSchema`. The
schema classifies every modeled column as continuous, binary or categorical and
carries the parameters needed to map the table into a model-ready array and back.

Modeled columns are laid out in the processed array as ``[binary, categorical,
continuous]``; the original column order is kept in ``TableSchema.features`` and
restored by :func:`inverse_transform`.
"""
from __future__ import annotations

import hashlib
import json
import numbers
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd


class SchemaError(ValueError):
    """Raised when a table cannot be described by, or does not match, a schema."""


class FeatureKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    CATEGORICAL = "categorical"
    TIMESTAMP = "timestamp"
    ENTITY_LABEL = "entity_label"


DISCRETE_KINDS = (FeatureKind.BINARY, FeatureKind.CATEGORICAL)
MODELED_KINDS = (FeatureKind.BINARY, FeatureKind.CATEGORICAL, FeatureKind.CONTINUOUS)

# Fields of the integer timestamp array, in order.
TS_FIELDS = ("YEAR", "MONTH", "DATE", "HOURS")


@dataclass
class FeatureSpec:
    name: str
    kind: FeatureKind
    dtype: str = "float"  # original storage type: float, int, str, bool, datetime
    cardinality: Optional[int] = None
    scale_min: Optional[float] = None
    scale_max: Optional[float] = None
    categories: Optional[list] = None  # index -> original value

    def __post_init__(self):
        self.kind = FeatureKind(self.kind)
        if self.categories is not None:
            self.categories = list(self.categories)
            self.cardinality = len(self.categories)
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"column {self.name!r}: category list is not a bijection")
        if self.kind is FeatureKind.BINARY and self.cardinality not in (None, 2):
            raise SchemaError(f"column {self.name!r}: binary feature needs exactly 2 categories")
        if (
            self.scale_min is not None
            and self.scale_max is not None
            and self.scale_min > self.scale_max
        ):
            raise SchemaError(f"column {self.name!r}: scale_min > scale_max")

    @property
    def is_discrete(self) -> bool:
        return self.kind in DISCRETE_KINDS

    @property
    def category_map(self) -> dict:
        return {value: i for i, value in enumerate(self.categories or [])}


@dataclass
class TableSchema:
    features: list[FeatureSpec]
    distinct_threshold: int = 25
    timestamp_column: Optional[str] = None
    entity_column: Optional[str] = None
    datetime_format: Optional[str] = None
    n_years: int = 1

    @property
    def binary(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind is FeatureKind.BINARY]

    @property
    def categorical(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind is FeatureKind.CATEGORICAL]

    @property
    def continuous(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind is FeatureKind.CONTINUOUS]

    @property
    def modeled(self) -> list[FeatureSpec]:
        """Modeled features in processed-array order: binary, categorical, continuous."""
        return self.binary + self.categorical + self.continuous

    @property
    def F(self) -> int:
        return len(self.modeled)

    @property
    def m(self) -> int:
        return len(self.binary) + len(self.categorical)

    @property
    def c(self) -> int:
        return len(self.continuous)

    @property
    def entity(self) -> Optional[FeatureSpec]:
        for f in self.features:
            if f.kind is FeatureKind.ENTITY_LABEL:
                return f
        return None

    @property
    def has_timestamps(self) -> bool:
        return self.timestamp_column is not None

    def index_of(self, name: str) -> int:
        """Position of a modeled column in the processed array."""
        for i, f in enumerate(self.modeled):
            if f.name == name:
                return i
        raise KeyError(f"unknown modeled column {name!r}")

    def discrete_mask(self) -> np.ndarray:
        return np.array([f.is_discrete for f in self.modeled], dtype=bool)

    def to_dict(self) -> dict:
        out = asdict(self)
        for f in out["features"]:
            f["kind"] = FeatureKind(f["kind"]).value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TableSchema":
        data = dict(data)
        data["features"] = [FeatureSpec(**f) for f in data["features"]]
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "TableSchema":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class ProcessedBatch:
    """Model-ready arrays.

    ``x_proc`` is ``(B, T, F)``; ``ts`` is ``(B, T, 4)`` integer YEAR, MONTH,
    DATE (day of year) and HOURS. Before windowing ``B == 1`` and ``entity``
    holds per-row entity codes for multi-sequence tables; after windowing
    ``labels`` holds one entity code per window.
    """

    x_proc: np.ndarray
    t: np.ndarray
    ts: np.ndarray
    labels: Optional[np.ndarray] = None
    entity: Optional[np.ndarray] = None

    @property
    def B(self) -> int:
        return self.x_proc.shape[0]

    @property
    def T(self) -> int:
        return self.x_proc.shape[1]

    @property
    def F(self) -> int:
        return self.x_proc.shape[2]


@dataclass
class WindowConfig:
    T: int = 24
    stride: int = 1
    multi_sequence: bool = False
    min_entity_length: Optional[int] = None

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"window length must be >= 2, got {self.T}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


def _python_scalar(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return value


def _column_dtype(name: str, col: pd.Series) -> str:
    if pd.api.types.is_bool_dtype(col):
        return "bool"
    if pd.api.types.is_integer_dtype(col):
        return "int"
    if pd.api.types.is_float_dtype(col):
        return "float"
    values = col.tolist()
    is_str = [isinstance(v, str) for v in values]
    if all(is_str):
        return "str"
    is_num = [isinstance(v, numbers.Number) and not isinstance(v, bool) for v in values]
    if any(is_str) and any(is_num):
        raise SchemaError(f"column {name!r} mixes numbers and strings")
    if all(isinstance(v, (bool, np.bool_)) for v in values):
        return "bool"
    if all(isinstance(v, numbers.Integral) for v in values):
        return "int"
    if all(is_num):
        return "float"
    raise SchemaError(f"column {name!r} has unsupported value types")


def infer_schema(
    table: pd.DataFrame,
    distinct_threshold: int = 25,
    timestamp_column: Optional[str] = None,
    entity_column: Optional[str] = None,
    datetime_format: Optional[str] = None,
    columns: Optional[Sequence[str]] = None,
) -> TableSchema:
    """Classify columns and fit scaling parameters and category maps.

    Real-valued columns and integer columns with more than ``distinct_threshold``
    distinct values are continuous; strings, booleans and integer columns with at
    most ``distinct_threshold`` distinct values are discrete (binary for exactly
    two values, categorical otherwise).
    """
    if len(table) == 0 or len(table.columns) == 0:
        raise SchemaError("table is empty")
    if distinct_threshold < 2:
        raise ValueError("distinct_threshold must be >= 2")
    names = list(columns) if columns is not None else list(table.columns)
    for special in (timestamp_column, entity_column):
        if special is not None and special not in table.columns:
            raise SchemaError(f"column {special!r} not found in table")

    features: list[FeatureSpec] = []
    n_years = 1
    for name in names:
        if name not in table.columns:
            raise SchemaError(f"column {name!r} not found in table")
        col = table[name]
        if col.isna().all():
            raise SchemaError(f"column {name!r} is empty")
        if col.isna().any():
            raise SchemaError(f"column {name!r} has missing values")
        if name == timestamp_column:
            stamps = _parse_datetimes(col, datetime_format)
            n_years = int(stamps.dt.year.max() - stamps.dt.year.min() + 1)
            features.append(FeatureSpec(name, FeatureKind.TIMESTAMP, dtype="datetime"))
            continue
        dtype = _column_dtype(name, col)
        if name == entity_column:
            cats = sorted(_python_scalar(v) for v in col.unique())
            features.append(
                FeatureSpec(name, FeatureKind.ENTITY_LABEL, dtype=dtype, categories=cats)
            )
            continue
        n_distinct = col.nunique()
        continuous = dtype == "float" or (dtype == "int" and n_distinct > distinct_threshold)
        if continuous:
            values = col.to_numpy(dtype=float)
            features.append(
                FeatureSpec(
                    name,
                    FeatureKind.CONTINUOUS,
                    dtype=dtype,
                    scale_min=float(values.min()),
                    scale_max=float(values.max()),
                )
            )
        else:
            cats = sorted(_python_scalar(v) for v in col.unique())
            kind = FeatureKind.BINARY if len(cats) == 2 else FeatureKind.CATEGORICAL
            features.append(FeatureSpec(name, kind, dtype=dtype, categories=cats))

    return TableSchema(
        features=features,
        distinct_threshold=distinct_threshold,
        timestamp_column=timestamp_column,
        entity_column=entity_column,
        datetime_format=datetime_format,
        n_years=n_years,
    )


def _parse_datetimes(col: pd.Series, fmt: Optional[str]) -> pd.Series:
    try:
        return pd.to_datetime(col, format=fmt)
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"cannot parse timestamps in column {col.name!r}: {exc}") from exc


def timestamp_fields(stamps: pd.Series) -> np.ndarray:
    """``(L, 4)`` integer array of YEAR, MONTH, day-of-year, HOURS."""
    stamps = pd.to_datetime(stamps)
    return np.stack(
        [
            stamps.dt.year.to_numpy(),
            stamps.dt.month.to_numpy(),
            stamps.dt.dayofyear.to_numpy(),
            stamps.dt.hour.to_numpy(),
        ],
        axis=-1,
    ).astype(np.int64)


def fields_to_timestamps(ts: np.ndarray) -> pd.Series:
    """Inverse of :func:`timestamp_fields` (minutes and seconds are not kept)."""
    ts = np.asarray(ts).reshape(-1, 4)
    base = pd.to_datetime(pd.DataFrame({"year": ts[:, 0], "month": 1, "day": 1}))
    return base + pd.to_timedelta(ts[:, 2] - 1, unit="D") + pd.to_timedelta(ts[:, 3], unit="h")


def _encode_column(spec: FeatureSpec, col: pd.Series) -> np.ndarray:
    if spec.kind is FeatureKind.CONTINUOUS:
        values = col.to_numpy(dtype=float)
        span = spec.scale_max - spec.scale_min
        if span == 0:
            return np.zeros_like(values)
        return (values - spec.scale_min) / span
    mapping = spec.category_map
    values = [_python_scalar(v) for v in col.tolist()]
    unseen = sorted({repr(v) for v in values if v not in mapping})
    if unseen:
        raise SchemaError(f"column {spec.name!r}: unseen categories {', '.join(unseen)}")
    return np.array([mapping[v] for v in values], dtype=float)


def fit_transform(table: pd.DataFrame, schema: TableSchema, refit: bool = True) -> ProcessedBatch:
    """Map a raw table to a single ``(1, L, F)`` processed sequence.

    With ``refit`` the continuous min/max parameters stored in ``schema`` are
    re-estimated from ``table`` (in place). Category maps are never refit, so an
    unseen category raises :class:`SchemaError`.
    """
    missing = [f.name for f in schema.features if f.name not in table.columns]
    if missing:
        raise SchemaError(f"table lacks schema columns: {missing}")
    if refit:
        for spec in schema.continuous:
            values = table[spec.name].to_numpy(dtype=float)
            spec.scale_min, spec.scale_max = float(values.min()), float(values.max())

    L = len(table)
    cols = [_encode_column(spec, table[spec.name]) for spec in schema.modeled]
    x = np.stack(cols, axis=-1) if cols else np.zeros((L, 0))

    if schema.timestamp_column is not None:
        stamps = _parse_datetimes(table[schema.timestamp_column], schema.datetime_format)
        ts = timestamp_fields(stamps)
    else:
        ts = np.zeros((L, 4), dtype=np.int64)

    entity = None
    if schema.entity is not None:
        entity = _encode_column(schema.entity, table[schema.entity.name]).astype(np.int64)[None]
    return ProcessedBatch(
        x_proc=x[None],
        t=normalize_time_index(L) if L >= 2 else np.zeros(L),
        ts=ts[None],
        entity=entity,
    )


def transform(table: pd.DataFrame, schema: TableSchema) -> ProcessedBatch:
    """Apply a fitted schema without re-estimating any parameter."""
    return fit_transform(table, schema, refit=False)


def inverse_transform(
    x_out: np.ndarray, schema: TableSchema, ts: Optional[np.ndarray] = None
) -> pd.DataFrame:
    """Restore a ``(rows, F)`` processed array to the original column format.

    Continuous values are un-scaled (integer columns rounded), discrete indices
    mapped back to their original values. ``ts`` (``(rows, 4)``), when given,
    rebuilds the timestamp column.
    """
    x_out = np.asarray(x_out, dtype=float)
    if x_out.ndim != 2 or x_out.shape[1] != schema.F:
        raise SchemaError(f"expected array of shape (rows, {schema.F}), got {x_out.shape}")
    columns: dict[str, Any] = {}
    for j, spec in enumerate(schema.modeled):
        v = x_out[:, j]
        if spec.kind is FeatureKind.CONTINUOUS:
            restored = v * (spec.scale_max - spec.scale_min) + spec.scale_min
            if spec.dtype == "int":
                restored = np.rint(restored).astype(np.int64)
            columns[spec.name] = restored
        else:
            idx = np.rint(v).astype(np.int64)
            bad = (idx < 0) | (idx >= spec.cardinality) | (np.abs(v - idx) > 1e-6)
            if bad.any():
                raise SchemaError(
                    f"column {spec.name!r}: invalid category index {v[bad][0]!r} "
                    f"(expected 0..{spec.cardinality - 1})"
                )
            cats = np.empty(spec.cardinality, dtype=object)
            cats[:] = spec.categories
            columns[spec.name] = pd.Series(cats[idx], dtype=_pandas_dtype(spec.dtype))

    if schema.timestamp_column is not None and ts is not None:
        columns[schema.timestamp_column] = fields_to_timestamps(ts).to_numpy()
    order = [f.name for f in schema.features if f.name in columns]
    return pd.DataFrame({name: columns[name] for name in order})


def _pandas_dtype(dtype: str) -> Any:
    return {"int": "int64", "bool": "bool", "float": "float64"}.get(dtype, "object")


def make_windows(processed: ProcessedBatch, cfg: WindowConfig) -> ProcessedBatch:
    """Cut a processed sequence into fixed-length windows.

    Single-sequence data yields every sliding window at ``cfg.stride``;
    multi-sequence data keeps one window per entity, truncated to the first
    ``cfg.T`` rows, for entities with at least ``min_entity_length`` rows.
    """
    if processed.B != 1:
        raise ValueError("make_windows expects an un-windowed batch (B == 1)")
    x, ts = processed.x_proc[0], processed.ts[0]
    T = cfg.T
    if not cfg.multi_sequence:
        L = x.shape[0]
        if L < T:
            raise ValueError(f"sequence length {L} is shorter than window length {T}")
        starts = np.arange(0, L - T + 1, cfg.stride)
        idx = starts[:, None] + np.arange(T)[None, :]
        return ProcessedBatch(x_proc=x[idx], t=normalize_time_index(T), ts=ts[idx])

    if processed.entity is None:
        raise ValueError("multi-sequence windowing needs per-row entity codes")
    entity = processed.entity[0]
    min_len = max(cfg.min_entity_length or T, T)
    windows, stamps, labels = [], [], []
    for code in np.unique(entity):
        rows = np.flatnonzero(entity == code)
        if len(rows) < min_len:
            continue
        rows = rows[:T]
        windows.append(x[rows])
        stamps.append(ts[rows])
        labels.append(code)
    if not windows:
        raise ValueError(f"no entity has at least {min_len} rows")
    return ProcessedBatch(
        x_proc=np.stack(windows),
        t=normalize_time_index(T),
        ts=np.stack(stamps),
        labels=np.array(labels, dtype=np.int64),
    )


def cyclic_encode(ts: np.ndarray, n_years: int = 1) -> np.ndarray:
    """Sine/cosine timestamp features, ``(..., 4) -> (..., 8)``.

    Each field ``x`` with period ``P`` (years in data, 12, 365, 24) maps to
    ``(sin(x / (P * 2 pi)), cos(x / (P * 2 pi)))``.
    """
    ts = np.asarray(ts, dtype=float)
    periods = np.array([n_years, 12.0, 365.0, 24.0])
    angle = ts / (periods * 2.0 * np.pi)
    out = np.stack([np.sin(angle), np.cos(angle)], axis=-1)
    return out.reshape(*ts.shape[:-1], 8)


def normalize_time_index(T: int) -> np.ndarray:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    return np.arange(T, dtype=float) / (T - 1)
