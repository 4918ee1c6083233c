"""Adapters that turn user-supplied CSV exports of the benchmark datasets into model-ready tables.

Nothing is downloaded. Each adapter knows its dataset's column list, timestamp
construction, window length and predictive-score target.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

TIMESTAMP = "date_time"

# "None" is a real category in several exports (holiday, Errors?), so only these mark missing values
NA_VALUES = ["", "NA", "NaN", "nan", "N/A"]


def read_csv(path: Path, **kwargs) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, na_values=NA_VALUES, **kwargs)


@dataclass
class Dataset:
    name: str
    table: pd.DataFrame
    target_column: str
    T: int = 24
    timestamp_column: Optional[str] = TIMESTAMP
    entity_column: Optional[str] = None
    datetime_format: Optional[str] = None

    @property
    def multi_sequence(self) -> bool:
        return self.entity_column is not None


@dataclass
class Adapter:
    name: str
    target_column: str
    columns: list[str]  # modeled columns, in table order
    T: int = 24
    first_rows: Optional[int] = 2000  # single-sequence: keep the first rows
    optional: list[str] = field(default_factory=list)  # dropped with a warning when absent
    entity_column: Optional[str] = None
    n_entities: Optional[int] = None
    read: Callable[[Path], pd.DataFrame] = read_csv
    prepare: Optional[Callable[[pd.DataFrame], pd.DataFrame]] = None

    def load(self, path: str | Path) -> Dataset:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        raw = self.read(path)
        if self.prepare is not None:
            raw = self.prepare(raw)
        columns = []
        for col in self.columns:
            if col in raw.columns:
                columns.append(col)
            elif col in self.optional:
                logger.warning("%s: optional column %r missing, skipping it", self.name, col)
            else:
                raise KeyError(f"{self.name}: required column {col!r} missing from {path}")
        keep = [TIMESTAMP] + ([self.entity_column] if self.entity_column else []) + columns
        table = raw[keep].dropna().reset_index(drop=True)
        if self.entity_column is None:
            if self.first_rows is not None:
                table = table.head(self.first_rows).reset_index(drop=True)
        else:
            table = _select_entities(table, self.entity_column, self.T, self.n_entities)
        return Dataset(
            name=self.name,
            table=table,
            target_column=self.target_column,
            T=self.T,
            entity_column=self.entity_column,
        )


def _select_entities(table: pd.DataFrame, entity: str, T: int, n: Optional[int]) -> pd.DataFrame:
    """Keep (the first ``n``) entities having more than ``T`` rows, each sorted by time."""
    table = table.sort_values([entity, TIMESTAMP], kind="stable")
    sizes = table.groupby(entity, sort=False).size()
    eligible = [e for e in table[entity].unique() if sizes[e] >= T]
    if n is not None:
        eligible = eligible[:n]
    if not eligible:
        raise ValueError(f"no entity has at least {T} rows")
    return table[table[entity].isin(eligible)].reset_index(drop=True)


# ---------------------------------------------------------------- per-dataset parsing


def _traffic(raw: pd.DataFrame) -> pd.DataFrame:
    raw = raw.copy()
    raw[TIMESTAMP] = pd.to_datetime(raw["date_time"])
    return raw


def _pollution(raw: pd.DataFrame) -> pd.DataFrame:
    raw = raw.copy()
    raw[TIMESTAMP] = pd.to_datetime(raw[["year", "month", "day", "hour"]])
    return raw


def _read_airquality(path: Path) -> pd.DataFrame:
    raw = read_csv(path, sep=";", decimal=",")
    return raw.loc[:, ~raw.columns.str.startswith("Unnamed")].dropna(how="all")


def _airquality(raw: pd.DataFrame) -> pd.DataFrame:
    raw = raw.copy()
    raw[TIMESTAMP] = pd.to_datetime(
        raw["Date"] + " " + raw["Time"].str.replace(".", ":", regex=False), format="%d/%m/%Y %H:%M:%S"
    )
    return raw


def _hurricane(raw: pd.DataFrame) -> pd.DataFrame:
    raw = raw.copy()
    source = "date" if "date" in raw.columns else raw.columns[0]
    raw[TIMESTAMP] = pd.to_datetime(raw[source])
    return raw


def parse_amount(values: pd.Series) -> pd.Series:
    """``"$1,234.50"`` / ``"$-3.00"`` -> float."""
    return values.astype(str).str.replace(r"[$,]", "", regex=True).astype(float)


def _card_transaction(raw: pd.DataFrame) -> pd.DataFrame:
    raw = raw.copy()
    hm = raw["Time"].str.split(":", expand=True).astype(int)
    raw[TIMESTAMP] = pd.to_datetime(
        pd.DataFrame({"year": raw["Year"], "month": raw["Month"], "day": raw["Day"],
                      "hour": hm[0], "minute": hm[1]})
    )
    raw["Amount"] = parse_amount(raw["Amount"])
    raw["Errors?"] = raw["Errors?"].fillna("None")
    if "Merchant" not in raw.columns and "Merchant Name" in raw.columns:
        raw["Merchant"] = raw["Merchant Name"]
    return raw


def _nasdaq(raw: pd.DataFrame) -> pd.DataFrame:
    raw = raw.copy()
    source = "Date" if "Date" in raw.columns else "date"
    raw[TIMESTAMP] = pd.to_datetime(raw[source])
    return raw


ADAPTERS: dict[str, Adapter] = {
    "traffic": Adapter(
        "traffic",
        target_column="traffic_volume",
        columns=["holiday", "temp", "rain_1h", "snow_1h", "clouds_all", "weather_main",
                 "weather_description", "traffic_volume"],
        optional=["holiday", "weather_description"],
        prepare=_traffic,
    ),
    "pollution": Adapter(
        "pollution",
        target_column="Ir",
        columns=["pm2.5", "DEWP", "TEMP", "PRES", "cbwd", "Iws", "Is", "Ir"],
        prepare=_pollution,
    ),
    "airquality": Adapter(
        "airquality",
        target_column="AH",
        columns=["CO(GT)", "PT08.S1(CO)", "NMHC(GT)", "C6H6(GT)", "PT08.S2(NMHC)", "NOx(GT)",
                 "PT08.S3(NOx)", "NO2(GT)", "PT08.S4(NO2)", "PT08.S5(O3)", "T", "RH", "AH"],
        read=_read_airquality,
        prepare=_airquality,
    ),
    "hurricane": Adapter(
        "hurricane",
        target_column="seasonal",
        columns=["county", "revenue", "trend", "seasonal", "residual", "hurricane", "category",
                 "month_of_year"],
        optional=["county", "trend", "residual", "hurricane", "category", "month_of_year"],
        prepare=_hurricane,
    ),
    "card_transaction": Adapter(
        "card_transaction",
        target_column="Is Fraud?",
        columns=["Card", "Amount", "Use Chip", "Merchant", "MCC", "Errors?", "Is Fraud?"],
        T=200,
        first_rows=None,
        entity_column="User",
        n_entities=100,
        prepare=_card_transaction,
    ),
    "nasdaq100": Adapter(
        "nasdaq100",
        target_column="Industry",
        columns=["Open", "Close", "Volume", "Sector", "Industry", "Exchange", "Weekday"],
        optional=["Open", "Volume", "Sector", "Exchange", "Weekday"],
        T=177,
        first_rows=None,
        entity_column="Symbol",
        prepare=_nasdaq,
    ),
}


def load_dataset(
    adapter: str,
    path: str | Path,
    target_column: Optional[str] = None,
    timestamp_column: Optional[str] = None,
    entity_column: Optional[str] = None,
    T: Optional[int] = None,
    first_rows: Optional[int] = None,
) -> Dataset:
    """Load ``path`` with a named adapter, or ``"csv"`` for a generic table.

    The generic adapter models every column except the timestamp and entity
    columns; it needs ``target_column``.
    """
    if adapter != "csv":
        if adapter not in ADAPTERS:
            raise ValueError(f"unknown dataset adapter {adapter!r}; choose from {sorted(ADAPTERS) + ['csv']}")
        ds = ADAPTERS[adapter].load(path)
        if T is not None:
            ds.T = T
        if target_column is not None:
            ds.target_column = target_column
        return ds

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    table = read_csv(path)
    if timestamp_column is not None:
        if timestamp_column not in table.columns:
            raise KeyError(f"timestamp column {timestamp_column!r} not in {path}")
        table[timestamp_column] = pd.to_datetime(table[timestamp_column])
    if first_rows is not None and entity_column is None:
        table = table.head(first_rows)
    if target_column is None or target_column not in table.columns:
        raise KeyError(f"generic adapter needs an existing target column, got {target_column!r}")
    return Dataset(
        name=path.stem,
        table=table.reset_index(drop=True),
        target_column=target_column,
        T=T or 24,
        timestamp_column=timestamp_column,
        entity_column=entity_column,
    )


def synthetic_entities(
    n_entities: int = 3, length: int = 48, levels=(0.0, 5.0, 10.0), noise: float = 0.3, seed: int = 0
) -> Dataset:
    """Toy multi-sequence table in which each entity fluctuates around its own level."""
    rng = np.random.default_rng(seed)
    stamps = pd.date_range("2020-01-01", periods=length, freq="h")
    frames = []
    for e in range(n_entities):
        level = levels[e % len(levels)]
        frames.append(
            pd.DataFrame(
                {
                    TIMESTAMP: stamps,
                    "entity": f"e{e}",
                    "value": level + noise * rng.standard_normal(length),
                    "state": rng.choice(["lo", "hi"], size=length, p=[0.5, 0.5]) if e % 2 else "lo",
                }
            )
        )
    table = pd.concat(frames, ignore_index=True)
    return Dataset("entities", table, target_column="value", T=length, entity_column="entity")
