"""Rebuild data/traffic_hourly_2000.csv from the copy bundled in the autots wheel.

The UCI Metro Interstate Traffic Volume dataset is redistributed (hourly
resampled, a subset of its columns, starting 2016-10-01) inside
``autots/datasets/data/traffic_hourly.zip``. Usage::

    pip download --no-deps autots==1.0.4 -d /tmp/wheels
    python scripts/extract_traffic_fixture.py /tmp/wheels/autots-1.0.4-py3-none-any.whl
"""
import io
import sys
import zipfile
from pathlib import Path

import pandas as pd

ROWS = 2000


def main(wheel: str, out: str = "data/traffic_hourly_2000.csv") -> None:
    blob = zipfile.ZipFile(wheel).read("autots/datasets/data/traffic_hourly.zip")
    df = pd.read_csv(io.BytesIO(blob), compression="zip")
    df = df.rename(columns={"datetime": "date_time"}).dropna().reset_index(drop=True)
    # restore the integer dtypes of the original UCI release
    for col in ("clouds_all", "traffic_volume"):
        df[col] = df[col].astype(int)
    df = df.head(ROWS)
    df = df[["date_time", "clouds_all", "rain_1h", "snow_1h", "temp", "weather_main", "traffic_volume"]]
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out, index=False)
    print(f"wrote {len(df)} rows to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
