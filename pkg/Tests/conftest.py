import typing as t
import shutil
import os
import numpy as np
import pandas as pd
import pytest
import DataPipeline
import Runner
BUNDLED_DATA = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "Data")
FIRST_STAMP = "2022-03-01T09:15:00+05:30"


def minute_index(count: int, start: str = FIRST_STAMP) -> pd.DatetimeIndex:
    index = pd.date_range(start, periods=count, freq="min")
    index.name = "timestamp"
    return index


def frame_from_close(close: t.Sequence[float], start: str = FIRST_STAMP, seed: int = 0) -> pd.DataFrame:
    """OHLCV bars around a close path: open is the previous close and the high/low straddle both."""
    rng = np.random.default_rng(seed)
    close = np.asarray(close, dtype=float)
    open_ = np.concatenate(([close[0]], close[:-1]))
    spread = rng.uniform(0.0, 0.002, len(close))
    high = np.maximum(open_, close) * (1.0 + spread)
    low = np.minimum(open_, close) * (1.0 - spread)
    volume = rng.integers(100, 5000, len(close)).astype(float)
    return pd.DataFrame({"open": open_, "high": high, "low": low, "close": close, "volume": volume},
                        index=minute_index(len(close), start))


def random_close(count: int, seed: int, start: float = 100.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return start * np.cumprod(1.0 + rng.normal(0.0, 0.002, count))


def scale_prices(series: DataPipeline.BarSeries, factor: float) -> DataPipeline.BarSeries:
    frame = series.frame.copy()
    for name in DataPipeline.PRICE_COLUMNS:
        frame[name] = frame[name] * factor
    return DataPipeline.BarSeries(series.symbol, frame)


def bundled_series(symbol: str) -> DataPipeline.BarSeries:
    return DataPipeline.ingest_bars(os.path.join(BUNDLED_DATA, "bars", "{}.csv".format(symbol)), symbol)


@pytest.fixture
def make_series() -> t.Callable[..., DataPipeline.BarSeries]:
    def make(close: t.Sequence[float], symbol: str = "AAA", start: str = FIRST_STAMP,
             seed: int = 0) -> DataPipeline.BarSeries:
        return DataPipeline.BarSeries(symbol, frame_from_close(close, start, seed))
    return make


@pytest.fixture
def random_panel(make_series) -> t.Callable[[int, int], DataPipeline.AlignedPanel]:
    def make(count: int, seed: int) -> DataPipeline.AlignedPanel:
        return DataPipeline.union_align([make_series(random_close(count, seed), "AAA", seed=seed)])
    return make


@pytest.fixture
def data_dir(tmp_path) -> str:
    """A private copy of the bundled two-symbol universe."""
    target = os.path.join(str(tmp_path), "Data")
    shutil.copytree(BUNDLED_DATA, target)
    return target


@pytest.fixture
def run_config(data_dir, tmp_path) -> Runner.RunConfig:
    config = Runner.load_config(os.path.join(data_dir, "config.yaml"))
    return Runner.override(config, out_dir=os.path.join(str(tmp_path), "out"), jobs=2)
