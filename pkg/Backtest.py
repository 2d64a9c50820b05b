"""Long/flat simulation of tree signals against buy-and-hold, on close-to-close returns and without costs."""
from Util import PipelineError, format_float, format_timestamp
from dataclasses import dataclass
import typing as t
import logging
import numpy as np
import pandas as pd
import DataPipeline
import Features
import Storage
import Cart
logger = logging.getLogger(__name__)
BACKTEST_HEADER = ("timestamp", "signal", "position", "strategy_return", "benchmark_return", "strategy_equity",
                   "benchmark_equity")
TRADE_HEADER = ("entry_time", "exit_time", "trade_return")


@dataclass(frozen=True)
class TradeRecord:
    """One run of consecutive long bars. The position is taken at the close of 'entry_time' (the bar whose signal
    opened it) and held through the close of 'exit_time'."""
    entry_time: pd.Timestamp
    exit_time: pd.Timestamp
    trade_return: float
    bar_count: int


@dataclass(frozen=True)
class BacktestResult:
    symbol: str
    signals: pd.Series
    positions: pd.Series
    strategy_returns: pd.Series
    benchmark_returns: pd.Series
    strategy_equity: pd.Series
    benchmark_equity: pd.Series
    trades: t.List[TradeRecord]

    def __len__(self) -> int:
        return len(self.positions)

    def get_index(self) -> pd.DatetimeIndex:
        return self.positions.index


def _check_binary(values: pd.Series, what: str) -> None:
    if not np.isin(values.to_numpy(), (0, 1)).all():
        raise BacktestError("{} must be 0 or 1".format(what))


def _check_aligned(first: pd.Series, second: pd.Series) -> None:
    if not first.index.equals(second.index):
        raise BacktestError("series are not aligned on the same index ({} vs {} rows)".format(len(first), len(second)))


def shift_signals(signals: pd.Series) -> pd.Series:
    """The bar-t signal is traded at bar t + 1; nothing is held on the first bar."""
    if not len(signals):
        raise BacktestError("no signals to shift")
    _check_binary(signals, "signals")
    return signals.astype(np.int64).shift(1, fill_value=0).rename("position")


def close_returns(close: pd.Series) -> pd.Series:
    values = np.asarray(close, dtype=float)
    if not (values > 0).all():
        raise BacktestError("close prices must be positive")
    out = np.zeros(len(values))
    out[1:] = values[1:] / values[:-1] - 1.0
    return pd.Series(out, index=close.index, name="benchmark_return")


def benchmark_returns(close: pd.Series) -> pd.Series:
    """Buy-and-hold: long on every bar. The first bar has no prior close and returns 0."""
    return close_returns(close)


def strategy_returns(positions: pd.Series, close: pd.Series) -> pd.Series:
    _check_aligned(positions, close)
    _check_binary(positions, "positions")
    returns = close_returns(close).to_numpy()
    return pd.Series(np.where(positions.to_numpy() == 1, returns, 0.0), index=positions.index,
                     name="strategy_return")


def equity_curve(returns: pd.Series, initial: float = 1.0) -> pd.Series:
    if not initial > 0:
        raise BacktestError("initial equity must be positive, got {}".format(initial))
    values = np.asarray(returns, dtype=float)
    if not (values > -1.0).all():
        raise BacktestError("a return of -100% or worse wipes the equity out")
    return pd.Series(initial * np.cumprod(1.0 + values), index=returns.index, name="equity")


def extract_trades(positions: pd.Series, returns: pd.Series) -> t.List[TradeRecord]:
    """One trade per maximal run of long bars; a run still open on the last bar closes there."""
    _check_aligned(positions, returns)
    held = positions.to_numpy() == 1
    if not held.any():
        return []
    if held[0]:
        raise BacktestError("positions are long on the first bar, so the entry bar is unknown")
    edges = np.diff(np.concatenate(([0], held.astype(np.int8), [0])))
    starts, stops = np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]
    values, index = returns.to_numpy(dtype=float), positions.index
    trades = []
    for start, stop in zip(starts, stops):
        growth = float(np.prod(1.0 + values[start:stop]))
        trades.append(TradeRecord(index[start - 1], index[stop - 1], growth - 1.0, int(stop - start)))
    return trades


def simulate(signals: pd.Series, close: pd.Series, symbol: str = "") -> BacktestResult:
    _check_aligned(signals, close)
    positions = shift_signals(signals)
    strategy = strategy_returns(positions, close)
    benchmark = benchmark_returns(close)
    return BacktestResult(symbol, signals.astype(np.int64).rename("signal"), positions, strategy, benchmark,
                          equity_curve(strategy).rename("strategy_equity"),
                          equity_curve(benchmark).rename("benchmark_equity"), extract_trades(positions, strategy))


def run_backtest(model: Cart.DecisionTreeModel, features: Features.FeatureMatrix, close: pd.Series) -> BacktestResult:
    try:
        if not close.index.equals(features.get_index()):
            raise BacktestError("close prices and feature rows do not share an index")
        result = simulate(Cart.predict_features(model, features), close, features.symbol)
    except (BacktestError, Cart.TreeError) as error:
        raise BacktestError(error.message, symbol=features.symbol)
    logger.debug("%s: %d bars, %d trades", features.symbol, len(result), len(result.trades))
    return result


# region Persistence
def render_backtest(result: BacktestResult) -> str:
    columns = zip(result.get_index(), result.signals, result.positions, result.strategy_returns,
                  result.benchmark_returns, result.strategy_equity, result.benchmark_equity)
    rows = ([format_timestamp(stamp), str(int(signal)), str(int(position))] + [format_float(v) for v in values]
            for stamp, signal, position, *values in columns)
    return Storage.render_csv(BACKTEST_HEADER, rows)


def render_trades(trades: t.Sequence[TradeRecord]) -> str:
    rows = ([format_timestamp(trade.entry_time), format_timestamp(trade.exit_time), format_float(trade.trade_return)]
            for trade in trades)
    return Storage.render_csv(TRADE_HEADER, rows)


def read_backtest(file_path: str, symbol: str) -> BacktestResult:
    """Loads a backtest CSV. Trades are recovered from the position and return columns."""
    rows = Storage.read_csv(file_path, BACKTEST_HEADER)
    if not rows:
        raise Storage.DocumentError(file_path, "no backtest rows")
    stamps, flags, values = [], [], []
    for line, fields in rows:
        if len(fields) != len(BACKTEST_HEADER) or fields[1] not in ("0", "1") or fields[2] not in ("0", "1"):
            raise Storage.DocumentError(file_path, "malformed backtest row", line)
        try:
            values.append([float(field) for field in fields[3:]])
        except ValueError:
            raise Storage.DocumentError(file_path, "malformed number", line)
        stamps.append(fields[0])
        flags.append((int(fields[1]), int(fields[2])))
    index = DataPipeline.parse_timestamps(stamps, [line for line, _ in rows], file_path)
    index.name = "timestamp"
    flags, values = np.array(flags, dtype=np.int64), np.array(values, dtype=float)
    series = [pd.Series(values[:, i], index=index, name=name) for i, name in enumerate(BACKTEST_HEADER[3:])]
    positions = pd.Series(flags[:, 1], index=index, name="position")
    try:
        trades = extract_trades(positions, series[0])
    except BacktestError as error:
        raise Storage.DocumentError(file_path, error.message)
    return BacktestResult(symbol, pd.Series(flags[:, 0], index=index, name="signal"), positions, *series, trades)
# endregion


class BacktestError(PipelineError):
    def __init__(self, message: str, symbol: t.Optional[str] = None):
        """Raised for misaligned or invalid series handed to the simulation."""
        super().__init__(message, symbol=symbol, stage="backtest")
