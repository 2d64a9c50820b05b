from conftest import minute_index, random_close
import math
import os
import numpy as np
import pandas as pd
import pytest
import Backtest
import Cart
import Features


def series(values, name=None, dtype=float):
    return pd.Series(np.asarray(values, dtype=dtype), index=minute_index(len(values)), name=name)


def constant_model(prediction):
    return Cart.DecisionTreeModel(Cart.leaf_for((1 - prediction, prediction)), Features.FEATURE_NAMES,
                                  Cart.TrainConfig())


def feature_matrix(ret_1, symbol="AAA"):
    frame = pd.DataFrame({name: np.zeros(len(ret_1)) for name in Features.FEATURE_NAMES},
                         index=minute_index(len(ret_1)))
    frame["ret_1"] = ret_1
    return Features.FeatureMatrix(symbol, frame, 28)


def test_shift_signals():
    assert list(Backtest.shift_signals(series([1, 1, 0], dtype=np.int64))) == [0, 1, 1]
    assert list(Backtest.shift_signals(series([0, 0, 0], dtype=np.int64))) == [0, 0, 0]
    with pytest.raises(Backtest.BacktestError):
        Backtest.shift_signals(series([1, 2], dtype=np.int64))


def test_strategy_returns():
    close = series([100.0, 110.0, 99.0])
    returns = Backtest.strategy_returns(series([0, 1, 0], dtype=np.int64), close)
    assert list(returns) == [0.0, pytest.approx(0.10), 0.0]
    assert (Backtest.strategy_returns(series([0, 0, 0], dtype=np.int64), close) == 0).all()
    long = Backtest.strategy_returns(series([1, 1, 1], dtype=np.int64), close)
    assert np.array_equal(long.to_numpy(), Backtest.benchmark_returns(close).to_numpy())
    with pytest.raises(Backtest.BacktestError):
        Backtest.strategy_returns(series([0, 1], dtype=np.int64), close)


def test_equity_curve():
    assert list(Backtest.equity_curve(series([0.10, -0.10]))) == [pytest.approx(1.10), pytest.approx(0.99)]
    assert (Backtest.equity_curve(series([0.0] * 5)) == 1.0).all()
    assert Backtest.equity_curve(series([0.5]), initial=2.0).iloc[0] == 3.0
    with pytest.raises(Backtest.BacktestError):
        Backtest.equity_curve(series([0.1, -1.0]))


def test_extract_trades():
    positions = series([0, 1, 1, 0, 1], dtype=np.int64)
    returns = series([0.0, 0.1, -0.05, 0.0, 0.02])
    trades = Backtest.extract_trades(positions, returns)
    index = positions.index
    assert [(trade.entry_time, trade.exit_time, trade.bar_count) for trade in trades] == [
        (index[0], index[2], 2), (index[3], index[4], 1)]
    assert trades[0].trade_return == pytest.approx(1.1 * 0.95 - 1.0)
    assert trades[1].trade_return == pytest.approx(0.02)
    assert Backtest.extract_trades(series([0, 0, 0], dtype=np.int64), series([0.0, 0.1, 0.2])) == []
    with pytest.raises(Backtest.BacktestError):
        Backtest.extract_trades(series([1, 0], dtype=np.int64), series([0.0, 0.1]))


@pytest.mark.parametrize("seed", range(5))
def test_trades_compound_to_the_equity(seed):
    rng = np.random.default_rng(seed)
    close = series(random_close(2000, seed))
    signals = series(rng.integers(0, 2, 2000), dtype=np.int64)
    result = Backtest.simulate(signals, close)
    from_trades = sum(math.log1p(trade.trade_return) for trade in result.trades)
    from_bars = float(np.log1p(result.strategy_returns.to_numpy()).sum())
    assert from_trades == pytest.approx(from_bars, abs=1e-12)
    assert sum(trade.bar_count for trade in result.trades) == int(result.positions.sum())
    assert result.strategy_equity.iloc[-1] == pytest.approx(math.exp(from_bars), rel=1e-12)


def test_constant_models():
    close = series(random_close(300, 3))
    features = feature_matrix(np.linspace(-0.01, 0.01, 300))
    long = Backtest.run_backtest(constant_model(1), features, close)
    assert np.array_equal(long.strategy_equity.to_numpy(), long.benchmark_equity.to_numpy())
    assert len(long.trades) == 1 and long.trades[0].bar_count == 299
    flat = Backtest.run_backtest(constant_model(0), features, close)
    assert (flat.strategy_equity == 1.0).all()
    assert flat.trades == []


def test_three_bar_hand_case():
    model = Cart.DecisionTreeModel(Cart.Split(0, 0.0, Cart.Leaf((2, 0), 0), Cart.Leaf((0, 2), 1)), ("ret_1",),
                                   Cart.TrainConfig(max_depth=1))
    result = Backtest.run_backtest(model, feature_matrix([0.05, -0.02, 0.03]), series([100.0, 110.0, 99.0]))
    assert list(result.signals) == [1, 0, 1]
    assert list(result.positions) == [0, 1, 0]
    assert list(result.benchmark_returns) == [0.0, pytest.approx(0.10), pytest.approx(-0.10)]
    assert list(result.strategy_returns) == [0.0, pytest.approx(0.10), 0.0]
    assert list(result.strategy_equity) == [1.0, pytest.approx(1.10), pytest.approx(1.10)]
    assert list(result.benchmark_equity) == [1.0, pytest.approx(1.10), pytest.approx(0.99)]
    index = result.get_index()
    assert len(result.trades) == 1
    assert (result.trades[0].entry_time, result.trades[0].exit_time) == (index[0], index[1])
    assert result.trades[0].trade_return == pytest.approx(0.10)


def test_no_lookahead():
    rng = np.random.default_rng(12)
    close = random_close(500, 12)
    signals = rng.integers(0, 2, 500)
    reference = Backtest.simulate(series(signals, dtype=np.int64), series(close))
    for cut in rng.integers(1, 499, 10):
        later_close = close.copy()
        later_close[cut + 1:] *= rng.uniform(0.5, 1.5, len(close) - cut - 1)
        later_signals = signals.copy()
        later_signals[cut:] = 1 - later_signals[cut:]
        result = Backtest.simulate(series(later_signals, dtype=np.int64), series(later_close))
        assert np.array_equal(result.positions.to_numpy()[:cut + 1], reference.positions.to_numpy()[:cut + 1])
        assert np.array_equal(result.strategy_equity.to_numpy()[:cut], reference.strategy_equity.to_numpy()[:cut])


def test_perfect_foresight_dominates():
    rng = np.random.default_rng(13)
    close = series(random_close(1000, 13))
    bench = Backtest.benchmark_returns(close)
    oracle = pd.Series((bench.to_numpy() > 0).astype(np.int64), index=close.index)
    best = Backtest.equity_curve(Backtest.strategy_returns(oracle, close)).iloc[-1]
    assert best >= Backtest.equity_curve(bench).iloc[-1]
    for _ in range(10):
        positions = pd.Series(rng.integers(0, 2, 1000), index=close.index)
        assert best >= Backtest.equity_curve(Backtest.strategy_returns(positions, close)).iloc[-1]


def test_run_backtest_needs_matching_index():
    features = feature_matrix(np.zeros(10))
    with pytest.raises(Backtest.BacktestError) as info:
        Backtest.run_backtest(constant_model(1), features, series(random_close(11, 1)))
    assert info.value.get_symbol() == "AAA"


def test_backtest_file_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    result = Backtest.simulate(series(rng.integers(0, 2, 400), dtype=np.int64), series(random_close(400, 14)), "BBB")
    path = os.path.join(str(tmp_path), "BBB.csv")
    with open(path, "w", encoding="utf-8", newline="") as file:
        file.write(Backtest.render_backtest(result))
    loaded = Backtest.read_backtest(path, "BBB")
    assert np.array_equal(loaded.get_index().asi8, result.get_index().asi8)
    for name in ("signals", "positions", "strategy_returns", "benchmark_returns", "strategy_equity",
                 "benchmark_equity"):
        assert np.array_equal(getattr(loaded, name).to_numpy(), getattr(result, name).to_numpy()), name
    assert loaded.trades == result.trades
    lines = Backtest.render_trades(result.trades).splitlines()
    assert lines[0] == "entry_time,exit_time,trade_return"
    assert len(lines) == len(result.trades) + 1
