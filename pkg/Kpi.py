"""Per-symbol and portfolio performance metrics, strategy vs buy-and-hold comparison and universe pruning.

Undefined metrics are None and unbounded ones are math.inf; reports write them as "NA" and "inf"."""
from Util import PipelineError, format_metric, metric_to_json, parse_metric
from dataclasses import dataclass, fields
import typing as t
import logging
import math
import numpy as np
import pandas as pd
import Backtest
import Storage
logger = logging.getLogger(__name__)
KPI_NAMES = ("sharpe", "total_return", "cagr", "max_drawdown", "win_rate", "profit_factor", "volatility")
LOWER_IS_BETTER = ("volatility",)
REPORT_CSV_HEADER = ("symbol", "side") + KPI_NAMES
FLAG_OVER = "OVER"
FLAG_UNDER = "UNDER"
FLAG_NA = "NA"
AVERAGE_PORTFOLIO = "average_portfolio"
SYMBOL_MEAN = "symbol_mean"
Metric = t.Optional[float]


@dataclass(frozen=True)
class KpiConfig:
    periods_per_year: int = 94500  # 252 sessions of 375 one-minute bars
    risk_free_annual: float = 0.072

    def __post_init__(self):
        if (not isinstance(self.periods_per_year, (int, float)) or isinstance(self.periods_per_year, bool)
                or not self.periods_per_year > 0):
            raise MetricError("periods_per_year must be positive, got {!r}".format(self.periods_per_year))
        if (not isinstance(self.risk_free_annual, (int, float)) or isinstance(self.risk_free_annual, bool)
                or not self.risk_free_annual > -1):
            raise MetricError("risk_free_annual must be above -1, got {!r}".format(self.risk_free_annual))

    @classmethod
    def from_mapping(cls, values: t.Mapping[str, t.Any]) -> "KpiConfig":
        known = {field.name for field in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise MetricError("unknown kpi setting(s): {}".format(", ".join(unknown)))
        return cls(**values)

    def per_period_risk_free(self) -> float:
        return (1.0 + self.risk_free_annual) ** (1.0 / self.periods_per_year) - 1.0

    def to_document(self) -> t.Dict[str, t.Any]:
        return {"periods_per_year": self.periods_per_year, "risk_free_annual": float(self.risk_free_annual)}


@dataclass(frozen=True)
class KpiReport:
    sharpe: Metric = None
    total_return: Metric = None
    cagr: Metric = None
    max_drawdown: Metric = None
    win_rate: Metric = None
    profit_factor: Metric = None
    volatility: Metric = None

    def get(self, name: str) -> Metric:
        return getattr(self, name)

    def to_document(self) -> t.Dict[str, t.Union[float, str]]:
        return {name: metric_to_json(self.get(name)) for name in KPI_NAMES}

    @classmethod
    def from_document(cls, document: t.Mapping[str, t.Any]) -> "KpiReport":
        if set(document) != set(KPI_NAMES):
            raise MetricError("report keys {} differ from {}".format(sorted(document), list(KPI_NAMES)))
        return cls(**{name: parse_metric(document[name]) for name in KPI_NAMES})


class ReportPair(t.NamedTuple):
    strategy: KpiReport
    benchmark: KpiReport
    flags: t.Dict[str, str]

    def to_document(self) -> t.Dict[str, t.Any]:
        return {"strategy": self.strategy.to_document(), "benchmark": self.benchmark.to_document(),
                "flags": dict(self.flags)}


@dataclass(frozen=True)
class PortfolioReport:
    per_symbol: t.Dict[str, ReportPair]
    average_portfolio: ReportPair
    symbol_mean: ReportPair
    psbbr: Metric
    psbbs: Metric
    pruned_universe: t.List[str]
    pruned_average_portfolio: t.Optional[ReportPair]

    def get_symbols(self) -> t.List[str]:
        return sorted(self.per_symbol)


def _values(series: t.Union[pd.Series, np.ndarray, t.Sequence[float]]) -> np.ndarray:
    return np.asarray(series, dtype=float)


# region Metrics
def sharpe(returns: pd.Series, cfg: KpiConfig = KpiConfig()) -> float:
    values = _values(returns)
    if len(values) < 2:
        raise MetricError("sharpe needs at least 2 returns, got {}".format(len(values)))
    if np.ptp(values) == 0:
        raise MetricError("sharpe is undefined for returns without variance")
    std = float(np.std(values, ddof=1))
    excess = values - cfg.per_period_risk_free()
    return float(np.mean(excess)) / std * math.sqrt(cfg.periods_per_year)


def total_return(equity: pd.Series) -> float:
    values = _values(equity)
    if not len(values):
        raise MetricError("total return of an empty equity curve")
    return float(values[-1] / values[0] - 1.0)


def cagr(equity: pd.Series, n_periods: int, cfg: KpiConfig = KpiConfig()) -> float:
    values = _values(equity)
    if n_periods < 1:
        raise MetricError("cagr needs at least one period, got {}".format(n_periods))
    if not len(values) or not (values[0] > 0 and values[-1] > 0):
        raise MetricError("cagr needs positive start and end equity")
    with np.errstate(over="ignore"):
        # Short, strong runs annualise past the float range; that is reported as inf.
        growth = np.power(np.float64(values[-1] / values[0]), np.float64(cfg.periods_per_year / n_periods))
    return float(growth - 1.0)


def max_drawdown(equity: pd.Series) -> float:
    values = _values(equity)
    if not len(values) or not (values > 0).all():
        raise MetricError("max drawdown needs a non-empty curve of positive values")
    return float(np.min(values / np.maximum.accumulate(values)) - 1.0)


def win_rate(trades: t.Sequence[Backtest.TradeRecord]) -> Metric:
    if not trades:
        return None
    return sum(1 for trade in trades if trade.trade_return > 0) / len(trades)


def profit_factor(trades: t.Sequence[Backtest.TradeRecord]) -> Metric:
    """Gross winning trade return over gross losing trade return. inf when nothing lost; None without trades or when
    every trade returned exactly 0."""
    if not trades:
        return None
    gains = sum(trade.trade_return for trade in trades if trade.trade_return > 0)
    losses = sum(trade.trade_return for trade in trades if trade.trade_return < 0)
    if losses == 0:
        return math.inf if gains > 0 else None
    return gains / abs(losses)


def annualized_volatility(returns: pd.Series, cfg: KpiConfig = KpiConfig()) -> float:
    values = _values(returns)
    if len(values) < 2:
        raise MetricError("volatility needs at least 2 returns, got {}".format(len(values)))
    if np.ptp(values) == 0:
        return 0.0
    return float(np.std(values, ddof=1)) * math.sqrt(cfg.periods_per_year)
# endregion


# region Portfolio
def average_portfolio(per_symbol_returns: t.Mapping[str, pd.Series]) -> pd.Series:
    """Equal-weight portfolio rebalanced every bar: the per-bar mean across symbols."""
    if not per_symbol_returns:
        raise MetricError("average portfolio of an empty universe")
    symbols = sorted(per_symbol_returns)
    index = per_symbol_returns[symbols[0]].index
    for symbol in symbols[1:]:
        if not per_symbol_returns[symbol].index.equals(index):
            raise MetricError("return series of {} and {} are not aligned".format(symbols[0], symbol))
    stacked = np.vstack([_values(per_symbol_returns[symbol]) for symbol in symbols])
    return pd.Series(stacked.mean(axis=0), index=index, name="return")


def psbb(per_symbol: t.Mapping[str, ReportPair], metric: str) -> float:
    """Percentage of symbols whose strategy strictly beats buy-and-hold on 'metric'."""
    if metric not in ("total_return", "sharpe"):
        raise MetricError("psbb compares total_return or sharpe, not {}".format(metric))
    if not per_symbol:
        raise MetricError("psbb of an empty universe")
    beating = 0
    for symbol in sorted(per_symbol):
        strategy, benchmark = per_symbol[symbol].strategy.get(metric), per_symbol[symbol].benchmark.get(metric)
        if strategy is None or benchmark is None:
            raise MetricError("{} is undefined for {}".format(metric, symbol))
        beating += strategy > benchmark
    return 100.0 * beating / len(per_symbol)


def count_beating(per_symbol: t.Mapping[str, ReportPair], metric: str) -> int:
    """Like psbb but as a count, and symbols with an undefined side never count."""
    return sum(1 for pair in per_symbol.values()
               if pair.strategy.get(metric) is not None and pair.benchmark.get(metric) is not None
               and pair.strategy.get(metric) > pair.benchmark.get(metric))


def prune_universe(per_symbol: t.Mapping[str, ReportPair]) -> t.List[str]:
    """Symbols whose strategy total return beats buy-and-hold, sorted."""
    kept = []
    for symbol in sorted(per_symbol):
        strategy, benchmark = per_symbol[symbol].strategy.total_return, per_symbol[symbol].benchmark.total_return
        if strategy is None or benchmark is None:
            raise MetricError("total_return is undefined for {}".format(symbol))
        if strategy > benchmark:
            kept.append(symbol)
    return kept
# endregion


# region Reports
def compare(strategy: KpiReport, benchmark: KpiReport) -> t.Dict[str, str]:
    """OVER where the strategy outperforms. Higher is better except volatility; for max_drawdown (never positive)
    higher means closer to zero. Ties are UNDER."""
    flags = {}
    for name in KPI_NAMES:
        ours, theirs = strategy.get(name), benchmark.get(name)
        if ours is None or theirs is None:
            flags[name] = FLAG_NA
        elif name in LOWER_IS_BETTER:
            flags[name] = FLAG_OVER if ours < theirs else FLAG_UNDER
        else:
            flags[name] = FLAG_OVER if ours > theirs else FLAG_UNDER
    return flags


def _defined(metric: t.Callable[..., float], *args) -> Metric:
    try:
        return metric(*args)
    except MetricError as error:
        logger.debug("Metric %s undefined: %s", metric.__name__, error.message)
        return None


def report_for(returns: pd.Series, cfg: KpiConfig,
               trades: t.Optional[t.Sequence[Backtest.TradeRecord]] = None) -> KpiReport:
    """Metrics of one return stream; trade statistics stay NA when 'trades' is None (buy-and-hold)."""
    equity = Backtest.equity_curve(returns)
    return KpiReport(sharpe=_defined(sharpe, returns, cfg),
                     total_return=_defined(total_return, equity),
                     cagr=_defined(cagr, equity, len(equity) - 1, cfg),
                     max_drawdown=_defined(max_drawdown, equity),
                     win_rate=win_rate(trades) if trades is not None else None,
                     profit_factor=profit_factor(trades) if trades is not None else None,
                     volatility=_defined(annualized_volatility, returns, cfg))


def build_report(result: Backtest.BacktestResult, cfg: KpiConfig = KpiConfig()) -> ReportPair:
    strategy = report_for(result.strategy_returns, cfg, result.trades)
    benchmark = report_for(result.benchmark_returns, cfg)
    return ReportPair(strategy, benchmark, compare(strategy, benchmark))


def _average_pair(results: t.Sequence[Backtest.BacktestResult], cfg: KpiConfig) -> ReportPair:
    strategy_returns = average_portfolio({result.symbol: result.strategy_returns for result in results})
    benchmark_returns = average_portfolio({result.symbol: result.benchmark_returns for result in results})
    pooled = [trade for result in sorted(results, key=lambda r: r.symbol) for trade in result.trades]
    strategy = report_for(strategy_returns, cfg, pooled)
    benchmark = report_for(benchmark_returns, cfg)
    return ReportPair(strategy, benchmark, compare(strategy, benchmark))


def _mean_report(reports: t.Sequence[KpiReport]) -> KpiReport:
    means = {}
    for name in KPI_NAMES:
        defined = [report.get(name) for report in reports if report.get(name) is not None]
        means[name] = float(np.mean(defined)) if defined else None
    return KpiReport(**means)


def _safe_psbb(per_symbol: t.Mapping[str, ReportPair], metric: str) -> Metric:
    try:
        return psbb(per_symbol, metric)
    except MetricError as error:
        logger.warning("Share of symbols beating buy-and-hold on %s is NA: %s", metric, error.message)
        return None


def build_portfolio_report(results: t.Mapping[str, Backtest.BacktestResult],
                           cfg: KpiConfig = KpiConfig()) -> PortfolioReport:
    if not results:
        raise MetricError("no backtest results to report on")
    symbols = sorted(results)
    per_symbol = {symbol: build_report(results[symbol], cfg) for symbol in symbols}
    ordered = [results[symbol] for symbol in symbols]
    symbol_mean_strategy = _mean_report([per_symbol[symbol].strategy for symbol in symbols])
    symbol_mean_benchmark = _mean_report([per_symbol[symbol].benchmark for symbol in symbols])
    pruned = prune_universe(per_symbol)
    pruned_pair = _average_pair([results[symbol] for symbol in pruned], cfg) if pruned else None
    return PortfolioReport(per_symbol=per_symbol,
                           average_portfolio=_average_pair(ordered, cfg),
                           symbol_mean=ReportPair(symbol_mean_strategy, symbol_mean_benchmark,
                                                  compare(symbol_mean_strategy, symbol_mean_benchmark)),
                           psbbr=_safe_psbb(per_symbol, "total_return"),
                           psbbs=_safe_psbb(per_symbol, "sharpe"),
                           pruned_universe=pruned,
                           pruned_average_portfolio=pruned_pair)


def render_report_json(report: PortfolioReport, config_echo: t.Mapping[str, t.Any], slice_name: str) -> str:
    document = {"slice": slice_name,
                "config": dict(config_echo),
                "symbols": {symbol: report.per_symbol[symbol].to_document() for symbol in report.get_symbols()},
                AVERAGE_PORTFOLIO: report.average_portfolio.to_document(),
                SYMBOL_MEAN: report.symbol_mean.to_document(),
                "psbbr": metric_to_json(report.psbbr),
                "psbbs": metric_to_json(report.psbbs),
                "pruned_universe": list(report.pruned_universe),
                "pruned_average_portfolio": (report.pruned_average_portfolio.to_document()
                                             if report.pruned_average_portfolio is not None else None)}
    return Storage.render_json(document)


def render_report_csv(report: PortfolioReport) -> str:
    rows = []
    labelled = [(symbol, report.per_symbol[symbol]) for symbol in report.get_symbols()]
    labelled += [(AVERAGE_PORTFOLIO, report.average_portfolio), (SYMBOL_MEAN, report.symbol_mean)]
    for label, pair in labelled:
        rows.append([label, "benchmark"] + [format_metric(pair.benchmark.get(name)) for name in KPI_NAMES])
        rows.append([label, "strategy"] + [format_metric(pair.strategy.get(name)) for name in KPI_NAMES])
        rows.append([label, "flag"] + [pair.flags[name] for name in KPI_NAMES])
    # Percentages of symbols beating buy-and-hold sit under the KPI they count; other cells stay empty.
    for side, kpi_name, value in (("psbbr", "total_return", report.psbbr), ("psbbs", "sharpe", report.psbbs)):
        rows.append([AVERAGE_PORTFOLIO, side] + [format_metric(value) if name == kpi_name else "" for name in KPI_NAMES])
    return Storage.render_csv(REPORT_CSV_HEADER, rows)
# endregion


# region Chart series
def volatility_matched_returns(benchmark_returns: pd.Series, strategy_returns: pd.Series) -> pd.Series:
    """Buy-and-hold returns rescaled to the strategy's sample volatility."""
    benchmark, strategy = _values(benchmark_returns), _values(strategy_returns)
    if len(benchmark) < 2 or len(benchmark) != len(strategy):
        raise MetricError("volatility matching needs two aligned series of at least 2 returns")
    if np.ptp(benchmark) == 0:
        raise MetricError("buy-and-hold returns have no variance to rescale")
    scale = float(np.std(strategy, ddof=1)) / float(np.std(benchmark, ddof=1))
    return pd.Series(benchmark * scale, index=benchmark_returns.index, name="volatility_matched_return")


def monthly_returns(returns: pd.Series) -> pd.Series:
    """Compounded return per calendar month of the index's own offset, keyed 'YYYY-MM'."""
    if not len(returns):
        return pd.Series([], dtype=float, name="monthly_return")
    months = returns.index.strftime("%Y-%m")
    growth = (1.0 + returns.astype(float)).groupby(months).prod()
    return (growth - 1.0).rename("monthly_return")
# endregion


class MetricError(PipelineError):
    def __init__(self, message: str, symbol: t.Optional[str] = None):
        """Raised when a metric is undefined for its input or a report cannot be assembled."""
        super().__init__(message, symbol=symbol, stage="report")
