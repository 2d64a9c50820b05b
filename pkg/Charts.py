"""Vector (SVG) charts of backtest results: equity curves, volatility-matched equity and monthly returns."""
from Util import COLORS, PipelineError
import typing as t
import logging
import io
import numpy as np
import pandas as pd
import matplotlib
from matplotlib.figure import Figure
import Backtest
import Kpi
logger = logging.getLogger(__name__)
FIGURE_SIZE = (9.6, 4.8)  # inches
STRATEGY_COLOR = COLORS["BLUE"]
BENCHMARK_COLOR = COLORS["GREY6"]
# A fixed salt and no date keep element ids and bytes the same from run to run.
SVG_RC = {"svg.hashsalt": "tree-trader", "svg.fonttype": "path"}
SVG_METADATA = {"Date": None}


class Chart:
    def __init__(self, title: str):
        """Base class: one figure with a single titled, gridded plot area. Figures are built without pyplot, so no
        window system or global figure state is involved."""
        self.title = title
        self.figure = Figure(figsize=FIGURE_SIZE, facecolor=COLORS["WHITE"])
        self.axes = self.figure.add_subplot()
        self.axes.set_title(title)
        self.axes.grid(True, color=COLORS["GREY3"], linewidth=0.5)
        self.axes.set_axisbelow(True)

    def to_svg(self) -> bytes:
        buffer = io.BytesIO()
        try:
            self.figure.tight_layout()
            with matplotlib.rc_context(SVG_RC):
                self.figure.savefig(buffer, format="svg", metadata=SVG_METADATA)
        except (ValueError, RuntimeError, OSError) as error:
            raise ChartError("could not render '{}' as SVG ({})".format(self.title, error))
        return buffer.getvalue()


class LineChart(Chart):
    def __init__(self, title: str, lines: t.Sequence[t.Tuple[str, pd.Series, str]]):
        """One line per (label, series, colour). All series share the first series' index; the x axis is bar
        position, so nights and weekends take no room, and is labelled with dates."""
        super().__init__(title)
        index = lines[0][1].index
        xs = np.arange(len(index))
        for label, series, color in lines:
            self.axes.plot(xs, np.asarray(series, dtype=float), color=color, linewidth=1.2, label=label)
        if len(index):
            picks = np.unique(np.linspace(0, len(index) - 1, min(len(index), 5)).astype(int))
            self.axes.set_xticks(picks, [index[i].strftime("%Y-%m-%d") for i in picks])
        self.axes.set_ylabel("equity")
        self.axes.legend(loc="upper left")


class BarChart(Chart):
    def __init__(self, title: str, values: pd.Series):
        """Vertical bars around a zero line, green for gains and red for losses, labelled by the series index."""
        super().__init__(title)
        data = np.asarray(values, dtype=float)
        positions = np.arange(len(data))
        colors = [COLORS["GREEN"] if value >= 0 else COLORS["RED"] for value in data]
        self.axes.bar(positions, data, width=0.7, color=colors)
        self.axes.axhline(0.0, color=COLORS["BLACK"], linewidth=0.8)
        self.axes.set_xticks(positions, [str(label) for label in values.index], rotation=45)
        self.axes.set_ylabel("return")


def render_slice_charts(slice_name: str, results: t.Mapping[str, Backtest.BacktestResult],
                        cfg: Kpi.KpiConfig = Kpi.KpiConfig()) -> t.Dict[str, bytes]:
    """Returns relative path -> SVG bytes for one slice: the average portfolio's equity, volatility-matched equity and
    monthly returns, plus an equity chart per symbol."""
    if not results:
        raise ChartError("no backtest results to chart")
    symbols = sorted(results)
    strategy = Kpi.average_portfolio({s: results[s].strategy_returns for s in symbols})
    benchmark = Kpi.average_portfolio({s: results[s].benchmark_returns for s in symbols})
    charts = {}
    label = "{} average portfolio".format(slice_name)
    charts["charts/{}/equity_average_portfolio.svg".format(slice_name)] = LineChart(
        "Equity, {}".format(label),
        [("strategy", Backtest.equity_curve(strategy), STRATEGY_COLOR),
         ("buy and hold", Backtest.equity_curve(benchmark), BENCHMARK_COLOR)]).to_svg()
    try:
        matched = Backtest.equity_curve(Kpi.volatility_matched_returns(benchmark, strategy))
    except (Kpi.MetricError, Backtest.BacktestError) as error:
        logger.warning("Volatility-matched chart for %s skipped: %s", slice_name, error.message)
    else:
        charts["charts/{}/volatility_matched.svg".format(slice_name)] = LineChart(
            "Volatility-matched equity, {}".format(label),
            [("strategy", Backtest.equity_curve(strategy), STRATEGY_COLOR),
             ("buy and hold, strategy volatility", matched, BENCHMARK_COLOR)]).to_svg()
    charts["charts/{}/monthly_returns.svg".format(slice_name)] = BarChart(
        "Monthly strategy returns, {}".format(label), Kpi.monthly_returns(strategy)).to_svg()
    for symbol in symbols:
        result = results[symbol]
        charts["charts/{}/equity_{}.svg".format(slice_name, symbol)] = LineChart(
            "Equity, {} {}".format(slice_name, symbol),
            [("strategy", result.strategy_equity, STRATEGY_COLOR),
             ("buy and hold", result.benchmark_equity, BENCHMARK_COLOR)]).to_svg()
    logger.debug("Rendered %d chart(s) for %s", len(charts), slice_name)
    return charts


class ChartError(PipelineError):
    def __init__(self, message: str):
        """Raised when matplotlib cannot render a chart. Charts are optional, so callers log and move on."""
        super().__init__(message, stage="charts")
