"""Config loading and the end-to-end pipeline: ingest, align, features, train, backtest and report, plus the depth
sweep and tree export."""
from Util import PipelineError, format_metric, resolve_jobs
from dataclasses import asdict, dataclass, replace
import typing as t
import threading
import logging
import queue
import os
import re
import pandas as pd
import yaml
import DataPipeline
import Features
import Backtest
import Storage
import Charts
import Cart
import Kpi
import Time
logger = logging.getLogger(__name__)
STAGES = ("ingest", "align", "features", "train", "backtest", "report")
SLICES = ("train", "test")
CONFIG_KEYS = ("data_dir", "universe", "train", "test", "features", "tree", "kpi", "out_dir", "jobs")
DEFAULT_TRAIN = ("2022-01-01T00:00:00+05:30", "2023-01-01T00:00:00+05:30")
DEFAULT_TEST = ("2023-01-01T00:00:00+05:30", "2024-01-01T00:00:00+05:30")
DEFAULT_DEPTHS = (3, 4, 5, 6)
SYMBOL_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
RESERVED_SYMBOLS = (Kpi.AVERAGE_PORTFOLIO, Kpi.SYMBOL_MEAN)
FAILURES_FILE = "failures.csv"
FAILURES_HEADER = ("symbol", "stage", "message")
SWEEP_FILE = "sweep_depth.csv"
SWEEP_HEADER = ("max_depth", "sharpe", "profit_factor", "beating_total_return", "beating_sharpe", "total_return",
                "cagr", "max_drawdown", "win_rate", "volatility")
T = t.TypeVar("T")


@dataclass(frozen=True)
class RunConfig:
    data_dir: str
    universe: t.Tuple[str, ...]
    ranges: DataPipeline.SplitRanges
    feature_spec: Features.FeatureSpec = Features.FeatureSpec()
    train_config: Cart.TrainConfig = Cart.TrainConfig()
    kpi_config: Kpi.KpiConfig = Kpi.KpiConfig()
    out_dir: str = "out"
    jobs: int = 0  # 0 = one worker per available CPU

    def get_bar_path(self, symbol: str) -> str:
        return os.path.join(self.data_dir, "bars", "{}.csv".format(symbol))

    def get_adjustment_path(self, symbol: str) -> str:
        return os.path.join(self.data_dir, "adjustments", "{}.csv".format(symbol))

    def get_range(self, slice_name: str) -> DataPipeline.TimeRange:
        return getattr(self.ranges, slice_name)

    def to_document(self) -> t.Dict[str, t.Any]:
        """Settings that shape results. Paths and worker counts are left out so reports do not depend on them."""
        return {"universe": list(self.universe),
                "train": [self.ranges.train.start.isoformat(), self.ranges.train.end.isoformat()],
                "test": [self.ranges.test.start.isoformat(), self.ranges.test.end.isoformat()],
                "features": asdict(self.feature_spec),
                "tree": self.train_config.to_document(),
                "kpi": self.kpi_config.to_document()}


# region Config
def _parse_range(value: t.Any, key: str) -> DataPipeline.TimeRange:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError("'{}' must be a list of two timestamps, got {!r}".format(key, value))
    try:
        return DataPipeline.TimeRange(pd.Timestamp(value[0]), pd.Timestamp(value[1]))
    except (ValueError, TypeError) as error:
        raise ConfigError("'{}' has an unparseable timestamp ({})".format(key, error))
    except DataPipeline.DataError as error:
        raise ConfigError("'{}': {}".format(key, error.message))


def _mapping(document: t.Mapping[str, t.Any], key: str) -> t.Mapping[str, t.Any]:
    value = document.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError("'{}' must be a mapping, got {!r}".format(key, value))
    return value


def discover_universe(data_dir: str) -> t.Tuple[str, ...]:
    bars_dir = os.path.join(data_dir, "bars")
    if not os.path.isdir(bars_dir):
        raise ConfigError("bar directory {} does not exist".format(bars_dir))
    return tuple(sorted(name[:-len(".csv")] for name in os.listdir(bars_dir) if name.endswith(".csv")))


def load_config(file_path: t.Optional[str] = None) -> RunConfig:
    """Reads the YAML run config. Every key is optional; 'data_dir' is relative to the config file (or to the working
    directory without one), 'out_dir' to the working directory."""
    document, base_dir = {}, os.getcwd()
    if file_path is not None:
        try:
            with open(file_path, "r", encoding=Storage.READ_ENCODING) as file:
                document = yaml.safe_load(file)
        except OSError as error:
            raise ConfigError("could not read config {} ({})".format(file_path, error))
        except yaml.YAMLError as error:
            raise ConfigError("config {} is not valid YAML ({})".format(file_path, error))
        document = {} if document is None else document
        if not isinstance(document, dict):
            raise ConfigError("config {} must be a mapping of settings".format(file_path))
        base_dir = os.path.dirname(os.path.abspath(file_path))
    unknown = sorted(set(document) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError("unknown config key(s): {}".format(", ".join(map(str, unknown))))
    data_dir = document.get("data_dir", "Data")
    out_dir = document.get("out_dir", "out")
    jobs = document.get("jobs", 0)
    if not isinstance(data_dir, str) or not isinstance(out_dir, str):
        raise ConfigError("'data_dir' and 'out_dir' must be paths")
    if not isinstance(jobs, int) or isinstance(jobs, bool) or jobs < 0:
        raise ConfigError("'jobs' must be an integer >= 0, got {!r}".format(jobs))
    data_dir = os.path.normpath(os.path.join(base_dir, data_dir))
    try:
        ranges = DataPipeline.SplitRanges(_parse_range(document.get("train", DEFAULT_TRAIN), "train"),
                                          _parse_range(document.get("test", DEFAULT_TEST), "test"))
        feature_spec = Features.FeatureSpec.from_mapping(_mapping(document, "features"))
        train_config = Cart.TrainConfig.from_mapping(_mapping(document, "tree"))
        kpi_config = Kpi.KpiConfig.from_mapping(_mapping(document, "kpi"))
    except TypeError as error:
        raise ConfigError("invalid setting ({})".format(error))
    except PipelineError as error:
        raise ConfigError(error.message)
    universe = document.get("universe")
    if universe is None:
        universe = discover_universe(data_dir)
    if not isinstance(universe, (list, tuple)) or not all(isinstance(symbol, str) for symbol in universe):
        raise ConfigError("'universe' must be a list of symbols")
    config = RunConfig(data_dir, tuple(universe), ranges, feature_spec, train_config, kpi_config, out_dir, jobs)
    validate_config(config)
    return config


def validate_config(config: RunConfig) -> None:
    if not config.universe:
        raise ConfigError("the universe is empty")
    if len(set(config.universe)) != len(config.universe):
        raise ConfigError("the universe lists a symbol twice")
    for symbol in config.universe:
        if not SYMBOL_PATTERN.match(symbol) or symbol in RESERVED_SYMBOLS:
            raise ConfigError("invalid symbol name {!r}".format(symbol))
        if not os.path.isfile(config.get_bar_path(symbol)):
            raise ConfigError("bar file {} for {} does not exist".format(config.get_bar_path(symbol), symbol))


def override(config: RunConfig, out_dir: t.Optional[str] = None, jobs: t.Optional[int] = None) -> RunConfig:
    if jobs is not None and jobs < 0:
        raise ConfigError("--jobs must be >= 0, got {}".format(jobs))
    return replace(config, out_dir=config.out_dir if out_dir is None else out_dir,
                   jobs=config.jobs if jobs is None else jobs)


def parse_depths(text: str) -> t.List[int]:
    try:
        depths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError("--depths must be a comma-separated list of integers, got {!r}".format(text))
    check_depths(depths)
    return depths


def check_depths(depths: t.Sequence[int]) -> None:
    if not depths:
        raise ConfigError("no depths to sweep")
    if len(set(depths)) != len(depths):
        raise ConfigError("duplicate depth in {}".format(list(depths)))
    if min(depths) < 1:
        raise ConfigError("depths must be >= 1, got {}".format(list(depths)))
# endregion


class SymbolPool:
    def __init__(self, jobs: int):
        """Runs one stage for many symbols on worker threads. Results are handed back keyed by symbol, so the order
        in which workers finish never shows in the output."""
        self.jobs = max(1, jobs)

    def map(self, stage: str, work: t.Callable[[str], T], symbols: t.Sequence[str]) \
            -> t.Tuple[t.Dict[str, T], t.Dict[str, "StageError"]]:
        pending_tasks = queue.Queue()
        for symbol in symbols:
            pending_tasks.put(symbol)
        results, failures = {}, {}
        lock = threading.Lock()

        def worker_thread() -> None:
            while True:
                try:
                    symbol = pending_tasks.get_nowait()
                except queue.Empty:
                    break
                try:
                    value = work(symbol)
                except Exception as error:
                    logger.debug("%s failed in %s", symbol, stage, exc_info=True)
                    with lock:
                        failures[symbol] = StageError(symbol, stage, error)
                    continue
                with lock:
                    results[symbol] = value

        workers = [threading.Thread(target=worker_thread, daemon=True) for _ in range(min(self.jobs, len(symbols)))]
        for worker in workers:
            worker.start()
        for worker in workers:
            worker.join()
        return ({symbol: results[symbol] for symbol in sorted(results)},
                {symbol: failures[symbol] for symbol in sorted(failures)})


class RunSummary(t.NamedTuple):
    written: t.List[str]
    failures: t.Dict[str, "StageError"]


class Pipeline:
    def __init__(self, config: RunConfig, keep_going: bool = False):
        """Holds one run's config and failure record and executes stages symbol by symbol."""
        self.config = config
        self.keep_going = keep_going
        self.pool = SymbolPool(resolve_jobs(config.jobs))
        self.failures: t.Dict[str, StageError] = {}
        self.timer = Time.Time()

    def get_symbols(self) -> t.List[str]:
        return sorted(symbol for symbol in self.config.universe if symbol not in self.failures)

    def run_stage(self, stage: str, work: t.Callable[[str], T],
                  symbols: t.Optional[t.Sequence[str]] = None) -> t.Dict[str, T]:
        symbols = self.get_symbols() if symbols is None else symbols
        self.timer.reset_timer()
        results, failures = self.pool.map(stage, work, symbols)
        logger.info("%s: %d symbol(s) in %.2f s", stage, len(results), self.timer.get_time())
        if failures:
            if not self.keep_going:
                raise next(iter(failures.values()))
            for symbol, failure in failures.items():
                logger.warning("Skipping %s: %s", symbol, failure)
            self.failures.update(failures)
            if not results:
                raise PipelineError("every symbol failed in {}".format(stage), stage=stage)
        return results

    # region Stages
    def load_symbol(self, symbol: str) -> DataPipeline.BarSeries:
        series = DataPipeline.ingest_bars(self.config.get_bar_path(symbol), symbol)
        adjustment_path = self.config.get_adjustment_path(symbol)
        if os.path.isfile(adjustment_path):
            series = DataPipeline.apply_adjustment(series, DataPipeline.ingest_adjustments(adjustment_path, symbol))
        else:
            logger.debug("%s: no adjustment file, prices used as recorded", symbol)
        return series

    def ingest(self) -> t.Dict[str, DataPipeline.BarSeries]:
        return self.run_stage("ingest", self.load_symbol)

    def align(self, raw: t.Mapping[str, DataPipeline.BarSeries], slice_name: str) -> DataPipeline.AlignedPanel:
        """Aligns the universe inside one range from series clipped to it, so rows of the other range never reach
        this panel."""
        time_range = self.config.get_range(slice_name)
        clipped = {symbol: DataPipeline.clip_series(raw[symbol], time_range) for symbol in self.get_symbols()}
        empty = [symbol for symbol, series in clipped.items() if not len(series)]
        if empty:
            failures = {symbol: StageError(symbol, "align", DataPipeline.DataError(
                "no bars in the {} range {} .. {}".format(slice_name, time_range.start, time_range.end)))
                for symbol in empty}
            if not self.keep_going:
                raise failures[empty[0]]
            for symbol, failure in failures.items():
                logger.warning("Skipping %s: %s", symbol, failure)
            self.failures.update(failures)
            clipped = {symbol: series for symbol, series in clipped.items() if len(series)}
            if not clipped:
                raise PipelineError("no symbol has bars in the {} range".format(slice_name), stage="align")
        panel = DataPipeline.union_align(clipped.values())
        logger.info("align: %s panel has %d rows for %d symbol(s)", slice_name, len(panel.index), len(clipped))
        return panel

    def build_dataset(self, panel: DataPipeline.AlignedPanel, symbol: str) \
            -> t.Tuple[Features.FeatureMatrix, Features.LabelVector]:
        features = Features.build_features(panel, symbol, self.config.feature_spec)
        labels = Features.build_labels(panel.get_frame(symbol)["close"], features.get_index(), symbol)
        return features, labels

    def features(self, panel: DataPipeline.AlignedPanel) \
            -> t.Dict[str, t.Tuple[Features.FeatureMatrix, Features.LabelVector]]:
        return self.run_stage("features", lambda symbol: self.build_dataset(panel, symbol))

    def train(self, datasets: t.Mapping[str, t.Tuple[Features.FeatureMatrix, Features.LabelVector]],
              train_config: t.Optional[Cart.TrainConfig] = None) -> t.Dict[str, Cart.DecisionTreeModel]:
        train_config = self.config.train_config if train_config is None else train_config

        def fit_symbol(symbol: str) -> Cart.DecisionTreeModel:
            features, labels = datasets[symbol]
            model = Cart.fit_features(features, labels, train_config, self.config.ranges.train)
            logger.debug("%s: tree uses %s", symbol, ", ".join(sorted(Cart.feature_usage(model))) or "no feature")
            return model

        return self.run_stage("train", fit_symbol, [s for s in self.get_symbols() if s in datasets])

    def backtest(self, models: t.Mapping[str, Cart.DecisionTreeModel], panel: DataPipeline.AlignedPanel,
                 datasets: t.Mapping[str, t.Tuple[Features.FeatureMatrix, Features.LabelVector]]) \
            -> t.Dict[str, Backtest.BacktestResult]:
        def run_symbol(symbol: str) -> Backtest.BacktestResult:
            features = datasets[symbol][0]
            close = panel.get_frame(symbol)["close"].loc[features.get_index()]
            return Backtest.run_backtest(models[symbol], features, close)

        return self.run_stage("backtest", run_symbol,
                              [s for s in self.get_symbols() if s in models and s in datasets])

    def report(self, results: t.Mapping[str, Backtest.BacktestResult]) -> Kpi.PortfolioReport:
        try:
            return Kpi.build_portfolio_report(results, self.config.kpi_config)
        except Kpi.MetricError as error:
            raise PipelineError(error.message, stage="report")
    # endregion

    def prepare(self) -> t.Tuple[t.Dict[str, DataPipeline.AlignedPanel],
                                 t.Dict[str, t.Dict[str, t.Tuple[Features.FeatureMatrix, Features.LabelVector]]]]:
        """Ingests the universe, aligns both ranges and builds every feature matrix."""
        raw = self.ingest()
        panels = {slice_name: self.align(raw, slice_name) for slice_name in SLICES}
        datasets = {slice_name: self.features(panels[slice_name]) for slice_name in SLICES}
        return panels, datasets


# region Artifacts
def _submit_dataset(writer: Storage.ArtifactWriter, slice_name: str,
                    datasets: t.Mapping[str, t.Tuple[Features.FeatureMatrix, Features.LabelVector]]) -> None:
    for symbol, (features, labels) in datasets.items():
        writer.submit("features/{}/{}.csv".format(slice_name, symbol), Features.render_features(features, labels))


def _submit_models(writer: Storage.ArtifactWriter, models: t.Mapping[str, Cart.DecisionTreeModel]) -> None:
    for symbol, model in models.items():
        exports = Cart.export_rules(model)
        writer.submit("models/{}.json".format(symbol), Cart.render_model(model))
        writer.submit("rules/{}.txt".format(symbol), exports.text)
        writer.submit("rules/{}.dot".format(symbol), exports.dot)


def _submit_backtests(writer: Storage.ArtifactWriter, slice_name: str,
                      results: t.Mapping[str, Backtest.BacktestResult]) -> None:
    for symbol, result in results.items():
        writer.submit("backtests/{}/{}.csv".format(slice_name, symbol), Backtest.render_backtest(result))
        writer.submit("trades/{}/{}.csv".format(slice_name, symbol), Backtest.render_trades(result.trades))


def _submit_report(writer: Storage.ArtifactWriter, slice_name: str, report: Kpi.PortfolioReport,
                   config: RunConfig) -> None:
    writer.submit("reports/{}.json".format(slice_name), Kpi.render_report_json(report, config.to_document(), slice_name))
    writer.submit("reports/{}.csv".format(slice_name), Kpi.render_report_csv(report))


def _submit_charts(writer: Storage.ArtifactWriter, slice_name: str,
                   results: t.Mapping[str, Backtest.BacktestResult], config: RunConfig) -> None:
    try:
        charts = Charts.render_slice_charts(slice_name, results, config.kpi_config)
    except Charts.ChartError as error:
        logger.warning("Charts for %s skipped: %s", slice_name, error.message)
        return
    for rel_path, content in charts.items():
        writer.submit(rel_path, content)


def _finish(writer: Storage.ArtifactWriter, pipeline: Pipeline) -> RunSummary:
    if pipeline.failures:
        rows = ([symbol, failure.get_stage(), failure.message] for symbol, failure in sorted(pipeline.failures.items()))
        writer.submit(FAILURES_FILE, Storage.render_csv(FAILURES_HEADER, rows))
    write_failures = writer.close()
    if write_failures:
        raise PipelineError("could not write {} artifact(s), first: {} ({})".format(
            len(write_failures), *write_failures[0]), stage="write")
    written = writer.get_written()
    logger.info("Wrote %d artifact(s) to %s", len(written), pipeline.config.out_dir)
    return RunSummary(written, dict(pipeline.failures))
# endregion


def run_pipeline(config: RunConfig, keep_going: bool = False, charts: bool = False,
                 until: str = "report") -> RunSummary:
    """Runs the stages up to 'until'. A single stage writes only its own artifacts; 'report' (the full run) writes
    models, rule exports, backtests, trades and both reports."""
    if until not in STAGES:
        raise ConfigError("unknown stage {!r}".format(until))
    pipeline = Pipeline(config, keep_going)
    writer = Storage.ArtifactWriter(config.out_dir)
    try:
        raw = pipeline.ingest()
        if until == "ingest":
            for symbol, series in raw.items():
                writer.submit("bars/{}.csv".format(symbol), DataPipeline.render_bars(series))
            return _finish(writer, pipeline)
        panels = {slice_name: pipeline.align(raw, slice_name) for slice_name in SLICES}
        if until == "align":
            for slice_name, panel in panels.items():
                for name, content in DataPipeline.render_panel(panel).items():
                    writer.submit("panels/{}/{}".format(slice_name, name), content)
            return _finish(writer, pipeline)
        datasets = {slice_name: pipeline.features(panels[slice_name]) for slice_name in SLICES}
        if until == "features":
            for slice_name in SLICES:
                _submit_dataset(writer, slice_name, datasets[slice_name])
            return _finish(writer, pipeline)
        models = pipeline.train(datasets["train"])
        _submit_models(writer, models)
        if until == "train":
            return _finish(writer, pipeline)
        results = {slice_name: pipeline.backtest(models, panels[slice_name], datasets[slice_name])
                   for slice_name in SLICES}
        # A symbol dropped in a later stage is left out of both slices.
        symbols = pipeline.get_symbols()
        results = {slice_name: {s: r for s, r in results[slice_name].items() if s in symbols} for slice_name in SLICES}
        for slice_name in SLICES:
            _submit_backtests(writer, slice_name, results[slice_name])
        if until == "backtest":
            return _finish(writer, pipeline)
        for slice_name in SLICES:
            _submit_report(writer, slice_name, pipeline.report(results[slice_name]), config)
            if charts:
                _submit_charts(writer, slice_name, results[slice_name], config)
        return _finish(writer, pipeline)
    finally:
        writer.close()


def rebuild_reports(config: RunConfig, charts: bool = False) -> RunSummary:
    """Recomputes both portfolio reports from the backtest CSVs already under out_dir."""
    pipeline = Pipeline(config)
    writer = Storage.ArtifactWriter(config.out_dir)
    try:
        for slice_name in SLICES:
            results = {}
            for symbol in pipeline.get_symbols():
                file_path = os.path.join(config.out_dir, "backtests", slice_name, "{}.csv".format(symbol))
                try:
                    results[symbol] = Backtest.read_backtest(file_path, symbol)
                except PipelineError as error:
                    raise StageError(symbol, "report", error)
            _submit_report(writer, slice_name, pipeline.report(results), config)
            if charts:
                _submit_charts(writer, slice_name, results, config)
        return _finish(writer, pipeline)
    finally:
        writer.close()


def sweep_depth(config: RunConfig, depths: t.Sequence[int] = DEFAULT_DEPTHS,
                keep_going: bool = False) -> RunSummary:
    """Refits every symbol at each depth and reports the test-range average portfolio per depth."""
    check_depths(depths)
    pipeline = Pipeline(config, keep_going)
    writer = Storage.ArtifactWriter(config.out_dir)
    try:
        panels, datasets = pipeline.prepare()
        rows = []
        for depth in depths:
            models = pipeline.train(datasets["train"], replace(config.train_config, max_depth=depth))
            results = pipeline.backtest(models, panels["test"], datasets["test"])
            report = pipeline.report(results)
            strategy = report.average_portfolio.strategy
            row = sweep_row(depth, report)
            logger.info("depth %d: sharpe %s, profit factor %s", depth, format_metric(strategy.sharpe),
                        format_metric(strategy.profit_factor))
            rows.append(row)
        writer.submit(SWEEP_FILE, Storage.render_csv(SWEEP_HEADER, rows))
        return _finish(writer, pipeline)
    finally:
        writer.close()


def sweep_row(depth: int, report: Kpi.PortfolioReport) -> t.List[str]:
    strategy = report.average_portfolio.strategy
    return [str(depth), format_metric(strategy.sharpe), format_metric(strategy.profit_factor),
            str(Kpi.count_beating(report.per_symbol, "total_return")),
            str(Kpi.count_beating(report.per_symbol, "sharpe"))] + \
        [format_metric(strategy.get(name)) for name in ("total_return", "cagr", "max_drawdown", "win_rate",
                                                        "volatility")]


class TreeExport(t.NamedTuple):
    text: str
    usage: t.FrozenSet[str]
    importance: t.Dict[str, float]
    written: t.Optional[str]


def export_tree(model_path: str, export_format: str = "rules", out_dir: t.Optional[str] = None) -> TreeExport:
    """Renders a model document as rule text or DOT. With 'out_dir' the export is written to <out_dir>/<stem>.txt or
    .dot as well."""
    if export_format not in ("rules", "dot"):
        raise ConfigError("unknown export format {!r}".format(export_format))
    model = Cart.read_model(model_path)
    exports = Cart.export_rules(model)
    text = exports.text if export_format == "rules" else exports.dot
    written = None
    if out_dir is not None:
        stem = os.path.splitext(os.path.basename(model_path))[0]
        written = os.path.join(out_dir, "{}.{}".format(stem, "txt" if export_format == "rules" else "dot"))
        try:
            Storage.write_file(written, text)
        except OSError as error:
            raise Storage.DocumentError(written, "could not be written ({})".format(error))
    return TreeExport(text, Cart.feature_usage(model), Cart.feature_importance(model), written)


class ConfigError(PipelineError):
    def __init__(self, message: str):
        """Raised for unusable config files, flags and settings; the command exits with status 2."""
        super().__init__(message, stage="config")


class StageError(PipelineError):
    def __init__(self, symbol: str, stage: str, cause: Exception):
        """Wraps whatever a stage raised for one symbol, naming the symbol and the stage."""
        message = cause.message if isinstance(cause, PipelineError) else "{}: {}".format(type(cause).__name__, cause)
        super().__init__(message, symbol=symbol, stage=stage)
        self.cause = cause

    def get_cause(self) -> Exception:
        return self.cause
