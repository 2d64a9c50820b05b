"""Ingestion of one-minute bars and daily adjustment data, split/dividend adjustment, union alignment of a universe
onto one index and splitting it into train/test ranges."""
from Util import PipelineError, format_float, format_timestamp
from dataclasses import dataclass
import typing as t
import datetime
import logging
import math
import os
import numpy as np
import pandas as pd
import Storage
logger = logging.getLogger(__name__)
PRICE_COLUMNS = ("open", "high", "low", "close")
BAR_COLUMNS = PRICE_COLUMNS + ("volume",)
BAR_HEADER = ("timestamp",) + BAR_COLUMNS
ADJUSTMENT_HEADER = ("date", "close", "adjusted_close")
PANEL_INDEX_FILE = "index.csv"
PANEL_HEADER = BAR_COLUMNS + ("interpolated",)
OFFSET_PATTERN = r"(?:Z|[+-]\d{2}:?\d{2})$"


class Bar(t.NamedTuple):
    timestamp: pd.Timestamp
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass(frozen=True)
class BarSeries:
    """Bars of one symbol. 'frame' is indexed by strictly increasing timezone-aware timestamps and holds the columns
    open, high, low, close and volume."""
    symbol: str
    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    def get_index(self) -> pd.DatetimeIndex:
        return self.frame.index

    def get_column(self, name: str) -> pd.Series:
        return self.frame[name]

    def bars(self) -> t.Iterator[Bar]:
        for row in self.frame.itertuples(index=True, name=None):
            yield Bar(*row)


@dataclass(frozen=True)
class AdjustmentFactorSeries:
    symbol: str
    factors: pd.Series  # positive factor per trading day, indexed by strictly increasing datetime.date

    def get_factor(self, day: datetime.date) -> float:
        if day not in self.factors.index:
            raise DataError("no adjustment factor for {}".format(day), symbol=self.symbol)
        return float(self.factors[day])


@dataclass(frozen=True)
class TimeRange:
    """Half-open interval [start, end)."""
    start: pd.Timestamp
    end: pd.Timestamp

    def __post_init__(self):
        if self.start.tzinfo is None or self.end.tzinfo is None:
            raise DataError("range bounds must carry a UTC offset: {} .. {}".format(self.start, self.end))
        if not self.start < self.end:
            raise DataError("range start {} is not before its end {}".format(self.start, self.end))

    def contains(self, index: pd.DatetimeIndex) -> np.ndarray:
        return np.asarray((index >= self.start) & (index < self.end))


@dataclass(frozen=True)
class SplitRanges:
    train: TimeRange
    test: TimeRange

    def __post_init__(self):
        if self.train.end > self.test.start:
            raise DataError("train range ends at {} after the test range starts at {}"
                            .format(self.train.end, self.test.start))


@dataclass(frozen=True)
class AlignedPanel:
    """A universe on one shared index. 'columns' maps each symbol to a frame with the five bar columns; 'masks' maps
    each symbol to a boolean series that is True where the cell was filled rather than observed."""
    index: pd.DatetimeIndex
    columns: t.Dict[str, pd.DataFrame]
    masks: t.Dict[str, pd.Series]

    def get_symbols(self) -> t.List[str]:
        return sorted(self.columns)

    def get_frame(self, symbol: str) -> pd.DataFrame:
        if symbol not in self.columns:
            raise DataError("symbol is not part of the panel", symbol=symbol)
        return self.columns[symbol]

    def get_mask(self, symbol: str) -> pd.Series:
        self.get_frame(symbol)
        return self.masks[symbol]

    def restrict(self, keep: np.ndarray) -> "AlignedPanel":
        index = self.index[keep]
        return AlignedPanel(index,
                            {s: frame.loc[index].copy() for s, frame in self.columns.items()},
                            {s: mask.loc[index].copy() for s, mask in self.masks.items()})


def parse_timestamps(stamps: t.Sequence[str], lines: t.Sequence[int], file_path: str) -> pd.DatetimeIndex:
    """Parses ISO-8601 timestamps that carry a UTC offset. The result is expressed in the offset of the first row."""
    raw = pd.Series(list(stamps), dtype=object).astype(str).str.strip()
    has_offset = raw.str.contains(OFFSET_PATTERN, regex=True).to_numpy()
    parsed = pd.to_datetime(raw, errors="coerce", utc=True, format="ISO8601")
    bad = ~has_offset | parsed.isna().to_numpy()
    if bad.any():
        first = int(np.argmax(bad))
        raise DataError("unparseable timestamp '{}' (ISO-8601 with offset expected)".format(raw.iloc[first]),
                        file_path=file_path, line=lines[first])
    if not len(raw):
        return pd.DatetimeIndex(parsed)
    zone = pd.Timestamp(raw.iloc[0]).tzinfo
    return pd.DatetimeIndex(parsed).tz_convert(zone)


def check_bars(frame: pd.DataFrame, lines: t.Optional[t.Sequence[int]] = None, file_path: str = "",
               symbol: t.Optional[str] = None) -> None:
    """Raises DataError naming the first bar that breaks a price/volume invariant."""
    o, h, l, c, v = (frame[name].to_numpy(dtype=float) for name in BAR_COLUMNS)
    checks = (((o > 0) & (h > 0) & (l > 0) & (c > 0), "non-positive price"),
              (v >= 0, "negative volume"),
              (l <= h, "low above high"),
              ((l <= np.minimum(o, c)) & (h >= np.maximum(o, c)), "open/close outside the low-high range"))
    for ok, reason in checks:
        if not ok.all():
            first = int(np.argmax(~ok))
            if lines is not None:
                raise DataError(reason, symbol=symbol, file_path=file_path, line=lines[first])
            raise DataError("{} at {}".format(reason, frame.index[first]), symbol=symbol)


def ingest_bars(file_path: str, symbol: str) -> BarSeries:
    rows = Storage.read_csv(file_path, BAR_HEADER)
    lines, stamps, values = [], [], []
    for line, fields in rows:
        if len(fields) != len(BAR_HEADER):
            raise DataError("expected {} fields, found {}".format(len(BAR_HEADER), len(fields)),
                            symbol=symbol, file_path=file_path, line=line)
        try:
            numbers = [float(field) for field in fields[1:]]
        except ValueError:
            raise DataError("malformed number in row '{}'".format(",".join(fields)),
                            symbol=symbol, file_path=file_path, line=line)
        if not all(math.isfinite(number) for number in numbers):
            raise DataError("non-finite value in row '{}'".format(",".join(fields)),
                            symbol=symbol, file_path=file_path, line=line)
        lines.append(line)
        stamps.append(fields[0])
        values.append(numbers)
    if not values:
        raise DataError("no bars in file", symbol=symbol, file_path=file_path)
    index = parse_timestamps(stamps, lines, file_path)
    frame = pd.DataFrame(values, index=index, columns=list(BAR_COLUMNS))
    check_bars(frame, lines, file_path, symbol)
    frame = frame.sort_index(kind="mergesort")
    duplicates = frame.index.duplicated(keep="last")
    if duplicates.any():
        logger.debug("%s: dropped %d duplicate timestamps (last record kept)", symbol, int(duplicates.sum()))
    frame = frame[~duplicates]
    frame.index.name = "timestamp"
    return BarSeries(symbol, frame)


def compute_adjustment_factors(daily_close: t.Mapping[datetime.date, float],
                               daily_adjusted_close: t.Mapping[datetime.date, float],
                               symbol: str = "") -> AdjustmentFactorSeries:
    if set(daily_close) != set(daily_adjusted_close):
        missing = sorted(set(daily_close) ^ set(daily_adjusted_close))
        raise DataError("close and adjusted close cover different dates (first difference {})".format(missing[0]),
                        symbol=symbol or None)
    factors = {}
    for day in sorted(daily_close):
        close, adjusted = float(daily_close[day]), float(daily_adjusted_close[day])
        if not close > 0 or not adjusted > 0:
            raise DataError("non-positive daily price on {}".format(day), symbol=symbol or None)
        factors[day] = adjusted / close
    return AdjustmentFactorSeries(symbol, pd.Series(factors, dtype=float, name="factor"))


def ingest_adjustments(file_path: str, symbol: str) -> AdjustmentFactorSeries:
    closes, adjusted = {}, {}
    for line, fields in Storage.read_csv(file_path, ADJUSTMENT_HEADER):
        if len(fields) != len(ADJUSTMENT_HEADER):
            raise DataError("expected {} fields, found {}".format(len(ADJUSTMENT_HEADER), len(fields)),
                            symbol=symbol, file_path=file_path, line=line)
        try:
            day = datetime.date.fromisoformat(fields[0].strip())
            close, adjusted_close = float(fields[1]), float(fields[2])
        except ValueError:
            raise DataError("malformed row '{}'".format(",".join(fields)), symbol=symbol, file_path=file_path,
                            line=line)
        if day in closes:
            raise DataError("duplicate date {}".format(day), symbol=symbol, file_path=file_path, line=line)
        if not close > 0 or not adjusted_close > 0:
            raise DataError("non-positive daily price", symbol=symbol, file_path=file_path, line=line)
        closes[day] = close
        adjusted[day] = adjusted_close
    return compute_adjustment_factors(closes, adjusted, symbol)


def trading_days(index: pd.DatetimeIndex) -> np.ndarray:
    # Dates are taken in the series' own offset, i.e. the exchange-local session date.
    return np.asarray(index.date)


def apply_adjustment(series: BarSeries, factors: AdjustmentFactorSeries) -> BarSeries:
    """Scales prices by the day's factor and divides volume by it, holding the daily factor over all of that day's
    minutes."""
    days = trading_days(series.get_index())
    per_bar = factors.factors.reindex(days)
    if per_bar.isna().any():
        first = days[int(np.argmax(per_bar.isna().to_numpy()))]
        raise DataError("no adjustment factor for trading day {}".format(first), symbol=series.symbol)
    scale = per_bar.to_numpy(dtype=float)
    frame = series.frame.copy()
    for name in PRICE_COLUMNS:
        frame[name] = frame[name].to_numpy() * scale
    frame["volume"] = frame["volume"].to_numpy() / scale
    return BarSeries(series.symbol, frame)


def clip_series(series: BarSeries, time_range: TimeRange) -> BarSeries:
    return BarSeries(series.symbol, series.frame[time_range.contains(series.get_index())].copy())


def union_align(series_set: t.Iterable[BarSeries]) -> AlignedPanel:
    series_list = sorted(series_set, key=lambda s: s.symbol)
    if not series_list:
        raise DataError("cannot align an empty collection of series")
    symbols = [s.symbol for s in series_list]
    if len(set(symbols)) != len(symbols):
        raise DataError("duplicate symbols in alignment input: {}".format(symbols))
    for s in series_list:
        if not len(s):
            raise DataError("series is empty", symbol=s.symbol)
    index = series_list[0].get_index()
    for s in series_list[1:]:
        index = index.union(s.get_index())
    index = index.sort_values().tz_convert(series_list[0].get_index().tz)
    index.name = "timestamp"
    # Seconds since the first stamp; whole seconds are exact in float64.
    seconds = np.asarray((index - index[0]) / pd.Timedelta(seconds=1), dtype=float)
    columns, masks = {}, {}
    for s in series_list:
        raw_positions = index.get_indexer(s.get_index())
        mask = np.ones(len(index), dtype=bool)
        mask[raw_positions] = False
        frame = s.frame.reindex(index)
        if mask.any():
            raw_seconds = seconds[raw_positions]
            for name in BAR_COLUMNS:
                values = frame[name].to_numpy(dtype=float, copy=True)
                # np.interp holds the nearest raw value beyond either edge.
                values[mask] = np.interp(seconds[mask], raw_seconds, s.frame[name].to_numpy(dtype=float))
                frame[name] = values
        logger.debug("%s: %d of %d cells interpolated", s.symbol, int(mask.sum()), len(index))
        columns[s.symbol] = frame
        masks[s.symbol] = pd.Series(mask, index=index, name="interpolated")
    return AlignedPanel(index, columns, masks)


def split_panel(panel: AlignedPanel, ranges: SplitRanges) -> t.Tuple[AlignedPanel, AlignedPanel]:
    in_train = ranges.train.contains(panel.index)
    in_test = ranges.test.contains(panel.index)
    if not in_train.any():
        raise DataError("no panel rows fall in the train range {} .. {}".format(ranges.train.start, ranges.train.end))
    if not in_test.any():
        raise DataError("no panel rows fall in the test range {} .. {}".format(ranges.test.start, ranges.test.end))
    return panel.restrict(in_train), panel.restrict(in_test)


# region Persistence
def render_bars(series: BarSeries) -> str:
    rows = ([format_timestamp(stamp)] + [format_float(value) for value in values]
            for stamp, *values in series.frame.itertuples(index=True, name=None))
    return Storage.render_csv(BAR_HEADER, rows)


def render_panel(panel: AlignedPanel) -> t.Dict[str, str]:
    """Returns file name -> content for the panel directory: 'index.csv' plus one 'SYMBOL.csv' per symbol."""
    files = {PANEL_INDEX_FILE: Storage.render_csv(("timestamp",), ([format_timestamp(s)] for s in panel.index))}
    for symbol in panel.get_symbols():
        frame, mask = panel.columns[symbol], panel.masks[symbol].to_numpy()
        rows = ([format_float(value) for value in values] + ["true" if filled else "false"]
                for values, filled in zip(frame[list(BAR_COLUMNS)].itertuples(index=False, name=None), mask))
        files["{}.csv".format(symbol)] = Storage.render_csv(PANEL_HEADER, rows)
    return files


def write_panel(panel: AlignedPanel, directory: str) -> None:
    for name, content in render_panel(panel).items():
        Storage.write_file(os.path.join(directory, name), content)


def read_panel(directory: str) -> AlignedPanel:
    index_path = os.path.join(directory, PANEL_INDEX_FILE)
    rows = Storage.read_csv(index_path, ("timestamp",))
    index = parse_timestamps([fields[0] for _, fields in rows], [line for line, _ in rows], index_path)
    index.name = "timestamp"
    if not index.is_monotonic_increasing or index.has_duplicates:
        raise DataError("panel index is not strictly increasing", file_path=index_path)
    columns, masks = {}, {}
    names = sorted(name for name in os.listdir(directory) if name.endswith(".csv") and name != PANEL_INDEX_FILE)
    for name in names:
        symbol, file_path = name[:-len(".csv")], os.path.join(directory, name)
        values, filled = [], []
        for line, fields in Storage.read_csv(file_path, PANEL_HEADER):
            if len(fields) != len(PANEL_HEADER) or fields[-1] not in ("true", "false"):
                raise DataError("malformed panel row", symbol=symbol, file_path=file_path, line=line)
            try:
                values.append([float(field) for field in fields[:-1]])
            except ValueError:
                raise DataError("malformed number in panel row", symbol=symbol, file_path=file_path, line=line)
            filled.append(fields[-1] == "true")
        if len(values) != len(index):
            raise DataError("has {} rows but the index has {}".format(len(values), len(index)), symbol=symbol,
                            file_path=file_path)
        columns[symbol] = pd.DataFrame(values, index=index, columns=list(BAR_COLUMNS))
        masks[symbol] = pd.Series(filled, index=index, name="interpolated", dtype=bool)
    if not columns:
        raise DataError("panel directory holds no symbol files", file_path=directory)
    return AlignedPanel(index, columns, masks)
# endregion


class DataError(PipelineError):
    def __init__(self, message: str, symbol: t.Optional[str] = None, file_path: t.Optional[str] = None,
                 line: t.Optional[int] = None):
        """Raised for malformed bar/adjustment input and for inputs the alignment and split steps cannot use."""
        where = ""
        if file_path is not None:
            where = "{}{}: ".format(file_path, "" if line is None else ", line {}".format(line))
        super().__init__(where + message, symbol=symbol, stage="data")
        self.file_path = file_path
        self.line = line

    def get_line(self) -> t.Optional[int]:
        return self.line
