"""The nine decision-tree inputs and the next-bar direction label.

Every indicator is causal: the value at bar t only reads bars at or before t. Indicators return a series aligned with
their input where the warm-up positions hold NaN. Nothing is scaled or normalised."""
from Util import PipelineError, format_float, format_timestamp
from numpy.lib.stride_tricks import sliding_window_view
from dataclasses import dataclass, fields
import typing as t
import logging
import numpy as np
import pandas as pd
import DataPipeline
import Storage
logger = logging.getLogger(__name__)
FEATURE_NAMES = ("ret_1", "ret_15", "rsi_14", "adx_14", "sma_close_ratio", "sma_close_corr", "vol_14", "vol_210",
                 "vwap_close_ratio")
LABEL_COLUMN = "label"
# Directional moves closer than this share of the high are ties.
MOVE_TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FeatureSpec:
    return_lag_short: int = 1
    return_lag_medium: int = 15
    rsi_period: int = 14
    adx_period: int = 14
    sma_period: int = 14
    corr_period: int = 14
    vol_period: int = 14
    vwap_period: int = 14

    def __post_init__(self):
        for field in fields(self):
            value = getattr(self, field.name)
            minimum = 1 if field.name.startswith("return_lag") else 2
            if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
                raise FeatureError("{} must be an integer >= {}, got {!r}".format(field.name, minimum, value))

    @classmethod
    def from_mapping(cls, values: t.Mapping[str, t.Any]) -> "FeatureSpec":
        known = {field.name for field in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise FeatureError("unknown feature setting(s): {}".format(", ".join(unknown)))
        return cls(**values)

    def first_defined(self) -> t.Dict[str, int]:
        """Position of the first defined value of each column."""
        return {"ret_1": self.return_lag_short,
                "ret_15": self.return_lag_medium,
                "rsi_14": self.rsi_period,
                "adx_14": 2 * self.adx_period - 1,
                "sma_close_ratio": self.sma_period - 1,
                "sma_close_corr": self.sma_period + self.corr_period - 2,
                "vol_14": self.return_lag_short + self.vol_period - 1,
                "vol_210": self.return_lag_medium + self.vol_period - 1,
                "vwap_close_ratio": self.vwap_period - 1}

    def warmup_length(self) -> int:
        return max(self.first_defined().values())


@dataclass(frozen=True)
class FeatureMatrix:
    symbol: str
    frame: pd.DataFrame  # the nine FEATURE_NAMES columns, indexed by timestamp
    warmup_length: int

    def __len__(self) -> int:
        return len(self.frame)

    def get_index(self) -> pd.DatetimeIndex:
        return self.frame.index

    def to_numpy(self) -> np.ndarray:
        return self.frame[list(FEATURE_NAMES)].to_numpy(dtype=float)

    def restrict(self, index: pd.DatetimeIndex) -> "FeatureMatrix":
        return FeatureMatrix(self.symbol, self.frame.loc[index], self.warmup_length)


@dataclass(frozen=True)
class LabelVector:
    symbol: str
    values: pd.Series  # 0/1 per labelled bar, indexed by timestamp

    def __len__(self) -> int:
        return len(self.values)

    def get_index(self) -> pd.DatetimeIndex:
        return self.values.index

    def to_numpy(self) -> np.ndarray:
        return self.values.to_numpy(dtype=np.int64)


def _as_array(series: pd.Series, minimum_length: int, what: str) -> np.ndarray:
    values = np.asarray(series, dtype=float)
    if len(values) < minimum_length:
        raise FeatureError("{} needs at least {} bars, got {}".format(what, minimum_length, len(values)))
    return values


def _check_positive(values: np.ndarray, what: str) -> None:
    if not (values > 0).all():
        raise FeatureError("{} needs strictly positive prices".format(what))


def _wilder(values: np.ndarray, period: int) -> np.ndarray:
    """Wilder smoothing: the mean of the first 'period' values, then avg = (prev * (period - 1) + x) / period. The
    first defined output sits at position period - 1."""
    out = np.full(len(values), np.nan)
    if len(values) < period:
        return out
    average = float(np.mean(values[:period]))
    out[period - 1] = average
    for i in range(period, len(values)):
        average = (average * (period - 1) + values[i]) / period
        out[i] = average
    return out


def _trailing(values: np.ndarray, period: int) -> np.ndarray:
    """Trailing windows; row j is the window ending at position j + period - 1."""
    return sliding_window_view(values, period)


def _place(values: np.ndarray, length: int, offset: int) -> np.ndarray:
    out = np.full(length, np.nan)
    out[offset:offset + len(values)] = values
    return out


def simple_returns(close: pd.Series, lag: int) -> pd.Series:
    values = _as_array(close, lag + 1, "simple_returns")
    _check_positive(values, "simple_returns")
    out = np.full(len(values), np.nan)
    out[lag:] = values[lag:] / values[:-lag] - 1.0
    return pd.Series(out, index=close.index, name="ret_{}".format(lag))


def rsi(close: pd.Series, period: int) -> pd.Series:
    values = _as_array(close, period + 1, "rsi")
    delta = np.diff(values)
    average_gain = _wilder(np.where(delta > 0, delta, 0.0), period)
    average_loss = _wilder(np.where(delta < 0, -delta, 0.0), period)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 100.0 - 100.0 / (1.0 + average_gain / average_loss)
    out = np.where((average_loss == 0) & (average_gain > 0), 100.0, out)
    out = np.where((average_gain == 0) & (average_loss > 0), 0.0, out)
    out = np.where((average_gain == 0) & (average_loss == 0), 50.0, out)
    return pd.Series(_place(out, len(values), 1), index=close.index, name="rsi_{}".format(period))


def adx(high: pd.Series, low: pd.Series, close: pd.Series, period: int) -> pd.Series:
    h = _as_array(high, 2 * period + 1, "adx")
    l = _as_array(low, 2 * period + 1, "adx")
    c = _as_array(close, 2 * period + 1, "adx")
    if not len(h) == len(l) == len(c):
        raise FeatureError("adx inputs differ in length")
    up = h[1:] - h[:-1]
    down = l[:-1] - l[1:]
    # Near-equal moves are a tie and count in neither direction.
    tolerance = MOVE_TIE_TOLERANCE * np.abs(h[1:])
    plus_dm = np.where((up - down > tolerance) & (up > tolerance), up, 0.0)
    minus_dm = np.where((down - up > tolerance) & (down > tolerance), down, 0.0)
    true_range = np.maximum.reduce([h[1:] - l[1:], np.abs(h[1:] - c[:-1]), np.abs(l[1:] - c[:-1])])
    smooth_tr = _wilder(true_range, period)
    smooth_plus = _wilder(plus_dm, period)
    smooth_minus = _wilder(minus_dm, period)
    with np.errstate(divide="ignore", invalid="ignore"):
        # A flat market has no range at all; both directions are defined as 0 there.
        di_plus = np.where(smooth_tr > 0, 100.0 * smooth_plus / smooth_tr, 0.0)
        di_minus = np.where(smooth_tr > 0, 100.0 * smooth_minus / smooth_tr, 0.0)
        di_sum = di_plus + di_minus
        dx = np.where(di_sum > 0, 100.0 * np.abs(di_plus - di_minus) / di_sum, 0.0)
    dx = dx[period - 1:]
    smoothed = _wilder(dx, period)
    return pd.Series(_place(smoothed, len(c), period), index=close.index, name="adx_{}".format(period))


def _sma(values: np.ndarray, period: int) -> np.ndarray:
    return _place(_trailing(values, period).mean(axis=1), len(values), period - 1)


def sma_close_ratio(close: pd.Series, period: int) -> pd.Series:
    values = _as_array(close, period, "sma_close_ratio")
    _check_positive(values, "sma_close_ratio")
    return pd.Series(_sma(values, period) / values, index=close.index, name="sma_close_ratio")


def sma_close_corr(close: pd.Series, period: int, sma_period: t.Optional[int] = None) -> pd.Series:
    """Rolling Pearson correlation of (SMA, close) over the trailing 'period' pairs. A window where either side does
    not move has correlation 0."""
    sma_period = period if sma_period is None else sma_period
    values = _as_array(close, sma_period + period - 1, "sma_close_corr")
    sma = _sma(values, sma_period)[sma_period - 1:]
    closes = values[sma_period - 1:]
    sma_windows, close_windows = _trailing(sma, period), _trailing(closes, period)
    sma_dev = sma_windows - sma_windows.mean(axis=1, keepdims=True)
    close_dev = close_windows - close_windows.mean(axis=1, keepdims=True)
    covariance = (sma_dev * close_dev).sum(axis=1)
    scale = np.sqrt((sma_dev * sma_dev).sum(axis=1) * (close_dev * close_dev).sum(axis=1))
    flat = (np.ptp(sma_windows, axis=1) == 0) | (np.ptp(close_windows, axis=1) == 0) | (scale == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        correlation = np.where(flat, 0.0, covariance / np.where(flat, 1.0, scale))
    correlation = np.clip(correlation, -1.0, 1.0)
    return pd.Series(_place(correlation, len(values), sma_period + period - 2), index=close.index,
                     name="sma_close_corr")


def rolling_volatility(returns: pd.Series, period: int) -> pd.Series:
    """Trailing sample standard deviation. Windows that reach into the warm-up of 'returns' stay undefined."""
    values = _as_array(returns, period, "rolling_volatility")
    windows = _trailing(values, period)
    deviation = windows - windows.mean(axis=1, keepdims=True)
    std = np.sqrt((deviation * deviation).sum(axis=1) / (period - 1))
    std = np.where(np.ptp(windows, axis=1) == 0, 0.0, std)
    return pd.Series(_place(std, len(values), period - 1), index=returns.index, name="vol_{}".format(period))


def vwap_close_ratio(high: pd.Series, low: pd.Series, close: pd.Series, volume: pd.Series,
                     period: int) -> pd.Series:
    h = _as_array(high, period, "vwap_close_ratio")
    l = _as_array(low, period, "vwap_close_ratio")
    c = _as_array(close, period, "vwap_close_ratio")
    v = _as_array(volume, period, "vwap_close_ratio")
    if (v < 0).any():
        raise FeatureError("vwap_close_ratio needs non-negative volumes")
    _check_positive(c, "vwap_close_ratio")
    typical = (h + l + c) / 3.0
    turnover = _trailing(typical * v, period).sum(axis=1)
    traded = _trailing(v, period).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        # No volume in the window: fall back to the plain mean of typical price.
        vwap = np.where(traded > 0, turnover / np.where(traded > 0, traded, 1.0),
                        _trailing(typical, period).mean(axis=1))
    return pd.Series(_place(vwap, len(c), period - 1) / c, index=close.index, name="vwap_close_ratio")


def build_features(panel: DataPipeline.AlignedPanel, symbol: str, spec: FeatureSpec = FeatureSpec()) -> FeatureMatrix:
    frame = panel.get_frame(symbol)
    warmup = spec.warmup_length()
    if len(frame) <= max(warmup, 2 * spec.adx_period):
        raise FeatureError("{} bars are not enough for a warm-up of {} bars".format(len(frame), warmup),
                           symbol=symbol)
    high, low, close, volume = frame["high"], frame["low"], frame["close"], frame["volume"]
    ret_short = simple_returns(close, spec.return_lag_short)
    ret_medium = simple_returns(close, spec.return_lag_medium)
    columns = {"ret_1": ret_short,
               "ret_15": ret_medium,
               "rsi_14": rsi(close, spec.rsi_period),
               "adx_14": adx(high, low, close, spec.adx_period),
               "sma_close_ratio": sma_close_ratio(close, spec.sma_period),
               "sma_close_corr": sma_close_corr(close, spec.corr_period, spec.sma_period),
               "vol_14": rolling_volatility(ret_short, spec.vol_period),
               "vol_210": rolling_volatility(ret_medium, spec.vol_period),
               "vwap_close_ratio": vwap_close_ratio(high, low, close, volume, spec.vwap_period)}
    matrix = pd.DataFrame({name: columns[name].to_numpy() for name in FEATURE_NAMES}, index=frame.index)
    first_defined = [int(np.argmax(np.isfinite(matrix[name].to_numpy()))) for name in FEATURE_NAMES]
    warmup_length = max(first_defined)
    retained = matrix.iloc[warmup_length:]
    if not np.isfinite(retained.to_numpy()).all():
        raise FeatureError("undefined feature values after the warm-up", symbol=symbol)
    logger.debug("%s: %d feature rows after a warm-up of %d bars", symbol, len(retained), warmup_length)
    return FeatureMatrix(symbol, retained, warmup_length)


def build_labels(close: pd.Series, feature_index: pd.DatetimeIndex, symbol: str = "") -> LabelVector:
    """1 where the next bar's close-to-close return is strictly positive, else 0. The last price bar has no next bar
    and is left out."""
    if not feature_index.isin(close.index).all():
        raise FeatureError("feature rows are not a subsequence of the price index", symbol=symbol or None)
    values = close.to_numpy(dtype=float)
    ahead = np.full(len(values), np.nan)
    ahead[:-1] = values[1:] / values[:-1] - 1.0
    labels = pd.Series(np.where(ahead > 0, 1, 0), index=close.index, name=LABEL_COLUMN)
    labels = labels.iloc[:-1]
    return LabelVector(symbol, labels[labels.index.isin(feature_index)])


def label_dataset(features: FeatureMatrix, labels: LabelVector) -> t.Tuple[FeatureMatrix, LabelVector]:
    """Keeps the feature rows that carry a label, dropping the final price bar."""
    index = features.get_index().intersection(labels.get_index(), sort=False)
    return features.restrict(index), LabelVector(labels.symbol, labels.values.loc[index])


# region Persistence
def render_features(features: FeatureMatrix, labels: t.Optional[LabelVector] = None) -> str:
    header = ("timestamp",) + FEATURE_NAMES + ((LABEL_COLUMN,) if labels is not None else ())
    label_map = labels.values if labels is not None else None
    rows = []
    for stamp, *values in features.frame[list(FEATURE_NAMES)].itertuples(index=True, name=None):
        row = [format_timestamp(stamp)] + [format_float(value) for value in values]
        if label_map is not None:
            # The final price bar has features but no label.
            row.append(str(int(label_map[stamp])) if stamp in label_map.index else "")
        rows.append(row)
    return Storage.render_csv(header, rows)


def read_features(file_path: str, symbol: str) -> t.Tuple[FeatureMatrix, t.Optional[LabelVector]]:
    with_label = ("timestamp",) + FEATURE_NAMES + (LABEL_COLUMN,)
    try:
        rows, has_label = Storage.read_csv(file_path, with_label), True
    except Storage.DocumentError:
        rows, has_label = Storage.read_csv(file_path, ("timestamp",) + FEATURE_NAMES), False
    width = len(FEATURE_NAMES) + 1 + int(has_label)
    stamps, values, labels = [], [], {}
    for line, fields_ in rows:
        if len(fields_) != width:
            raise FeatureError("{}, line {}: expected {} fields".format(file_path, line, width), symbol=symbol)
        try:
            values.append([float(field) for field in fields_[1:1 + len(FEATURE_NAMES)]])
            if has_label and fields_[-1] != "":
                labels[len(stamps)] = int(fields_[-1])
        except ValueError:
            raise FeatureError("{}, line {}: malformed value".format(file_path, line), symbol=symbol)
        stamps.append(fields_[0])
    index = DataPipeline.parse_timestamps(stamps, [line for line, _ in rows], file_path)
    index.name = "timestamp"
    frame = pd.DataFrame(values, index=index, columns=list(FEATURE_NAMES))
    vector = None
    if has_label:
        positions = sorted(labels)
        vector = LabelVector(symbol, pd.Series([labels[p] for p in positions], index=index[positions],
                                               name=LABEL_COLUMN, dtype=np.int64))
    return FeatureMatrix(symbol, frame, 0), vector
# endregion


class FeatureError(PipelineError):
    def __init__(self, message: str, symbol: t.Optional[str] = None):
        """Raised when a series is too short or otherwise unusable for an indicator."""
        super().__init__(message, symbol=symbol, stage="features")
