import typing as t
import math
import os
import pandas as pd
COLORS = {"WHITE": "#ffffff",
          "RED": "#d64541",
          "GREEN": "#4caf50",
          "BLUE": "#1a86db",
          "GREY1": "#f0f0f0",
          "GREY3": "#d1d1d1",
          "GREY6": "#606060",
          "BLACK": "#000000"}
NA_TEXT = "NA"
INF_TEXT = "inf"


def format_float(value: float) -> str:
    # repr is the shortest text that parses back to the same double.
    return repr(float(value))


def format_metric(value: t.Optional[float]) -> str:
    if value is None:
        return NA_TEXT
    if math.isinf(value) and value > 0:
        return INF_TEXT
    return format_float(value)


def metric_to_json(value: t.Optional[float]) -> t.Union[float, str]:
    """JSON has no NaN/Infinity, so undefined and unbounded metrics are written as the "NA" and "inf" markers."""
    if value is None or (math.isinf(value) and value > 0):
        return format_metric(value)
    return float(value)


def parse_metric(text: t.Union[str, float, int, None]) -> t.Optional[float]:
    if text is None or text == NA_TEXT:
        return None
    if text == INF_TEXT:
        return math.inf
    return float(text)


def format_timestamp(stamp: pd.Timestamp) -> str:
    return stamp.isoformat()


def resolve_jobs(jobs: int) -> int:
    if jobs > 0:
        return jobs
    return os.cpu_count() or 1


class PipelineError(Exception):
    def __init__(self, message: str, symbol: t.Optional[str] = None, stage: t.Optional[str] = None):
        """Base class of every error raised while ingesting, computing or writing pipeline data."""
        prefix = ""
        if symbol is not None and stage is not None:
            prefix = "[{} / {}] ".format(symbol, stage)
        elif symbol is not None or stage is not None:
            prefix = "[{}] ".format(symbol if symbol is not None else stage)
        super().__init__(prefix + message)
        self.message = message
        self.symbol = symbol
        self.stage = stage

    def get_symbol(self) -> t.Optional[str]:
        return self.symbol

    def get_stage(self) -> t.Optional[str]:
        return self.stage
