"""Binary classification trees grown greedily on Gini impurity, one per symbol."""
from Util import PipelineError, format_float, format_timestamp
from dataclasses import dataclass, fields
import typing as t
import logging
import json
import math
import numpy as np
import pandas as pd
import DataPipeline
import Features
import Storage
logger = logging.getLogger(__name__)
MODEL_KIND = "decision_tree_classifier"
MODEL_VERSION = 1
INDENT = "    "


@dataclass(frozen=True)
class TrainConfig:
    max_depth: int = 4
    min_samples_split: int = 2
    min_gain: float = 0.0  # a split must beat this strictly

    def __post_init__(self):
        if not isinstance(self.max_depth, int) or isinstance(self.max_depth, bool) or self.max_depth < 1:
            raise TreeError("max_depth must be an integer >= 1, got {!r}".format(self.max_depth))
        if (not isinstance(self.min_samples_split, int) or isinstance(self.min_samples_split, bool)
                or self.min_samples_split < 2):
            raise TreeError("min_samples_split must be an integer >= 2, got {!r}".format(self.min_samples_split))
        if (not isinstance(self.min_gain, (int, float)) or isinstance(self.min_gain, bool)
                or not math.isfinite(self.min_gain) or self.min_gain < 0):
            raise TreeError("min_gain must be a finite number >= 0, got {!r}".format(self.min_gain))

    @classmethod
    def from_mapping(cls, values: t.Mapping[str, t.Any]) -> "TrainConfig":
        known = {field.name for field in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise TreeError("unknown tree setting(s): {}".format(", ".join(unknown)))
        values = dict(values)
        if "min_gain" in values and isinstance(values["min_gain"], int) and not isinstance(values["min_gain"], bool):
            values["min_gain"] = float(values["min_gain"])
        return cls(**values)

    def to_document(self) -> t.Dict[str, t.Any]:
        return {"max_depth": self.max_depth, "min_samples_split": self.min_samples_split,
                "min_gain": float(self.min_gain)}


@dataclass(frozen=True)
class Leaf:
    counts: t.Tuple[int, int]
    prediction: int


@dataclass(frozen=True)
class Split:
    feature: int  # column position in the model's feature_names
    threshold: float
    left: "TreeNode"  # value <= threshold
    right: "TreeNode"


TreeNode = t.Union[Leaf, Split]


def leaf_for(counts: t.Tuple[int, int]) -> Leaf:
    # A tied node predicts 0 (stay flat).
    return Leaf((int(counts[0]), int(counts[1])), 1 if counts[1] > counts[0] else 0)


def node_depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(node_depth(node.left), node_depth(node.right))


def node_counts(node: TreeNode) -> t.Tuple[int, int]:
    if isinstance(node, Leaf):
        return node.counts
    left, right = node_counts(node.left), node_counts(node.right)
    return left[0] + right[0], left[1] + right[1]


def iter_splits(node: TreeNode) -> t.Iterator[Split]:
    if isinstance(node, Split):
        yield node
        yield from iter_splits(node.left)
        yield from iter_splits(node.right)


@dataclass(frozen=True)
class DecisionTreeModel:
    root: TreeNode
    feature_names: t.Tuple[str, ...]
    config: TrainConfig
    train_range: t.Optional[DataPipeline.TimeRange] = None

    def __post_init__(self):
        names = tuple(self.feature_names)
        if not names:
            raise TreeError("a model needs at least one feature name")
        if len(names) > len(Features.FEATURE_NAMES):
            raise TreeError("a model takes at most {} feature names, got {}"
                            .format(len(Features.FEATURE_NAMES), len(names)))
        unknown = [name for name in names if name not in Features.FEATURE_NAMES]
        if unknown:
            raise TreeError("unknown feature name(s): {}".format(", ".join(unknown)))
        if len(set(names)) != len(names):
            raise TreeError("duplicate feature names: {}".format(", ".join(names)))
        object.__setattr__(self, "feature_names", names)
        for split in iter_splits(self.root):
            if not 0 <= split.feature < len(names):
                raise TreeError("split on feature position {} outside the {} model features"
                                .format(split.feature, len(names)))
        if self.get_depth() > self.config.max_depth:
            raise TreeError("tree depth {} exceeds max_depth {}".format(self.get_depth(), self.config.max_depth))

    def get_depth(self) -> int:
        return node_depth(self.root)

    def get_internal_count(self) -> int:
        return sum(1 for _ in iter_splits(self.root))


# region Training
def gini(class_counts: t.Tuple[float, float]) -> float:
    count_0, count_1 = class_counts
    total = count_0 + count_1
    if not total > 0:
        raise TreeError("gini of an empty node")
    p_0 = count_0 / total
    p_1 = count_1 / total
    return 1.0 - p_0 * p_0 - p_1 * p_1


def _gini_arrays(count_0: np.ndarray, count_1: np.ndarray) -> np.ndarray:
    # Same operation order as gini() so scalar and vector results agree bit for bit.
    total = count_0 + count_1
    p_0 = count_0 / total
    p_1 = count_1 / total
    return 1.0 - p_0 * p_0 - p_1 * p_1


def midpoint(low: float, high: float) -> float:
    """Threshold between two consecutive distinct values. If rounding lands the midpoint on 'high', 'low' is used so
    the two values still fall on different sides."""
    middle = (low + high) / 2.0
    return low if middle >= high else middle


def best_split(X: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig()) \
        -> t.Optional[t.Tuple[int, float, float]]:
    """Returns (feature position, threshold, gain) of the best split, or None when no candidate beats min_gain.
    Ties go to the lowest feature position, then the lowest threshold."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n = len(y)
    if n < config.min_samples_split or n < 2:
        return None
    total_1 = float(np.count_nonzero(y == 1))
    parent = gini((n - total_1, total_1))
    best = None
    for feature in range(X.shape[1]):
        order = np.argsort(X[:, feature], kind="stable")
        values = X[order, feature]
        ones_before = np.cumsum(y[order] == 1)
        cut = np.nonzero(values[1:] > values[:-1])[0]  # split after position 'cut'
        if not len(cut):
            continue
        left_n = (cut + 1).astype(float)
        left_1 = ones_before[cut].astype(float)
        left_0 = left_n - left_1
        right_n = n - left_n
        right_1 = total_1 - left_1
        right_0 = right_n - right_1
        gains = parent - (left_n / n) * _gini_arrays(left_0, left_1) - (right_n / n) * _gini_arrays(right_0, right_1)
        position = int(np.argmax(gains))
        gain = float(gains[position])
        if gain > config.min_gain and (best is None or gain > best[2]):
            low, high = values[cut[position]], values[cut[position] + 1]
            best = (feature, midpoint(float(low), float(high)), gain)
    return best


def _check_training_input(X: np.ndarray, y: np.ndarray, feature_names: t.Sequence[str]) -> None:
    if X.ndim != 2:
        raise TreeError("training rows must form a 2-D matrix")
    if len(X) == 0:
        raise TreeError("empty training set")
    if len(X) != len(y):
        raise TreeError("{} training rows but {} labels".format(len(X), len(y)))
    if X.shape[1] != len(feature_names):
        raise TreeError("{} feature columns but {} feature names".format(X.shape[1], len(feature_names)))
    if not np.isfinite(X).all():
        raise TreeError("training rows contain non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise TreeError("labels must be 0 or 1")


def fit(X: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig(),
        feature_names: t.Sequence[str] = Features.FEATURE_NAMES,
        train_range: t.Optional[DataPipeline.TimeRange] = None) -> DecisionTreeModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    _check_training_input(X, y, feature_names)

    def grow(rows: np.ndarray, depth: int) -> TreeNode:
        count_1 = int(np.count_nonzero(y[rows]))
        counts = (len(rows) - count_1, count_1)
        if 0 in counts or depth == config.max_depth or len(rows) < config.min_samples_split:
            return leaf_for(counts)
        found = best_split(X[rows], y[rows], config)
        if found is None:
            return leaf_for(counts)
        feature, threshold, _ = found
        goes_left = X[rows, feature] <= threshold
        return Split(feature, threshold, grow(rows[goes_left], depth + 1), grow(rows[~goes_left], depth + 1))

    model = DecisionTreeModel(grow(np.arange(len(y)), 0), tuple(feature_names), config, train_range)
    logger.debug("Fitted tree: depth %d, %d internal nodes on %d rows", model.get_depth(),
                 model.get_internal_count(), len(y))
    return model


def fit_features(features: Features.FeatureMatrix, labels: Features.LabelVector,
                 config: TrainConfig = TrainConfig(),
                 train_range: t.Optional[DataPipeline.TimeRange] = None) -> DecisionTreeModel:
    features, labels = Features.label_dataset(features, labels)
    try:
        return fit(features.to_numpy(), labels.to_numpy(), config, Features.FEATURE_NAMES, train_range)
    except TreeError as error:
        raise TreeError(error.message, symbol=features.symbol)
# endregion


# region Prediction
def _as_row(model: DecisionTreeModel, row: t.Sequence[float]) -> np.ndarray:
    values = np.asarray(row, dtype=float)
    if values.shape != (len(model.feature_names),):
        raise TreeError("expected {} feature values, got shape {}".format(len(model.feature_names), values.shape))
    if not np.isfinite(values).all():
        raise TreeError("non-finite feature value in {}".format(values.tolist()))
    return values


def predict(model: DecisionTreeModel, row: t.Sequence[float]) -> int:
    values = _as_row(model, row)
    node = model.root
    while isinstance(node, Split):
        node = node.left if values[node.feature] <= node.threshold else node.right
    return node.prediction


def predict_matrix(model: DecisionTreeModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise TreeError("expected rows of {} feature values, got shape {}".format(len(model.feature_names), X.shape))
    if not np.isfinite(X).all():
        raise TreeError("non-finite feature value in prediction input")
    out = np.zeros(len(X), dtype=np.int64)

    def route(node: TreeNode, rows: np.ndarray) -> None:
        if isinstance(node, Leaf):
            out[rows] = node.prediction
            return
        goes_left = X[rows, node.feature] <= node.threshold
        route(node.left, rows[goes_left])
        route(node.right, rows[~goes_left])

    route(model.root, np.arange(len(X)))
    return out


def predict_features(model: DecisionTreeModel, features: Features.FeatureMatrix) -> pd.Series:
    """One signal per feature row, indexed like the matrix."""
    missing = [name for name in model.feature_names if name not in features.frame.columns]
    if missing:
        raise TreeError("feature matrix lacks model feature(s): {}".format(", ".join(missing)), symbol=features.symbol)
    X = features.frame[list(model.feature_names)].to_numpy(dtype=float)
    return pd.Series(predict_matrix(model, X), index=features.get_index(), name="signal")
# endregion


# region Inspection
def feature_usage(model: DecisionTreeModel) -> t.FrozenSet[str]:
    return frozenset(model.feature_names[split.feature] for split in iter_splits(model.root))


def feature_importance(model: DecisionTreeModel) -> t.Dict[str, float]:
    """Size-weighted Gini decrease summed per feature and normalised to sum to 1. All zeros for a single leaf."""
    totals = [0.0] * len(model.feature_names)
    for split in iter_splits(model.root):
        counts, left, right = node_counts(split), node_counts(split.left), node_counts(split.right)
        totals[split.feature] += (sum(counts) * gini(counts) - sum(left) * gini(left) - sum(right) * gini(right))
    overall = sum(totals)
    if overall > 0:
        totals = [value / overall for value in totals]
    return {name: value for name, value in zip(model.feature_names, totals)}
# endregion


# region Export
class RuleExport(t.NamedTuple):
    text: str
    dot: str


def _leaf_text(leaf: Leaf) -> str:
    return "predict {} counts=[{}, {}]".format(leaf.prediction, leaf.counts[0], leaf.counts[1])


def _condition_text(model: DecisionTreeModel, split: Split) -> str:
    return "{} <= {}".format(model.feature_names[split.feature], format_float(split.threshold))


def render_rule_text(model: DecisionTreeModel) -> str:
    """Indented if/then/else rules. A child line starts with 'then ' (value <= threshold) or 'else ' and is indented
    one level deeper than its parent."""
    lines = []

    def walk(node: TreeNode, depth: int, prefix: str) -> None:
        head = INDENT * depth + prefix
        if isinstance(node, Leaf):
            lines.append(head + _leaf_text(node))
            return
        lines.append(head + "if " + _condition_text(model, node))
        walk(node.left, depth + 1, "then ")
        walk(node.right, depth + 1, "else ")

    walk(model.root, 0, "")
    return "\n".join(lines) + "\n"


def render_dot(model: DecisionTreeModel) -> str:
    lines = ["digraph tree {", "  node [shape=box];"]
    edges = []
    counter = iter(range(2 ** (model.get_depth() + 1)))

    def walk(node: TreeNode) -> int:
        node_id = next(counter)
        if isinstance(node, Leaf):
            lines.append('  n{} [label="{}"];'.format(node_id, _leaf_text(node)))
            return node_id
        lines.append('  n{} [label="{}"];'.format(node_id, _condition_text(model, node)))
        left_id = walk(node.left)
        right_id = walk(node.right)
        edges.append('  n{} -> n{} [label="<="];'.format(node_id, left_id))
        edges.append('  n{} -> n{} [label=">"];'.format(node_id, right_id))
        return node_id

    walk(model.root)
    return "\n".join(lines + edges + ["}"]) + "\n"


def export_rules(model: DecisionTreeModel) -> RuleExport:
    return RuleExport(render_rule_text(model), render_dot(model))
# endregion


# region Persistence
def _node_to_document(model: DecisionTreeModel, node: TreeNode) -> t.Dict[str, t.Any]:
    if isinstance(node, Leaf):
        return {"counts": [node.counts[0], node.counts[1]], "prediction": node.prediction}
    return {"feature": model.feature_names[node.feature],
            "threshold": float(node.threshold),
            "left": _node_to_document(model, node.left),
            "right": _node_to_document(model, node.right)}


def serialize(model: DecisionTreeModel) -> t.Dict[str, t.Any]:
    train_range = None
    if model.train_range is not None:
        train_range = {"start": format_timestamp(model.train_range.start),
                       "end": format_timestamp(model.train_range.end)}
    return {"kind": MODEL_KIND,
            "version": MODEL_VERSION,
            "feature_names": list(model.feature_names),
            "config": model.config.to_document(),
            "train_range": train_range,
            "tree": _node_to_document(model, model.root)}


def render_model(model: DecisionTreeModel) -> str:
    return Storage.render_json(serialize(model))


def _is_count(value: t.Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _node_from_document(document: t.Any, feature_names: t.Sequence[str], depth: int, limit: int) -> TreeNode:
    if not isinstance(document, dict):
        raise TreeError("tree node must be an object, got {!r}".format(document))
    if depth > limit:
        raise TreeError("tree is deeper than max_depth {}".format(limit))
    if set(document) == {"counts", "prediction"}:
        counts = document["counts"]
        if not isinstance(counts, list) or len(counts) != 2 or not all(_is_count(c) for c in counts):
            raise TreeError("leaf counts must be two non-negative integers, got {!r}".format(counts))
        if document["prediction"] not in (0, 1) or isinstance(document["prediction"], bool):
            raise TreeError("leaf prediction must be 0 or 1, got {!r}".format(document["prediction"]))
        leaf = leaf_for((counts[0], counts[1]))
        if leaf.prediction != document["prediction"]:
            raise TreeError("leaf prediction {} is not the majority class of counts {}".format(document["prediction"],
                                                                                             counts))
        return leaf
    if set(document) == {"feature", "threshold", "left", "right"}:
        if document["feature"] not in feature_names:
            raise TreeError("split on unknown feature {!r}".format(document["feature"]))
        threshold = document["threshold"]
        if (not isinstance(threshold, (int, float)) or isinstance(threshold, bool)
                or not math.isfinite(threshold)):
            raise TreeError("threshold must be a finite number, got {!r}".format(threshold))
        if depth == limit:
            raise TreeError("tree is deeper than max_depth {}".format(limit))
        return Split(list(feature_names).index(document["feature"]), float(threshold),
                     _node_from_document(document["left"], feature_names, depth + 1, limit),
                     _node_from_document(document["right"], feature_names, depth + 1, limit))
    raise TreeError("tree node has unexpected keys: {}".format(sorted(document)))


def deserialize(document: t.Any) -> DecisionTreeModel:
    if not isinstance(document, dict):
        raise TreeError("model document must be an object")
    expected = {"kind", "version", "feature_names", "config", "train_range", "tree"}
    if set(document) != expected:
        raise TreeError("model document keys {} differ from {}".format(sorted(document), sorted(expected)))
    if document["kind"] != MODEL_KIND or document["version"] != MODEL_VERSION:
        raise TreeError("unsupported model kind/version {!r}/{!r}".format(document["kind"], document["version"]))
    feature_names = document["feature_names"]
    if not isinstance(feature_names, list) or not all(isinstance(name, str) for name in feature_names):
        raise TreeError("feature_names must be a list of strings")
    if not isinstance(document["config"], dict):
        raise TreeError("config must be an object")
    config = TrainConfig.from_mapping(document["config"])
    train_range = None
    if document["train_range"] is not None:
        bounds = document["train_range"]
        if not isinstance(bounds, dict) or set(bounds) != {"start", "end"}:
            raise TreeError("train_range must be null or an object with start and end")
        try:
            train_range = DataPipeline.TimeRange(pd.Timestamp(bounds["start"]), pd.Timestamp(bounds["end"]))
        except (ValueError, TypeError, DataPipeline.DataError) as error:
            raise TreeError("invalid train_range: {}".format(error))
    # Checked here so the name list is validated before tree nodes refer to it.
    DecisionTreeModel(Leaf((0, 0), 0), tuple(feature_names), config)
    root = _node_from_document(document["tree"], feature_names, 0, config.max_depth)
    return DecisionTreeModel(root, tuple(feature_names), config, train_range)


def read_model(file_path: str) -> DecisionTreeModel:
    text = Storage.read_text(file_path)
    try:
        document = json.loads(text)
    except ValueError as error:
        raise Storage.DocumentError(file_path, "not valid JSON ({})".format(error))
    try:
        return deserialize(document)
    except TreeError as error:
        raise Storage.DocumentError(file_path, error.message)
# endregion


class TreeError(PipelineError):
    def __init__(self, message: str, symbol: t.Optional[str] = None):
        """Raised for invalid training input, malformed model documents and unusable prediction rows."""
        super().__init__(message, symbol=symbol, stage="train")
