from conftest import bundled_series, scale_prices
import json
import os
import re
import numpy as np
import pandas as pd
import pytest
import Cart
import DataPipeline
import Features
import Storage

THREE = Features.FEATURE_NAMES[:3]
STAIRS_X = np.array([[1.0], [2.0], [3.0], [4.0]])
STAIRS_Y = np.array([0, 0, 1, 1])


def random_dataset(seed, rows=None, columns=3):
    rng = np.random.default_rng(seed)
    rows = rows or int(rng.integers(2, 101))
    # Few distinct values so equal-gain candidates and repeated values come up often.
    X = rng.integers(0, 6, (rows, columns)).astype(float)
    X[:, 0] += rng.normal(0.0, 1.0, rows) * (seed % 2)
    y = (rng.random(rows) < 0.2 + 0.6 * (X[:, 1] > 2)).astype(np.int64)
    return X, y


# region Exhaustive oracle
def oracle_gini(labels):
    ones = sum(labels)
    p_1 = ones / len(labels)
    p_0 = (len(labels) - ones) / len(labels)
    return 1.0 - p_0 * p_0 - p_1 * p_1


def oracle_midpoint(low, high):
    middle = (low + high) / 2.0
    return low if middle >= high else middle


def oracle_split(X, y, rows, config):
    n = len(rows)
    parent = oracle_gini([y[r] for r in rows])
    best = None
    for feature in range(X.shape[1]):
        values = sorted(set(X[r, feature] for r in rows))
        for low, high in zip(values, values[1:]):
            threshold = oracle_midpoint(low, high)
            left = [y[r] for r in rows if X[r, feature] <= threshold]
            right = [y[r] for r in rows if X[r, feature] > threshold]
            gain = parent - (len(left) / n) * oracle_gini(left) - (len(right) / n) * oracle_gini(right)
            if gain > config.min_gain and (best is None or gain > best[2]):
                best = (feature, threshold, gain)
    return best


def oracle_tree(X, y, rows, depth, config, names):
    ones = int(sum(y[r] for r in rows))
    counts = [len(rows) - ones, ones]
    leaf = {"counts": counts, "prediction": 1 if counts[1] > counts[0] else 0}
    if 0 in counts or depth == config.max_depth or len(rows) < config.min_samples_split:
        return leaf
    found = oracle_split(X, y, rows, config)
    if found is None:
        return leaf
    feature, threshold, _ = found
    return {"feature": names[feature], "threshold": threshold,
            "left": oracle_tree(X, y, [r for r in rows if X[r, feature] <= threshold], depth + 1, config, names),
            "right": oracle_tree(X, y, [r for r in rows if X[r, feature] > threshold], depth + 1, config, names)}
# endregion


def interpret_rules(text, row):
    """Evaluates rule text on a {feature name: value} mapping."""
    lines = [line.strip() for line in text.splitlines()]
    position = 0

    def evaluate():
        nonlocal position
        line = lines[position]
        position += 1
        for prefix in ("then ", "else "):
            if line.startswith(prefix):
                line = line[len(prefix):]
        if line.startswith("predict "):
            return int(line.split()[1])
        name, threshold = re.match(r"^if (\S+) <= (\S+)$", line).groups()
        left, right = evaluate(), evaluate()
        return left if row[name] <= float(threshold) else right

    return evaluate()


def test_gini():
    assert Cart.gini((10, 0)) == 0.0
    assert Cart.gini((5, 5)) == 0.5
    assert Cart.gini((3, 1)) == 0.375
    with pytest.raises(Cart.TreeError):
        Cart.gini((0, 0))


def test_best_split():
    assert Cart.best_split(STAIRS_X, STAIRS_Y) == (0, 2.5, 0.5)
    xor_x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    assert Cart.best_split(xor_x, np.array([0, 1, 1, 0])) is None
    assert Cart.best_split(STAIRS_X, STAIRS_Y, Cart.TrainConfig(min_gain=0.5)) is None
    assert Cart.best_split(np.array([[1.0], [1.0]]), np.array([0, 1])) is None


def test_best_split_prefers_lowest_feature_and_threshold():
    # Both columns separate the classes perfectly.
    X = np.array([[1.0, 5.0], [2.0, 6.0], [3.0, 7.0], [4.0, 8.0]])
    assert Cart.best_split(X[:, ::-1], STAIRS_Y)[0] == 0
    # Cutting after the second or the fourth value gains the same.
    feature, threshold, _ = Cart.best_split(np.arange(1.0, 7.0).reshape(-1, 1), np.array([0, 0, 1, 1, 0, 0]))
    assert feature == 0 and threshold == 2.5


def test_midpoint_stays_below_high():
    low = 1.0
    high = np.nextafter(1.0, 2.0)
    assert Cart.midpoint(low, high) == low
    assert Cart.midpoint(2.0, 3.0) == 2.5


@pytest.mark.parametrize("seed", range(50))
def test_fit_matches_exhaustive_oracle(seed):
    X, y = random_dataset(seed)
    config = Cart.TrainConfig(max_depth=1 + seed % 2, min_samples_split=2 + seed % 3)
    model = Cart.fit(X, y, config, THREE)
    expected = oracle_tree(X, y, list(range(len(y))), 0, config, THREE)
    assert json.dumps(Cart.serialize(model)["tree"]) == json.dumps(expected)


def test_fit_examples():
    model = Cart.fit(STAIRS_X, np.ones(4, dtype=np.int64), feature_names=("ret_1",))
    assert model.root == Cart.Leaf((0, 4), 1)
    model = Cart.fit(STAIRS_X, STAIRS_Y, Cart.TrainConfig(max_depth=1), ("ret_1",))
    assert model.root == Cart.Split(0, 2.5, Cart.Leaf((2, 0), 0), Cart.Leaf((0, 2), 1))
    tied = Cart.fit(np.array([[1.0], [1.0]]), np.array([0, 1]), feature_names=("ret_1",))
    assert tied.root == Cart.Leaf((1, 1), 0)


def test_fit_rejects_bad_input():
    with pytest.raises(Cart.TreeError):
        Cart.fit(np.empty((0, 1)), np.empty(0), feature_names=("ret_1",))
    with pytest.raises(Cart.TreeError):
        Cart.fit(np.array([[np.nan]]), np.array([1]), feature_names=("ret_1",))
    with pytest.raises(Cart.TreeError):
        Cart.fit(STAIRS_X, np.array([0, 2, 1, 1]), feature_names=("ret_1",))
    with pytest.raises(Cart.TreeError):
        Cart.fit(STAIRS_X, STAIRS_Y, feature_names=("ret_1", "ret_15"))
    with pytest.raises(Cart.TreeError):
        Cart.TrainConfig(min_samples_split=1)
    with pytest.raises(Cart.TreeError):
        Cart.TrainConfig.from_mapping({"depth": 3})


@pytest.mark.parametrize("depth", [1, 3, 4, 6])
def test_tree_size_is_bounded(depth):
    X, y = random_dataset(depth, rows=600, columns=9)
    model = Cart.fit(X, y, Cart.TrainConfig(max_depth=depth))
    assert model.get_depth() <= depth
    assert model.get_internal_count() <= 2 ** depth - 1
    assert sum(Cart.node_counts(model.root)) == 600


def test_prediction():
    leaf_model = Cart.fit(STAIRS_X, np.ones(4, dtype=np.int64), feature_names=("ret_1",))
    assert Cart.predict(leaf_model, [-1e9]) == 1
    model = Cart.fit(STAIRS_X, STAIRS_Y, feature_names=("ret_1",))
    assert [Cart.predict(model, [value]) for value in (2.0, 2.5, 2.6, 100.0)] == [0, 0, 1, 1]
    with pytest.raises(Cart.TreeError):
        Cart.predict(model, [1.0, 2.0])
    with pytest.raises(Cart.TreeError):
        Cart.predict(model, [np.inf])
    X, y = random_dataset(3, rows=300, columns=9)
    model = Cart.fit(X, y, Cart.TrainConfig(max_depth=5))
    rows = np.random.default_rng(4).integers(-1, 7, (200, 9)).astype(float)
    assert list(Cart.predict_matrix(model, rows)) == [Cart.predict(model, row) for row in rows]


def test_predict_features_uses_named_columns(random_panel):
    features = Features.build_features(random_panel(200, 21), "AAA")
    X = features.frame[["rsi_14"]].to_numpy()
    y = (X[:, 0] > 50).astype(np.int64)
    model = Cart.fit(X, y, feature_names=("rsi_14",))
    signals = Cart.predict_features(model, features)
    assert signals.index.equals(features.get_index())
    assert list(signals) == list(y)


def test_feature_usage():
    assert Cart.feature_usage(Cart.fit(STAIRS_X, np.zeros(4, dtype=np.int64), feature_names=("ret_1",))) == frozenset()
    X = np.column_stack([np.zeros(4), STAIRS_X[:, 0]])
    model = Cart.fit(X, STAIRS_Y, Cart.TrainConfig(max_depth=1), ("ret_1", "adx_14"))
    assert Cart.feature_usage(model) == frozenset({"adx_14"})


def test_monotone_transform_keeps_the_partition():
    X, y = random_dataset(5, rows=400, columns=3)
    X[:, 2] = np.random.default_rng(5).normal(0.0, 1.0, 400)
    model = Cart.fit(X, y, Cart.TrainConfig(max_depth=4), THREE)
    transformed = np.column_stack([X[:, 0] * 3.0 + 1.0, np.exp(X[:, 1]), np.arctan(X[:, 2])])
    other = Cart.fit(transformed, y, Cart.TrainConfig(max_depth=4), THREE)

    def shape(node):
        if isinstance(node, Cart.Leaf):
            return node.counts, node.prediction
        return node.feature, shape(node.left), shape(node.right)

    assert shape(other.root) == shape(model.root)
    assert np.array_equal(Cart.predict_matrix(other, transformed), Cart.predict_matrix(model, X))


def fit_bundled(series, config):
    panel = DataPipeline.union_align([series])
    features = Features.build_features(panel, series.symbol)
    labels = Features.build_labels(panel.get_frame(series.symbol)["close"], features.get_index(), series.symbol)
    return Cart.fit_features(features, labels, config)


def split_thresholds(node):
    if isinstance(node, Cart.Leaf):
        return []
    return [node.threshold] + split_thresholds(node.left) + split_thresholds(node.right)


@pytest.mark.parametrize("factor", [3.7, 0.3, 7.1])
def test_tree_ignores_the_price_scale(factor):
    config = Cart.TrainConfig(max_depth=6)
    reference = fit_bundled(bundled_series("AAA"), config)
    scaled = fit_bundled(scale_prices(bundled_series("AAA"), factor), config)

    def shape(node):
        if isinstance(node, Cart.Leaf):
            return node.counts, node.prediction
        return node.feature, shape(node.left), shape(node.right)

    assert reference.get_depth() > 1
    assert shape(scaled.root) == shape(reference.root)
    assert split_thresholds(scaled.root) == pytest.approx(split_thresholds(reference.root), rel=1e-9, abs=1e-10)


def test_fit_is_deterministic():
    X, y = random_dataset(6, rows=500, columns=9)
    config = Cart.TrainConfig(max_depth=5)
    assert Cart.render_model(Cart.fit(X, y, config)) == Cart.render_model(Cart.fit(X.copy(), y.copy(), config))


def test_rule_text():
    stairs = Cart.fit(STAIRS_X, STAIRS_Y, Cart.TrainConfig(max_depth=1), ("ret_1",))
    assert Cart.render_rule_text(stairs) == ("if ret_1 <= 2.5\n"
                                             "    then predict 0 counts=[2, 0]\n"
                                             "    else predict 1 counts=[0, 2]\n")
    leaf = Cart.fit(STAIRS_X, np.ones(4, dtype=np.int64), feature_names=("ret_1",))
    assert Cart.render_rule_text(leaf) == "predict 1 counts=[0, 4]\n"
    X, y = random_dataset(7, rows=500, columns=9)
    X += np.random.default_rng(7).normal(0.0, 0.1, X.shape)
    model = Cart.fit(X, y, Cart.TrainConfig(max_depth=4))
    text = Cart.export_rules(model).text
    rows = np.random.default_rng(8).normal(2.5, 2.0, (300, 9))
    for row in rows:
        assert interpret_rules(text, dict(zip(Features.FEATURE_NAMES, row))) == Cart.predict(model, row)


DOT_TOKEN = re.compile(r'\s*(?:(?P<string>"(?:[^"\\]|\\.)*")|(?P<arrow>->)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<punct>[{}\[\]=;,]))')


def tokenize_dot(text):
    tokens, position = [], 0
    while text[position:].strip():
        match = DOT_TOKEN.match(text, position)
        assert match is not None, "unexpected DOT text at {!r}".format(text[position:position + 20])
        kind = match.lastgroup
        tokens.append((kind, match.group(kind)))
        position = match.end()
    return tokens


def parse_dot(text):
    """Reads 'digraph ID { stmt* }' with node, edge and 'node [...]' statements; returns (labels, edges)."""
    tokens = tokenize_dot(text)
    assert tokens[:3] == [("id", "digraph"), ("id", "tree"), ("punct", "{")] and tokens[-1] == ("punct", "}")
    depth = 0
    for kind, value in tokens:
        depth += {"{": 1, "}": -1}.get(value, 0) if kind == "punct" else 0
        assert depth >= 0
    assert depth == 0
    body, labels, edges, position = tokens[3:-1], {}, [], 0

    def attributes():
        nonlocal position
        found = {}
        assert body[position] == ("punct", "[")
        position += 1
        while body[position] != ("punct", "]"):
            key, equals, value = body[position:position + 3]
            assert key[0] == "id" and equals == ("punct", "=") and value[0] in ("id", "string")
            found[key[1]] = value[1].strip('"')
            position += 3
            if body[position] == ("punct", ","):
                position += 1
        position += 1
        return found

    while position < len(body):
        kind, value = body[position]
        assert kind == "id"
        position += 1
        if body[position] == ("arrow", "->"):
            target = body[position + 1]
            assert target[0] == "id"
            position += 2
            edges.append((value, target[1], attributes()["label"]))
        else:
            found = attributes()
            if value != "node":
                assert value not in labels
                labels[value] = found["label"]
        assert body[position] == ("punct", ";")
        position += 1
    return labels, edges


def test_dot_export():
    X, y = random_dataset(9, rows=300, columns=9)
    model = Cart.fit(X, y, Cart.TrainConfig(max_depth=3))
    dot = Cart.render_dot(model)
    assert dot.startswith("digraph tree {\n  node [shape=box];\n") and dot.endswith("}\n")
    labels, edges = parse_dot(dot)
    internal = model.get_internal_count()
    assert len(labels) == 2 * internal + 1
    assert len(edges) == 2 * internal
    assert all(source in labels and target in labels for source, target, _ in edges)
    children = {}
    for source, target, label in edges:
        children.setdefault(source, []).append(label)
    assert all(sorted(found) == ["<=", ">"] for found in children.values())
    targets = [target for _, target, _ in edges]
    assert len(set(targets)) == len(targets) and set(labels) - set(targets) == {"n0"}
    assert sorted(labels.values()) == sorted(line.strip().replace("then ", "").replace("else ", "").replace("if ", "")
                                             for line in Cart.render_rule_text(model).splitlines())
    for name in set(labels) - set(children):
        assert labels[name].startswith("predict ")
    with pytest.raises(AssertionError):
        parse_dot(dot.replace("->", "-", 1))
    with pytest.raises(AssertionError):
        parse_dot(dot[:-2])



def test_model_document_round_trip(tmp_path):
    X, y = random_dataset(10, rows=800, columns=9)
    X += np.random.default_rng(10).normal(0.0, 1 / 3, X.shape)
    train_range = DataPipeline.TimeRange(pd.Timestamp("2022-01-01T00:00:00+05:30"),
                                         pd.Timestamp("2023-01-01T00:00:00+05:30"))
    model = Cart.fit(X, y, Cart.TrainConfig(max_depth=6, min_gain=0.001), train_range=train_range)
    path = os.path.join(str(tmp_path), "AAA.json")
    with open(path, "w", encoding="utf-8", newline="") as file:
        file.write(Cart.render_model(model))
    loaded = Cart.read_model(path)
    assert loaded == model
    assert Cart.render_model(loaded) == Cart.render_model(model)
    rows = np.random.default_rng(11).normal(2.5, 2.0, (1000, 9))
    assert np.array_equal(Cart.predict_matrix(loaded, rows), Cart.predict_matrix(model, rows))
    document = Cart.serialize(model)
    assert list(document) == ["kind", "version", "feature_names", "config", "train_range", "tree"]
    assert document["train_range"] == {"start": "2022-01-01T00:00:00+05:30", "end": "2023-01-01T00:00:00+05:30"}


def hand_document(**changes):
    document = {"kind": "decision_tree_classifier",
                "version": 1,
                "feature_names": ["ret_1", "rsi_14"],
                "config": {"max_depth": 1, "min_samples_split": 2, "min_gain": 0.0},
                "train_range": None,
                "tree": {"feature": "rsi_14", "threshold": 30.0,
                         "left": {"counts": [1, 7], "prediction": 1},
                         "right": {"counts": [9, 3], "prediction": 0}}}
    document.update(changes)
    return document


def test_hand_written_document():
    model = Cart.deserialize(hand_document())
    assert model.get_depth() == 1
    assert Cart.feature_usage(model) == frozenset({"rsi_14"})
    assert Cart.predict(model, [0.0, 25.0]) == 1
    assert Cart.predict(model, [0.0, 30.5]) == 0


@pytest.mark.parametrize("changes", [
    {"feature_names": list(Features.FEATURE_NAMES) + ["ret_1"]},
    {"feature_names": ["ret_1", "momentum"]},
    {"config": {"max_depth": 0, "min_samples_split": 2, "min_gain": 0.0}},
    {"kind": "random_forest"},
    {"tree": {"feature": "adx_14", "threshold": 1.0, "left": {"counts": [1, 0], "prediction": 0},
              "right": {"counts": [0, 1], "prediction": 1}}},
    {"tree": {"feature": "rsi_14", "threshold": 1.0,
              "left": {"feature": "ret_1", "threshold": 0.0, "left": {"counts": [1, 0], "prediction": 0},
                       "right": {"counts": [0, 1], "prediction": 1}},
              "right": {"counts": [0, 1], "prediction": 1}}},
    {"tree": {"counts": [1, 0], "prediction": 2}},
    {"tree": {"counts": [1], "prediction": 0}},
    {"tree": {"counts": [9, 3], "prediction": 1}},
    {"tree": {"counts": [4, 4], "prediction": 1}},
])
def test_invalid_documents_are_rejected(changes):
    with pytest.raises(Cart.TreeError):
        Cart.deserialize(hand_document(**changes))


def test_leaf_prediction_must_follow_the_counts():
    assert Cart.deserialize(hand_document(tree={"counts": [4, 4], "prediction": 0})).root == Cart.Leaf((4, 4), 0)
    with pytest.raises(Cart.TreeError, match="majority class"):
        Cart.deserialize(hand_document(tree={"counts": [9, 3], "prediction": 1}))


def test_read_model_reports_the_file(tmp_path):
    path = os.path.join(str(tmp_path), "broken.json")
    with open(path, "w", encoding="utf-8") as file:
        file.write("{not json")
    with pytest.raises(Storage.DocumentError) as info:
        Cart.read_model(path)
    assert info.value.get_file_path() == path


def test_feature_importance():
    X, y = random_dataset(12, rows=500, columns=9)
    importance = Cart.feature_importance(Cart.fit(X, y, Cart.TrainConfig(max_depth=4)))
    assert list(importance) == list(Features.FEATURE_NAMES)
    assert sum(importance.values()) == pytest.approx(1.0)
    assert all(value >= 0 for value in importance.values())
    assert importance["ret_15"] > 0
    leaf = Cart.fit(STAIRS_X, np.ones(4, dtype=np.int64), feature_names=("ret_1",))
    assert Cart.feature_importance(leaf) == {"ret_1": 0.0}
