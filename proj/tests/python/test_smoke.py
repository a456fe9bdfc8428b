"""Smoke tests for the Python bindings. Runnable directly or under pytest."""

import math
import os
import random
import tempfile

import nodetab


def make_sign_task(rows, seed):
    rng = random.Random(seed)
    features, labels = [], []
    for _ in range(rows):
        x0 = (1 if rng.random() < 0.5 else -1) * (0.5 + 2.5 * rng.random())
        features.append([x0, rng.uniform(-1, 1), rng.uniform(-1, 1)])
        labels.append("pos" if x0 > 0 else "neg")
    return features, labels


def test_row_transforms():
    p = nodetab.entmax([2.0, 0.0])
    assert p == [1.0, 0.0]
    p = nodetab.entmax([0.3, 0.1, -0.4])
    assert abs(sum(p) - 1.0) < 1e-12 and all(v >= 0 for v in p)
    s = nodetab.softmax([1.0, 1.0])
    assert abs(s[0] - 0.5) < 1e-12
    sp = nodetab.sparsemax([0.2, 0.2, -5.0])
    assert sp[2] == 0.0
    assert nodetab.gate(0.0) == 0.5
    assert nodetab.gate(2.0) == 1.0 and nodetab.gate(-2.0) == 0.0
    assert abs(nodetab.saturation_gap(1.5) - 2.0) < 1e-9


def test_classifier_roundtrip():
    features, labels = make_sign_task(300, seed=7)
    model = nodetab.train(
        features,
        labels,
        task="classification",
        trees=4,
        depth=2,
        max_steps=300,
        learning_rate=0.02,
        seed=1,
    )
    assert model.task == "classification"
    assert model.class_labels == ["neg", "pos"]
    assert model.feature_dim == 3
    assert model.parameter_count > 0

    probs = model.predict(features)
    assert len(probs) == len(features)
    for row in probs:
        assert abs(sum(row) - 1.0) < 1e-9

    scores = model.evaluate(features, labels)
    assert scores["accuracy"] >= 0.95

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.bin")
        model.save(path)
        reloaded = nodetab.Model.load(path)
        assert reloaded.predict(features) == probs

        compiled_path = os.path.join(tmp, "model.compiled")
        dropped = model.compile_to(compiled_path)
        assert 0.0 <= dropped <= 1.0
        assert os.path.getsize(compiled_path) > 0

    importance = model.feature_importance(features, labels, repeats=3, seed=0)
    by_name = {r["feature"]: r["mean"] for r in importance}
    assert by_name["f0"] > by_name["f1"]
    assert by_name["f0"] > by_name["f2"]

    contributions = model.tree_contributions(features)
    assert len(contributions) == 4
    assert all(c >= 0 for c in contributions)


def test_regressor():
    rng = random.Random(3)
    features = [[rng.uniform(-1, 1), rng.uniform(-1, 1)] for _ in range(300)]
    targets = [2.0 * x0 + 0.1 * x1 for x0, x1 in features]
    model = nodetab.train(
        features,
        targets,
        task="regression",
        trees=8,
        depth=3,
        max_steps=400,
        learning_rate=0.02,
        normalize_targets=True,
        seed=2,
    )
    assert model.task == "regression"
    predictions = model.predict(features)
    mse = sum((p - t) ** 2 for p, t in zip(predictions, targets)) / len(targets)
    variance = sum(t**2 for t in targets) / len(targets)
    assert mse < 0.5 * variance
    assert not math.isnan(model.best_val_metric)


def test_errors():
    try:
        nodetab.train([[1.0], [2.0]], ["a", "b"], task="clustering")
    except ValueError as e:
        assert "task" in str(e)
    else:
        raise AssertionError("bad task accepted")

    try:
        nodetab.train([[1.0], [2.0, 3.0]], ["a", "b"])
    except ValueError as e:
        assert "ragged" in str(e)
    else:
        raise AssertionError("ragged rows accepted")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name}: ok")
    print("python smoke: all passed")
