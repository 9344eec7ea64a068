from __future__ import annotations

import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracellm.errors import ContractViolation, ParseError, TrainingError, ValidationError
from tracellm.model import (
    AnomalyModel,
    LabeledPath,
    LogisticScorer,
    SemanticScorer,
    TrainConfig,
    class_weights,
    dump_dataset,
    fit_logistic,
    group_by_incident,
    load_dataset,
    logo_evaluate,
    loss_and_grad,
    predict,
    rank_paths,
    rank_scores,
    recall_at_k,
    sigmoid,
    train,
)


def numeric_grad(w, b, X, y, sw, l2, eps=1e-6):
    gw = np.zeros_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = eps
        gw[j] = (loss_and_grad(w + e, b, X, y, sw, l2)[0] - loss_and_grad(w - e, b, X, y, sw, l2)[0]) / (2 * eps)
    gb = (loss_and_grad(w, b + eps, X, y, sw, l2)[0] - loss_and_grad(w, b - eps, X, y, sw, l2)[0]) / (2 * eps)
    return gw, gb


def test_gradient_matches_central_difference():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, d = rng.integers(5, 30), rng.integers(1, 8)
        X = rng.normal(size=(n, d))
        y = (rng.random(n) < 0.4).astype(float)
        y[0], y[1] = 0.0, 1.0
        w, b = rng.normal(size=d), float(rng.normal())
        sw = class_weights(y)
        _, gw, gb = loss_and_grad(w, b, X, y, sw, 1e-4)
        nw, nb = numeric_grad(w, b, X, y, sw, 1e-4)
        num = np.append(nw, nb)
        ana = np.append(gw, gb)
        assert np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12) < 1e-6


def test_sigmoid_is_stable():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s)) and s[2] == 0.5
    assert s[0] == 0.0 and s[-1] == 1.0
    assert sigmoid(0.0) == 0.5


def test_class_weights_balance_the_classes():
    y = np.array([1, 0, 0, 0], dtype=float)
    w = class_weights(y)
    assert w[y == 1].sum() == pytest.approx(w[y == 0].sum())
    assert np.all(class_weights(y, balanced=False) == 1.0)


def test_separable_blobs():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(-2, 0.5, size=(100, 4)), rng.normal(2, 0.5, size=(100, 4))])
    y = np.r_[np.zeros(100), np.ones(100)]
    m = train(X, y, vocab=[])
    assert np.mean((predict(m, X) > 0.5) == y) >= 0.99


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 6))
    y = (X[:, 0] > 0).astype(float)
    a = train(X, y, vocab=["a", "b"])
    b = train(X, y, vocab=["a", "b"])
    assert a.to_json() == b.to_json()
    assert AnomalyModel.from_json(a.to_json()).to_json() == a.to_json()


def test_training_rejects_bad_input():
    X = np.ones((4, 4))
    with pytest.raises(TrainingError):
        fit_logistic(X, np.zeros(4))
    with pytest.raises(ValidationError):
        fit_logistic(X, np.array([0, 1, 2, 0]))
    with pytest.raises(ValidationError):
        fit_logistic(np.full((2, 4), np.nan), np.array([0, 1]))
    with pytest.raises(ValidationError):
        train(X, np.array([0, 1, 0, 1]), vocab=["x"])


def test_predict_checks_dimension():
    m = AnomalyModel(np.zeros(5), 0.0, ["t"])
    assert predict(m, np.zeros(5)) == 0.5
    with pytest.raises(ContractViolation):
        predict(m, np.zeros(4))
    with pytest.raises(ValidationError):
        AnomalyModel(np.zeros(3), 0.0, [])
    with pytest.raises(ValidationError):
        AnomalyModel.from_json("{}")


def test_ranking_ties_and_cutoff():
    scores = {"t:3": 0.9, "t:1": 0.9, "t:2": 0.9, "t:0": 0.1}
    semantic = {"t:3": Fraction(1, 2), "t:1": Fraction(0), "t:2": Fraction(0)}
    r = rank_scores("inc", scores, semantic, cutoff=3)
    assert r.top_keys() == ["t:3", "t:1", "t:2"]
    assert recall_at_k(r, {"t:2", "t:0"}) == 0.5
    with pytest.raises(ContractViolation):
        rank_scores("inc", scores, cutoff=0)
    with pytest.raises(ValidationError):
        recall_at_k(r, set())


def test_rank_paths_uses_model():
    m = AnomalyModel(np.array([0.0, 0.0, 0.0, 5.0]), 0.0, [])
    paths = [("a", np.array([0, 0, 0, 0.0]), 0), ("b", np.array([0, 0, 0, 1.0]), 1)]
    r = rank_paths(m, paths, cutoff=1)
    assert r.top_keys() == ["b"]
    assert rank_paths(m, []).ranked == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=40), st.integers(1, 50))
def test_ranking_is_sorted_and_bounded(probs, cutoff):
    scores = {f"x:{i}": p for i, p in enumerate(probs)}
    r = rank_scores("i", scores, cutoff=cutoff)
    vals = [p for _, p in r.ranked]
    assert vals == sorted(vals, reverse=True)
    assert len(r.ranked) == min(cutoff, len(probs))


def rows(incident, specs):
    return [LabeledPath(incident, "0xt", f"{incident}:{i}", tuple(sig), lab, fo)
            for i, (sig, lab, fo) in enumerate(specs)]


def test_dataset_round_trip_and_errors(tmp_path):
    data = rows("a", [(["transfer"], True, 1), (["swap"], False, 2)])
    p = tmp_path / "d.jsonl"
    dump_dataset(data, p)
    assert load_dataset(p) == data
    lines = p.read_text().splitlines()
    bad = dict(json.loads(lines[1]), label="maybe")
    p.write_text(lines[0] + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(p)
    p.write_text(lines[0] + "\n\n{not json\n")
    with pytest.raises(ParseError, match="line 3"):
        load_dataset(p)
    p.write_text(lines[0] + "\n" + lines[0] + "\n")
    with pytest.raises(ParseError, match="duplicate"):
        load_dataset(p)


def test_logo_on_small_groups():
    data = []
    for inc in "abc":
        data += rows(inc, [(["sweepToken", "drain"], True, 3)] +
                     [(["swap", "getReserves"], False, 1) for _ in range(5)] +
                     [(["transfer"], False, 1)])
    groups = group_by_incident(data)
    full = logo_evaluate(groups, LogisticScorer(), cutoff=1)
    assert full.mean == 1.0 and set(full.folds) == {"a", "b", "c"}
    sem = logo_evaluate(groups, SemanticScorer(), cutoff=1)
    assert sem.mean == 1.0
    with pytest.raises(ValidationError):
        logo_evaluate({"a": groups["a"]}, SemanticScorer())


def test_logo_skips_fold_without_attacks():
    data = rows("a", [(["drain"], True, 1), (["swap"], False, 1)]) + \
        rows("b", [(["drain"], True, 1), (["swap"], False, 1)]) + rows("c", [(["swap"], False, 1)])
    with pytest.warns(UserWarning, match="no attack paths"):
        res = logo_evaluate(group_by_incident(data), SemanticScorer())
    assert res.skipped == ["c"]


def test_config_digest_changes_with_settings():
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(class_weighting=False).digest()
