import doctest
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ccq.metrics
from ccq.encoder import encode_database, encode_joint_database
from ccq.metrics import (
    TASKS,
    EvalReport,
    RelevanceJudge,
    average_precision,
    database_tag,
    evaluate_rankings,
    map_at_r,
    precision_recall_at_r,
    precision_recall_curve,
    run_protocol,
)


def test_doctests():
    assert doctest.testmod(ccq.metrics).failed == 0


def test_average_precision_examples():
    assert average_precision([True, False, True]) == 5 / 6
    assert average_precision([False, False]) == 0.0
    assert average_precision([True]) == 1.0
    with pytest.raises(ValueError):
        average_precision([])


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 30))
@settings(max_examples=100, deadline=None)
def test_ap_ignores_items_below_cutoff(rel, r):
    flipped = rel[:r] + [not x for x in rel[r:]]
    assert average_precision(rel[:r]) == average_precision(flipped[:r])


def test_map_monotone_in_one_query():
    qlab = np.eye(3, dtype=bool)
    dblab = np.eye(3, dtype=bool)[[0, 1, 2, 0, 1, 2]]
    judge = RelevanceJudge(qlab, dblab)
    worse = [np.array([1, 0, 2, 3, 4, 5]), np.array([1, 4, 0]), np.array([2, 5, 0])]
    better = [np.array([0, 1, 2, 3, 4, 5])] + worse[1:]
    assert map_at_r(better, judge, 6) > map_at_r(worse, judge, 6)


def test_precision_at_one_and_recall_monotone():
    rng = np.random.default_rng(0)
    qlab = rng.random((30, 4)) < 0.3
    dblab = rng.random((50, 4)) < 0.3
    judge = RelevanceJudge(qlab, dblab)
    rankings = [rng.permutation(50) for _ in range(30)]
    prec, rec = precision_recall_at_r(rankings, judge, 50)
    top_hit = np.mean([judge.relevant(i, r[:1])[0] for i, r in enumerate(rankings)])
    assert prec[0] == pytest.approx(top_hit)
    assert np.all(np.diff(rec) >= 0)
    levels, pr = precision_recall_curve(rankings, judge)
    assert levels.tolist() == pytest.approx(np.linspace(0, 1, 11).tolist())
    assert np.all(np.diff(pr) <= 1e-12)  # interpolated precision is non-increasing


def test_random_ranking_map_near_prior():
    rng = np.random.default_rng(1)
    labels = np.eye(10, dtype=bool)[rng.integers(0, 10, 2000)]
    judge = RelevanceJudge(labels[:300], labels)
    rankings = [rng.permutation(2000) for _ in range(300)]
    value = map_at_r(rankings, judge, 50)
    assert 0.05 < value < 0.2


def test_report_serialisation():
    qlab = np.eye(2, dtype=bool)
    judge = RelevanceJudge(qlab, qlab[[0, 1, 0]])
    report = EvalReport({"I2T": evaluate_rankings([np.array([0, 2, 1]), np.array([1, 0, 2])], judge, 2)})
    parsed = json.loads(report.to_json())
    assert parsed["tasks"]["I2T"]["map"] == pytest.approx(1.0)
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "task,r,precision,recall"
    assert lines[1].startswith("I2T,1,")
    assert len(lines) == 1 + 3


def test_task_naming():
    assert list(TASKS) == ["I2I", "T2T", "I2T", "T2I", "I2IT", "T2IT"]
    assert database_tag(0) == "I" and database_tag(1) == "T" and database_tag(-1) == "IT"


def test_run_protocol_on_synthetic(small_model):
    model, _, data = small_model
    dbs = {
        "I": encode_database(data.features[0], model, 0),
        "T": encode_database(data.features[1], model, 1),
        "IT": encode_joint_database(data.features, model),
    }
    labels = {"I": data.labels[0], "T": data.labels[1], "IT": data.labels[0]}
    report = run_protocol(model, dbs, labels, data.slice(0, 40), map_r=50, exclude_self=True)
    assert set(report.tasks) == set(TASKS)
    for name, t in report.tasks.items():
        assert t.map > 0.5, name  # chance is about 1/6
    partial = run_protocol(model, {"I": dbs["I"]}, labels, data.slice(0, 10))
    assert set(partial.tasks) == {"I2I", "T2I"}
    assert "I2T" in partial.skipped
