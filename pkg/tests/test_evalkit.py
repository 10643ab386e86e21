from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sfouda import evalkit
from sfouda.evalkit import MetricRecord
from sfouda.selection import PseudoLabelSet


def test_perfect_prediction():
    gt = np.arange(1, 8).repeat(3)
    per_class, miou = evalkit.iou(evalkit.confusion_matrix(gt, gt))
    assert np.all(per_class == 100.0) and miou == 100.0


def test_constant_prediction_two_classes():
    gt = np.array([1] * 5 + [2] * 5)
    per_class, miou = evalkit.iou(evalkit.confusion_matrix(gt, np.ones(10, dtype=int), 2))
    assert per_class.tolist() == [50.0, 0.0] and miou == 25.0


def test_absent_class_is_excluded_and_unlabelled_is_ignored():
    gt = np.array([0, 1, 1, 3])
    pred = np.array([2, 1, 1, 3])
    per_class, miou = evalkit.iou(evalkit.confusion_matrix(gt, pred))
    assert np.isnan(per_class[1]) and miou == 100.0
    with pytest.raises(evalkit.AllEmpty):
        evalkit.iou(evalkit.confusion_matrix([0, 0], [1, 2]))
    with pytest.raises(ValueError):
        evalkit.confusion_matrix([1], [0])


def test_improvement():
    assert evalkit.improvement_over_source(30.0, 30.0) == 0
    assert evalkit.improvement_over_source(40.24, 35.93) == pytest.approx(4.31, abs=1e-12)
    assert evalkit.improvement_over_source(1.5, 4.0) == -evalkit.improvement_over_source(4.0, 1.5)


def test_db_index_two_clusters():
    X = np.array([[-1.0, 0.0], [1.0, 0.0], [9.0, 0.0], [11.0, 0.0]])
    assert abs(evalkit.db_index(X, [0, 0, 1, 1]) - 0.2) < 1e-9


def test_db_index_degenerate_and_monotone():
    X = np.array([[0.0, 1.0], [0.0, -1.0]] * 2)
    with pytest.warns(evalkit.CoincidentCentroids):
        assert evalkit.db_index(X, [0, 0, 1, 1]) == np.inf
    with pytest.raises(evalkit.SingleClass):
        evalkit.db_index(X, [0, 0, 0, 0])
    base = np.array([[-1.0, 0.0], [1.0, 0.0]])
    vals = [evalkit.db_index(np.vstack([base, base + [g, 0.0]]), [0, 0, 1, 1]) for g in (4, 8, 16)]
    assert vals[0] > vals[1] > vals[2]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 6), d=st.integers(1, 8))
def test_db_index_matches_reference(seed, k, d):
    r = np.random.default_rng(seed)
    y = np.concatenate([np.arange(k), r.integers(0, k, 40)])
    X = r.normal(size=(len(y), d)) + y[:, None] * 0.7
    assert abs(evalkit.db_index(X, y) - oracles.davies_bouldin(X, y)) < 1e-9


def test_pseudo_label_accuracy():
    gt = np.array([1, 2, 3, 4, 5, 6, 7, 1, 2, 3])
    same = PseudoLabelSet.from_seeds(np.arange(10), gt)
    assert evalkit.pseudo_label_accuracy(same, gt) == 100.0
    wrong = PseudoLabelSet.from_seeds(np.arange(10), gt % 7 + 1)
    assert evalkit.pseudo_label_accuracy(wrong, gt) == 0.0
    mixed = gt.copy()
    mixed[:3] = mixed[:3] % 7 + 1
    assert evalkit.pseudo_label_accuracy(PseudoLabelSet.from_seeds(np.arange(10), mixed), gt) == 70.0
    with pytest.raises(evalkit.EmptyPseudoLabels):
        evalkit.pseudo_label_accuracy(PseudoLabelSet.empty(), gt)


def test_top_k_limit_uses_rank():
    gt = np.array([1, 1, 2, 2])
    p = PseudoLabelSet(np.arange(4), [1, 1, 1, 1], [True, False, False, False],
                       [0, 0, 0, 0], [0, 1, 2, 3], [0.0, 0.1, 0.2, 0.3])
    assert evalkit.pseudo_label_accuracy(p, gt, 1) == 100.0
    assert evalkit.pseudo_label_accuracy(p, gt, 2) == 100.0
    assert evalkit.pseudo_label_accuracy(p, gt, 10) == 50.0


def _record(i, miou=50.0):
    pc = np.full(7, np.nan)
    pc[:3] = [miou, miou + 1, miou - 1]
    return MetricRecord(i, pc, miou, 45.0, seeds=3, propagated=20, adapted=i > 0,
                        thresholds=np.array([0.1, -np.inf, 0.2, 0.3, np.nan, 0.0, 1e-17]))


def test_metrics_csv_and_summary(tmp_path):
    recs = [_record(i, 50.0 + i / 3) for i in range(4)]
    evalkit.write_metrics_csv(recs, tmp_path / "m.csv")
    rows = evalkit.read_metrics_csv(tmp_path / "m.csv")
    assert list(rows[0]) == evalkit.CSV_COLUMNS
    assert float(rows[2]["miou"]) == recs[2].miou  # repr round-trips exactly
    assert rows[0]["lambda_pedestrian"] == "-inf" and rows[0]["iou_sidewalk"] == "nan"
    s = evalkit.summarize(recs, {"seed": 1})
    assert s["frames"] == 4 and s["adapted_frames"] == 3 and s["per_class_iou"]["sidewalk"] is None
    evalkit.write_summary(s, tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())["config"] == {"seed": 1}
