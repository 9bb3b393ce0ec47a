import math

import numpy as np
import pytest

from conftest import make_cohort
from ctquant.errors import NoPositives
from ctquant.features import fit_normalizer
from ctquant.fusion import FusionConfig, FusionModel
from ctquant.training_eval import (
    TrainConfig,
    bootstrap_ci,
    confusion_metrics,
    evaluate,
    mcnemar_test,
    predict_scores,
    roc_auc,
    roc_points,
    select_threshold,
    train,
)


def auc_oracle(scores, labels):
    """O(n^2) concordance counting with half credit for ties."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def test_auc_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(10, 60))
        scores = np.round(rng.random(n), 2)   # force some ties
        labels = (rng.random(n) < 0.5).astype(int)
        if labels.min() == labels.max():
            continue
        assert abs(roc_auc(scores, labels)
                   - auc_oracle(scores, labels)) < 1e-12


def test_auc_perfect_and_reversed():
    labels = np.array([0, 0, 1, 1])
    assert roc_auc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
    assert roc_auc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0


def test_auc_requires_both_classes():
    with pytest.raises(NoPositives):
        roc_auc(np.array([0.2, 0.8]), np.array([1, 1]))


def test_hand_confusion_metrics():
    # tp 9, fp 1, tn 8, fn 2
    scores = np.array([0.9] * 9 + [0.8] + [0.2] * 8 + [0.1] * 2)
    labels = np.array([1] * 9 + [0] + [0] * 8 + [1] * 2)
    acc, sens, spec, f1 = confusion_metrics(scores, labels, 0.5)
    assert acc == pytest.approx(17 / 20)
    assert sens == pytest.approx(9 / 11)
    assert spec == pytest.approx(8 / 9)
    assert f1 == pytest.approx(18 / 21)


def mcnemar_oracle_exact(b, c):
    n = b + c
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
    return min(1.0, 2.0 * tail)


def build_preds(b, c, n_extra=10):
    """Predictions with exactly b and c discordant errors."""
    labels = np.ones(b + c + n_extra, dtype=int)
    pred_a = labels.copy()
    pred_b = labels.copy()
    pred_b[:b] = 0          # a right, b wrong
    pred_a[b:b + c] = 0     # a wrong, b right
    return pred_a, pred_b, labels


@pytest.mark.parametrize("b,c", [(0, 0), (1, 3), (5, 2), (10, 14), (0, 7)])
def test_mcnemar_exact_branch(b, c):
    pred_a, pred_b, labels = build_preds(b, c)
    p = mcnemar_test(pred_a, pred_b, labels)
    if b + c == 0:
        assert p == 1.0
    else:
        assert p == pytest.approx(mcnemar_oracle_exact(b, c), abs=1e-12)
    assert 0.0 < p <= 1.0


def test_mcnemar_branches_agree_near_boundary():
    # around b + c = 25 the exact and chi-square branches stay close
    for b, c in [(12, 12), (13, 12), (12, 13), (14, 12)]:
        pred_a, pred_b, labels = build_preds(b, c)
        exact = mcnemar_oracle_exact(b, c)
        got = mcnemar_test(pred_a, pred_b, labels)
        assert got == pytest.approx(exact, abs=0.06)


def test_mcnemar_large_sample_significant():
    pred_a, pred_b, labels = build_preds(40, 5)
    assert mcnemar_test(pred_a, pred_b, labels) < 1e-6


def test_bootstrap_deterministic():
    rng = np.random.default_rng(1)
    scores = rng.random(80)
    labels = (rng.random(80) < 0.5).astype(int)
    a = bootstrap_ci(roc_auc, scores, labels, replicates=200, seed=5)
    b = bootstrap_ci(roc_auc, scores, labels, replicates=200, seed=5)
    c = bootstrap_ci(roc_auc, scores, labels, replicates=200, seed=6)
    assert a == b
    assert a != c
    assert a[0] <= roc_auc(scores, labels) <= a[1]


def test_select_threshold_youden():
    scores = np.array([0.1, 0.2, 0.6, 0.7, 0.9])
    labels = np.array([0, 0, 0, 1, 1])
    th, degenerate = select_threshold(scores, labels)
    assert not degenerate
    assert 0.6 < th <= 0.7
    _, sens, spec, _ = confusion_metrics(scores, labels, th)
    assert sens == 1.0 and spec == 1.0


def test_select_threshold_degenerate():
    th, degenerate = select_threshold(np.full(4, 0.5), np.array([0, 1, 0, 1]))
    assert degenerate and th == 0.5


def test_roc_points_monotone():
    rng = np.random.default_rng(2)
    scores = rng.random(50)
    labels = (rng.random(50) < 0.4).astype(int)
    pts = roc_points(scores, labels)
    fprs = [p[0] for p in pts]
    tprs = [p[1] for p in pts]
    assert fprs == sorted(fprs)
    assert tprs == sorted(tprs)
    assert pts[0][:2] == (0.0, 0.0)
    assert pts[-1][:2] == (1.0, 1.0)


def test_evaluate_report_structure():
    rng = np.random.default_rng(3)
    scores = np.clip(rng.normal(0.5, 0.2, size=60), 0, 1)
    labels = (scores + rng.normal(0, 0.2, size=60) > 0.5).astype(int)
    report = evaluate(scores, labels, 0.5, replicates=50, seed=0)
    doc = report.to_json_dict()
    for key in ("accuracy", "sensitivity", "specificity", "f1", "auc"):
        assert key in doc and key in doc["ci"]
        lo, hi = doc["ci"][key]
        assert lo <= hi
    assert doc["confusion"]["tp"] + doc["confusion"]["fn"] == labels.sum()


def test_train_learns_and_is_deterministic():
    rng = np.random.default_rng(4)
    cohort = make_cohort(160, rng, signal=2.5)
    tr, va = cohort[:120], cohort[120:]
    stats = fit_normalizer(tr)
    cfg = TrainConfig(epochs=4, batch_size=40, seed=0)

    def run():
        model = FusionModel(FusionConfig(seed=0))
        model, history = train(model, stats, tr, va, cfg)
        return model, history

    m1, h1 = run()
    m2, h2 = run()
    assert h1 == h2
    assert m1.content_hash() == m2.content_hash()
    assert h1[-1]["val_auc"] > 0.8
    scores = predict_scores(m1, stats, va)
    assert roc_auc(scores, np.array([r.label for r in va])) > 0.8


def test_train_rejects_single_class():
    rng = np.random.default_rng(5)
    cohort = make_cohort(20, rng)
    for r in cohort:
        r.label = 1
    stats = fit_normalizer(cohort)
    with pytest.raises(NoPositives):
        train(FusionModel(FusionConfig(seed=0)), stats, cohort[:15],
              cohort[15:], TrainConfig(epochs=1))


def test_target_auc_early_stop():
    rng = np.random.default_rng(6)
    cohort = make_cohort(120, rng, signal=4.0)
    tr, va = cohort[:90], cohort[90:]
    stats = fit_normalizer(tr)
    cfg = TrainConfig(epochs=50, batch_size=30, seed=0, target_auc=0.95)
    model = FusionModel(FusionConfig(seed=0))
    _, history = train(model, stats, tr, va, cfg)
    assert len(history) < 50
    assert max(h["val_auc"] for h in history) >= 0.95
