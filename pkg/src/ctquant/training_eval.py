"""Training loop for the fusion model and the statistical evaluation suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import NoPositives
from .features import normalize_batch
from .fusion import FusionModel
from .tensor_core import Tape

DEGENERATE_THRESHOLD = float("nan")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 64
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 8            # early stop on validation AUC
    target_auc: float | None = None   # stop once validation AUC reaches this
    seed: int = 0

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "learning_rate", "batch_size", "epochs", "beta1", "beta2",
            "adam_eps", "patience", "target_auc", "seed")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float
    auc: float
    ci: dict                      # metric name -> (lo, hi)
    threshold: float
    n_positive: int
    n_negative: int
    bootstrap_replicates: int
    confusion: dict               # tp/fp/tn/fn

    def to_json_dict(self):
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "auc": self.auc,
            "ci": {k: list(v) for k, v in self.ci.items()},
            "threshold": self.threshold,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "bootstrap_replicates": self.bootstrap_replicates,
            "confusion": self.confusion,
        }


class Adam:
    """Adaptive-moment optimizer over the model's named parameter arrays."""

    def __init__(self, model: FusionModel, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.t = 0

    def step(self, model, grads):
        cfg = self.cfg
        self.t += 1
        bias1 = 1 - cfg.beta1 ** self.t
        bias2 = 1 - cfg.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            model.params[name] = model.params[name] - cfg.learning_rate * (
                mhat / (np.sqrt(vhat) + cfg.adam_eps))


def _batch_loss(model, tape, tensors, x1, biom, labels, dropout_rng):
    """Mean binary cross-entropy via the numerically stable softplus form."""
    outs = model.forward_batch(tape, tensors, x1, biom, dropout_rng=dropout_rng)
    losses = []
    for (prob, logit, _, _), y in zip(outs, labels):
        # bce(logit, y) = softplus(logit) - y * logit
        sp = tape.softplus(logit)
        losses.append(tape.add(sp, tape.scale(logit, -float(y))))
    return tape.mean(tape.concat(losses, axis=0))


def _scores_for(model, stats, records):
    x1, biom = normalize_batch(stats, records)
    scores = np.empty(len(records))
    tape = Tape()
    tensors = model.as_tensors(tape)
    outs = model.forward_batch(tape, tensors, x1, biom)
    for i, (prob, _, _, _) in enumerate(outs):
        scores[i] = prob.value[0, 0]
    return scores


def train(model: FusionModel, stats, train_records, val_records,
          cfg: TrainConfig):
    """Minimize BCE with Adam; keep the best-validation-AUC checkpoint.

    Returns (best_model_params_installed_in_model, history). Deterministic
    given cfg.seed: shuffling and dropout masks derive from it.
    """
    labels_tr = np.array([r.label for r in train_records], dtype=float)
    labels_va = np.array([r.label for r in val_records], dtype=float)
    for name, lab in (("train", labels_tr), ("validation", labels_va)):
        if len(lab) and (lab.min() == lab.max()):
            raise NoPositives(f"{name} split has a single class")

    x1_tr, biom_tr = normalize_batch(stats, train_records)
    opt = Adam(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_auc = -1.0
    best_params = {k: v.copy() for k, v in model.params.items()}
    stale = 0

    n = len(train_records)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        dropout_rng = np.random.default_rng((cfg.seed, epoch))
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            tape = Tape()
            tensors = model.as_tensors(tape)
            loss = _batch_loss(model, tape, tensors, x1_tr[sel], biom_tr[sel],
                               labels_tr[sel], dropout_rng)
            tape.backward(loss)
            grads = {name: tensors[name].grad for name in model.params}
            opt.step(model, grads)
            epoch_loss += loss.value[0, 0] * len(sel)
        epoch_loss /= n

        val_scores = _scores_for(model, stats, val_records)
        val_auc = roc_auc(val_scores, labels_va)
        history.append({"epoch": epoch, "train_loss": float(epoch_loss),
                        "val_auc": float(val_auc)})
        if val_auc > best_auc + 1e-12:
            best_auc = val_auc
            best_params = {k: v.copy() for k, v in model.params.items()}
            stale = 0
            if cfg.target_auc is not None and best_auc >= cfg.target_auc:
                break
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.params = best_params
    return model, history


def predict_scores(model, stats, records):
    return _scores_for(model, stats, records)


# --- metrics ----------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Trapezoidal ROC area; ties counted as half-concordant (rank form)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise NoPositives("AUC needs both classes")
    ranks = sps.rankdata(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_matrix(scores, labels, threshold):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    tn = int((~pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    return tp, fp, tn, fn


def confusion_metrics(scores, labels, threshold):
    """accuracy, sensitivity, specificity, F1 at the given threshold."""
    tp, fp, tn, fn = confusion_matrix(scores, labels, threshold)
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else math.nan
    sensitivity = tp / (tp + fn) if tp + fn else math.nan
    specificity = tn / (tn + fp) if tn + fp else math.nan
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else math.nan
    return accuracy, sensitivity, specificity, f1


def bootstrap_ci(metric_fn, scores, labels, replicates=1000, seed=0):
    """Percentile 2.5/97.5 interval over seeded resamples with replacement."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    n = len(scores)
    values = []
    skipped = 0
    for _ in range(replicates):
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric_fn(scores[idx], labels[idx]))
        except NoPositives:
            skipped += 1
    if not values:
        raise NoPositives("every bootstrap replicate lacked a class")
    if skipped > 0.05 * replicates:
        import logging
        logging.getLogger("ctquant.training_eval").warning(
            "bootstrap: %d/%d replicates lacked a class; interval widened",
            skipped, replicates)
    values = np.asarray(values)
    if len(values) == 1:
        return float(values[0]), float(values[0])
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(lo), float(hi)


def mcnemar_test(pred_a, pred_b, labels) -> float:
    """Two-sided McNemar p-value on discordant pairs.

    Exact binomial when b + c < 25, else chi-square with continuity
    correction.
    """
    pred_a = np.asarray(pred_a, dtype=int)
    pred_b = np.asarray(pred_b, dtype=int)
    labels = np.asarray(labels, dtype=int)
    correct_a = pred_a == labels
    correct_b = pred_b == labels
    b = int((correct_a & ~correct_b).sum())
    c = int((~correct_a & correct_b).sum())
    n = b + c
    if n == 0:
        return 1.0
    if n < 25:
        k = min(b, c)
        tail = sum(math.comb(n, i) for i in range(0, k + 1)) / 2.0 ** n
        return float(min(1.0, 2.0 * tail))
    chi2 = (abs(b - c) - 1) ** 2 / n
    return float(sps.chi2.sf(chi2, df=1))


def select_threshold(val_scores, val_labels):
    """Maximize Youden's J on validation; ties broken toward specificity.

    Returns (threshold, degenerate_flag). With all scores equal the
    threshold is flagged degenerate and set to that score.
    """
    scores = np.asarray(val_scores, dtype=float)
    labels = np.asarray(val_labels, dtype=int)
    uniq = np.unique(scores)
    if len(uniq) == 1:
        return float(uniq[0]), True
    # candidate cuts: midpoints between adjacent distinct scores plus ends
    mids = (uniq[:-1] + uniq[1:]) / 2
    candidates = np.concatenate([[uniq[0] - 1e-9], mids, [uniq[-1] + 1e-9]])
    best = None
    for th in candidates:
        _, sens, spec, _ = confusion_metrics(scores, labels, th)
        j = sens + spec - 1
        key = (j, spec)
        if best is None or key > best[0]:
            best = (key, th)
    return float(best[1]), False


def evaluate(scores, labels, threshold, replicates=1000, seed=0) -> MetricsReport:
    """Point metrics plus percentile-bootstrap CIs at a fixed threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    acc, sens, spec, f1 = confusion_metrics(scores, labels, threshold)
    auc = roc_auc(scores, labels)
    tp, fp, tn, fn = confusion_matrix(scores, labels, threshold)

    def metric_at(fn_idx):
        def f(s, l):
            vals = confusion_metrics(s, l, threshold)
            v = vals[fn_idx]
            if math.isnan(v):
                raise NoPositives("replicate lacks a class")
            return v
        return f

    ci = {}
    for name, idx in (("accuracy", 0), ("sensitivity", 1),
                      ("specificity", 2), ("f1", 3)):
        ci[name] = bootstrap_ci(metric_at(idx), scores, labels,
                                replicates=replicates, seed=seed)
    ci["auc"] = bootstrap_ci(roc_auc, scores, labels,
                             replicates=replicates, seed=seed)
    return MetricsReport(
        accuracy=acc, sensitivity=sens, specificity=spec, f1=f1, auc=auc,
        ci=ci, threshold=float(threshold),
        n_positive=int((labels == 1).sum()),
        n_negative=int((labels == 0).sum()),
        bootstrap_replicates=replicates,
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn})


def roc_points(scores, labels):
    """(fpr, tpr, threshold) rows for an ROC curve CSV."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    rows = []
    n_pos = (labels == 1).sum()
    n_neg = (labels == 0).sum()
    for th in thresholds:
        tp = ((scores >= th) & (labels == 1)).sum()
        fp = ((scores >= th) & (labels == 0)).sum()
        rows.append((fp / n_neg if n_neg else math.nan,
                     tp / n_pos if n_pos else math.nan,
                     float(th)))
    return rows
