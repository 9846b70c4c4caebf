"""Conformal prediction core: scores, quantiles, split/full set construction.

The quantile convention is the finite-sample-valid one: the ceil((1-alpha)*N)-th
order statistic (1-based) of the score multiset, with split CP appending an
explicit +inf fictitious score before taking the quantile.  Ties are admitted
(membership uses <=).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import model as icl_model

P_FLOOR = 1e-12


class EvalCounter:
    """Counts predictive distributions computed during calibration/prediction."""

    def __init__(self):
        self.prediction_evals = 0
        self.training_runs = 0

    def add_evals(self, k: int) -> None:
        self.prediction_evals += int(k)

    def add_training(self, k: int = 1) -> None:
        self.training_runs += int(k)


@dataclass
class PredictionSet:
    """Label subset plus the per-label thresholds and test scores behind it."""

    members: frozenset[int]
    thresholds: np.ndarray  # (K,) per-label admission threshold
    test_scores: np.ndarray  # (K,) per-label test score

    def __contains__(self, y: int) -> bool:
        return y in self.members

    @property
    def size(self) -> int:
        return len(self.members)


def ncs_logloss(p: np.ndarray, y: int) -> float:
    """Log-loss non-conformity score -log p[y], floored so it stays finite."""
    p = np.asarray(p)
    if not 0 <= y < len(p):
        raise ValueError(f"label {y} out of range for {len(p)} classes")
    return float(-np.log(max(float(p[y]), P_FLOOR)))


def conformal_quantile(scores, alpha: float) -> float:
    """ceil((1-alpha)*N)-th smallest of the multiset (1-based, ties kept)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    s = sorted(float(v) for v in scores)
    if not s:
        raise ValueError("empty score multiset")
    k = math.ceil((1.0 - alpha) * len(s))
    return s[k - 1]


def scp_calibrate(cal_scores, alpha: float) -> float:
    """Split-CP threshold: quantile of calibration scores plus a +inf point."""
    cal_scores = list(cal_scores)
    if not cal_scores:
        raise ValueError("empty calibration set")
    return conformal_quantile(cal_scores + [math.inf], alpha)


def scp_predict(threshold: float, test_scores) -> PredictionSet:
    test_scores = np.asarray(test_scores, dtype=np.float64)
    members = frozenset(int(y) for y in np.nonzero(test_scores <= threshold)[0])
    return PredictionSet(
        members=members,
        thresholds=np.full(len(test_scores), threshold),
        test_scores=test_scores,
    )


def fcp_predict(scores: np.ndarray, alpha: float) -> PredictionSet:
    """Full-CP set from a K x (n+1) score matrix (last column = test scores).

    Label y is admitted iff its test score is <= the (1-alpha)-quantile of
    its own augmented score row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError(f"expected K x (n+1) score matrix, got {scores.shape}")
    k = scores.shape[0]
    thresholds = np.array([conformal_quantile(scores[y], alpha) for y in range(k)])
    test = scores[:, -1]
    members = frozenset(int(y) for y in range(k) if test[y] <= thresholds[y])
    return PredictionSet(members=members, thresholds=thresholds, test_scores=test)


def fcp_scores_from_icl(
    model: icl_model.IclTransformer,
    context_x,
    context_y,
    x_test,
    counter: EvalCounter | None = None,
) -> np.ndarray:
    """K x (n+1) score matrix from one batched forward per candidate label.

    For candidate label y the dataset is augmented with (x_test, y); the
    model emits all n+1 predictive distributions in a single pass and each
    is scored at its own label (the candidate for position n+1).
    """
    context_x = np.asarray(context_x, dtype=np.float64)
    context_y = np.asarray(context_y, dtype=np.int64)
    n = len(context_y)
    if n < 1:
        raise ValueError("need at least one context pair")
    k = model.cfg.num_classes
    xs = np.broadcast_to(
        np.concatenate([context_x, np.asarray(x_test)[None, :]])[None], (k, n + 1, context_x.shape[1])
    )
    ys = np.tile(np.concatenate([context_y, [0]])[None], (k, 1))
    ys[:, -1] = np.arange(k)
    with torch.no_grad():
        probs = icl_model.forward_augmented_batch(
            model,
            torch.as_tensor(np.ascontiguousarray(xs), dtype=model.dtype),
            torch.as_tensor(ys, dtype=torch.long),
        ).numpy()
    if counter is not None:
        counter.add_evals(k * (n + 1))
    labels = ys  # (k, n+1), column n = candidate label
    picked = np.take_along_axis(probs, labels[:, :, None], axis=2)[:, :, 0]
    return -np.log(np.maximum(picked, P_FLOOR))


class FrequencyPredictor:
    """Input-free per-class frequency estimator with Laplace smoothing.

    Its fit depends only on the label multiset, so it is permutation
    invariant by construction; used as the classical retraining reference.
    """

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.probs = np.full(num_classes, 1.0 / num_classes)

    def fit(self, xs, ys) -> "FrequencyPredictor":
        counts = np.bincount(np.asarray(ys, dtype=np.int64), minlength=self.num_classes)
        self.probs = (counts + 1.0) / (counts.sum() + self.num_classes)
        return self

    def predict_proba(self, x) -> np.ndarray:
        return self.probs


def fcp_retrain_oracle(
    make_predictor,
    context_x,
    context_y,
    x_test,
    alpha: float,
    num_classes: int,
    counter: EvalCounter | None = None,
) -> tuple[PredictionSet, np.ndarray]:
    """Classical full CP: actually refit a predictor per candidate label.

    make_predictor() must return an unfitted predictor whose fit is
    permutation invariant.  Membership is decided here by direct
    enumeration of the definition (sort the augmented row, take the
    ceil((1-alpha)(n+1))-th order statistic), independently of
    fcp_predict, so the two routes can be checked against each other.
    Returns (prediction set, refitted K x (n+1) score matrix).
    """
    context_x = np.asarray(context_x)
    context_y = np.asarray(context_y, dtype=np.int64)
    n = len(context_y)
    scores = np.empty((num_classes, n + 1))
    thresholds = np.empty(num_classes)
    members = set()
    for cand in range(num_classes):
        xs = np.concatenate([context_x, np.asarray(x_test)[None, :]])
        ys = np.concatenate([context_y, [cand]])
        pred = make_predictor().fit(xs, ys)
        if counter is not None:
            counter.add_training()
        for i in range(n + 1):
            scores[cand, i] = ncs_logloss(pred.predict_proba(xs[i]), int(ys[i]))
            if counter is not None:
                counter.add_evals(1)
        row = np.sort(scores[cand])
        idx = int(np.ceil((1.0 - alpha) * (n + 1)))
        thresholds[cand] = row[idx - 1]
        if scores[cand, -1] <= thresholds[cand]:
            members.add(cand)
    pset = PredictionSet(
        members=frozenset(members), thresholds=thresholds, test_scores=scores[:, -1]
    )
    return pset, scores
