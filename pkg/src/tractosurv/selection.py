"""Feature normalisation and selection.

Low-variance columns are dropped first, the rest are z-scored, and recursive
feature elimination ranks features by the summed squared one-vs-rest SVM
weights. Every candidate feature count is then scored with repeated
stratified cross-validation; the count with the best mean accuracy wins, ties
going to the smaller count.

The elimination order is computed once on the full training table. The
cross-validated accuracies are therefore slightly optimistic.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InsufficientDataError, LabelError
from .svm import _ovr_fit, class_order, encode, fold_accuracies, fold_table


def _matrix(table):
    return np.asarray(getattr(table, "values", table), dtype=np.float64)


def variance_filter(table, threshold=1e-8):
    """Indices of columns whose sample variance exceeds ``threshold``."""
    X = _matrix(table)
    if X.shape[0] < 2:
        raise InsufficientDataError("variance filter needs at least 2 rows")
    var = X.var(axis=0, ddof=1)
    return [int(i) for i in np.nonzero(var > threshold)[0]]


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = _matrix(X)
        std = X.std(axis=0, ddof=1)
        if np.any(~(std > 0)):
            raise DegenerateInputError(
                f"zero-variance columns {np.nonzero(~(std > 0))[0].tolist()} reached z-scoring")
        return cls(X.mean(axis=0), std)

    def transform(self, X):
        return (_matrix(X) - self.mean) / self.std


def zscore_fit_apply(train, other=None):
    """Fit a :class:`Scaler` on ``train``; return ``(train_z, other_z, scaler)``."""
    scaler = Scaler.fit(train)
    other_z = None if other is None else scaler.transform(other)
    return scaler.transform(train), other_z, scaler


@dataclass
class SelectionResult:
    retained: list
    curve: list
    chosen_k: int
    elimination_order: list = None

    def to_json(self):
        return json.dumps({
            "retained": [int(i) for i in self.retained],
            "curve": [[int(k), float(a)] for k, a in self.curve],
            "chosen_k": int(self.chosen_k),
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["retained"], [tuple(p) for p in d["curve"]], d["chosen_k"])


def elimination_path(Xz, y, C=1.0, tol=1e-4):
    """Feature subsets from all columns down to one, dropping the weakest each time.

    Returns a dict ``k -> sorted column indices``.
    """
    classes = class_order(y)
    yi = encode(y, classes)
    active = list(range(Xz.shape[1]))
    subsets = {len(active): list(active)}
    while len(active) > 1:
        W = _ovr_fit(np.ascontiguousarray(Xz[:, active]), yi, len(classes), float(C), float(tol), 5000)
        score = (W[:, :-1] ** 2).sum(axis=0)
        del active[int(np.argmin(score))]
        subsets[len(active)] = list(active)
    return subsets


def rfe_cv(X, y, cv, C=1.0, tol=1e-4, n_jobs=1):
    """Recursive feature elimination scored by repeated stratified k-fold CV.

    ``X`` holds the variance-filtered (raw) features; z-scoring happens here,
    on the full table for ranking and per training split for scoring.
    ``retained`` indexes columns of ``X``.
    """
    X = _matrix(X)
    y = np.asarray(y)
    if len(set(y.tolist())) < 2:
        raise LabelError("feature selection needs at least two classes")
    if X.shape[1] == 0:
        raise InsufficientDataError("no features left to select from")
    Xz, _, _ = zscore_fit_apply(X)
    subsets = elimination_path(Xz, y, C, tol)
    folds = fold_table(y, cv)
    curve = []
    best_k, best_acc = None, -1.0
    for k in range(1, X.shape[1] + 1):
        acc = float(fold_accuracies(X[:, subsets[k]], y, cv, C, tol, True, n_jobs, folds).mean())
        curve.append((k, acc))
        if acc > best_acc:
            best_k, best_acc = k, acc
    order = [next(iter(set(subsets[k + 1]) - set(subsets[k]))) for k in range(X.shape[1] - 1, 0, -1)]
    return SelectionResult(subsets[best_k], curve, best_k, order)
