"""Linear SVM, survival classes, stratified folds and repeated cross-validation.

The classifier is one-vs-rest L2-regularised hinge-loss SVM solved by dual
coordinate descent (cyclic order, so a fit is a pure function of the data
order). The bias is learned as the weight of an appended constant feature,
which means it is regularised along with the weights.
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import (ConfigError, DataError, LabelError, SchemaError,
                     StratificationError)

CLASSES = ("short", "mid", "long")
DAYS_PER_MONTH = 365.25 / 12.0
SHORT_MONTHS = 10.0
LONG_MONTHS = 15.0


def class_of_days(days):
    """Survival class: short (< 10 months), long (> 15 months), else mid."""
    days = float(days)
    if not days >= 0 or not math.isfinite(days):
        raise DataError(f"survival days must be a finite non-negative number, got {days}")
    months = days / DAYS_PER_MONTH
    if months < SHORT_MONTHS:
        return "short"
    if months > LONG_MONTHS:
        return "long"
    return "mid"


def days_bucket(cls):
    lo = SHORT_MONTHS * DAYS_PER_MONTH
    hi = LONG_MONTHS * DAYS_PER_MONTH
    return {"short": f"[0,{lo!r})", "mid": f"[{lo!r},{hi!r}]", "long": f"({hi!r},inf)"}.get(cls, "")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    age_years: float
    survival_days: float = None
    resection_status: str = "NA"

    def __post_init__(self):
        if not self.age_years > 0:
            raise DataError(f"subject {self.id}: age must be positive")
        if self.survival_days is not None and not (
                math.isfinite(self.survival_days) and self.survival_days >= 0):
            raise DataError(f"subject {self.id}: survival must be finite and >= 0")
        if self.resection_status not in ("GTR", "STR", "NA"):
            raise DataError(f"subject {self.id}: unknown resection status {self.resection_status!r}")

    @property
    def survival_class(self):
        return None if self.survival_days is None else class_of_days(self.survival_days)


def load_manifest(path):
    """Read ``id,age_years,survival_days,resection_status`` (survival may be empty)."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        need = {"id", "age_years", "survival_days", "resection_status"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaError(f"{path}: manifest needs columns {sorted(need)}")
        out = []
        for row in reader:
            surv = row["survival_days"].strip()
            status = row["resection_status"].strip() or "NA"
            out.append(SubjectRecord(row["id"].strip(), float(row["age_years"]),
                                     float(surv) if surv else None, status))
    return out


def filter_gtr(records):
    return [r for r in records if r.resection_status == "GTR"]


@dataclass(frozen=True)
class CVConfig:
    folds: int = 5
    repeats: int = 1000
    seed: int = 0

    def __post_init__(self):
        if int(self.folds) < 2:
            raise ConfigError("folds must be >= 2")
        if int(self.repeats) < 1:
            raise ConfigError("repeats must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


@numba.njit(cache=True, nogil=True)
def _duality_gap(X, y, w, alpha, C):
    n, d = X.shape
    ww = 0.0
    for j in range(d):
        ww += w[j] * w[j]
    loss = 0.0
    asum = 0.0
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += w[j] * X[i, j]
        m = 1.0 - y[i] * m
        if m > 0.0:
            loss += m
        asum += alpha[i]
    primal = 0.5 * ww + C * loss
    return primal - (asum - 0.5 * ww), primal


@numba.njit(cache=True, nogil=True)
def _dual_cd(X, y, C, tol, max_iter):
    """Hinge-loss dual coordinate descent for one binary problem (y in {-1, 1}).

    Uses the usual active-set shrinking on projected gradients; convergence is
    only declared on the full set, once the relative duality gap is <= tol.
    """
    n, d = X.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qd = np.zeros(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qd[i] = s
    active = np.arange(n)
    n_active = n
    pg_eps = 0.1
    pg_max_old = np.inf
    pg_min_old = -np.inf
    for it in range(max_iter):
        pg_max = -np.inf
        pg_min = np.inf
        s = 0
        while s < n_active:
            i = active[s]
            if qd[i] == 0.0:
                s += 1
                continue
            g = 0.0
            for j in range(d):
                g += w[j] * X[i, j]
            g = y[i] * g - 1.0
            pg = 0.0
            if alpha[i] == 0.0:
                if g > pg_max_old:
                    n_active -= 1
                    active[s], active[n_active] = active[n_active], active[s]
                    continue
                if g < 0.0:
                    pg = g
            elif alpha[i] == C:
                if g < pg_min_old:
                    n_active -= 1
                    active[s], active[n_active] = active[n_active], active[s]
                    continue
                if g > 0.0:
                    pg = g
            else:
                pg = g
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if pg != 0.0:
                a = alpha[i] - g / qd[i]
                if a < 0.0:
                    a = 0.0
                elif a > C:
                    a = C
                delta = a - alpha[i]
                alpha[i] = a
                for j in range(d):
                    w[j] += delta * y[i] * X[i, j]
            s += 1
        if pg_max - pg_min <= pg_eps or n_active == 0:
            if n_active == n:
                gap, primal = _duality_gap(X, y, w, alpha, C)
                if gap <= tol * max(primal, 1e-12):
                    break
                pg_eps *= 0.1
            n_active = n
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max if pg_max > 0.0 else np.inf
        pg_min_old = pg_min if pg_min < 0.0 else -np.inf
    return w


@numba.njit(cache=True, nogil=True)
def _ovr_fit(X, yi, n_classes, C, tol, max_iter):
    n, d = X.shape
    Xa = np.ones((n, d + 1))
    Xa[:, :d] = X
    W = np.zeros((n_classes, d + 1))
    yb = np.empty(n)
    for c in range(n_classes):
        for i in range(n):
            yb[i] = 1.0 if yi[i] == c else -1.0
        W[c] = _dual_cd(Xa, yb, C, tol, max_iter)
    return W


@dataclass
class LinearSvmModel:
    classes: tuple
    weights: np.ndarray
    bias: np.ndarray
    C: float = 1.0
    tol: float = 1e-4
    feature_names: list = field(default=None)

    def decision_function(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.weights.shape[1]:
            raise SchemaError(f"expected {self.weights.shape[1]} features, got shape {X.shape}")
        return X @ self.weights.T + self.bias

    def to_json(self):
        return json.dumps({
            "classes": list(self.classes),
            "weights": [[float(x) for x in row] for row in self.weights],
            "bias": [float(b) for b in self.bias],
            "C": self.C,
            "feature_names": list(self.feature_names or []),
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(tuple(d["classes"]), np.array(d["weights"], dtype=np.float64),
                   np.array(d["bias"], dtype=np.float64), d.get("C", 1.0),
                   feature_names=d.get("feature_names") or None)


def class_order(y):
    present = list(dict.fromkeys(np.asarray(y).tolist()))
    if set(present) <= set(CLASSES):
        return tuple(c for c in CLASSES if c in present)
    return tuple(sorted(present))


def encode(y, classes):
    pos = {c: i for i, c in enumerate(classes)}
    return np.array([pos[v] for v in np.asarray(y).tolist()], dtype=np.int64)


def svm_fit(X, y, C=1.0, tol=1e-4, max_iter=5000, feature_names=None, classes=None):
    """One-vs-rest linear SVM; each binary dual solved to relative gap ``tol``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise SchemaError(f"X shape {X.shape} does not match {len(y)} labels")
    if not np.all(np.isfinite(X)):
        raise DataError("feature matrix contains non-finite values")
    if not C > 0:
        raise ConfigError("C must be positive")
    classes = classes or class_order(y)
    if len(set(np.asarray(y).tolist())) < 2:
        raise LabelError("need at least two classes to train")
    W = _ovr_fit(X, encode(y, classes), len(classes), float(C), float(tol), int(max_iter))
    return LinearSvmModel(tuple(classes), W[:, :-1].copy(), W[:, -1].copy(), C, tol, feature_names)


def svm_predict(model, X, return_decision=False):
    """Argmax of per-class decision values; ties go to the earlier class."""
    dec = model.decision_function(X)
    pred = [model.classes[i] for i in np.argmax(dec, axis=1)]
    return (pred, dec) if return_decision else pred


def stratified_folds(y, cv, repeat_index=0):
    """Fold id per sample, stratified by class, deterministic in (seed, repeat)."""
    y = np.asarray(y)
    k = int(cv.folds)
    rng = np.random.default_rng([int(cv.seed), int(repeat_index)])
    folds = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in class_order(y):
        members = np.nonzero(y == c)[0]
        if len(members) < k:
            raise StratificationError(f"class {c!r} has {len(members)} members, fewer than {k} folds")
        members = members[rng.permutation(len(members))]
        folds[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    return folds


@numba.njit(cache=True, nogil=True)
def _cv_block(X, yi, fold_table, n_classes, C, tol, standardize):
    """Held-out accuracy for every (repeat, fold) in ``fold_table``."""
    n_rep = fold_table.shape[0]
    n, d = X.shape
    n_folds = 0
    for i in range(n):
        if fold_table[0, i] + 1 > n_folds:
            n_folds = fold_table[0, i] + 1
    out = np.zeros((n_rep, n_folds))
    for r in range(n_rep):
        for f in range(n_folds):
            n_tr = 0
            for i in range(n):
                if fold_table[r, i] != f:
                    n_tr += 1
            Xtr = np.empty((n_tr, d))
            ytr = np.empty(n_tr, dtype=np.int64)
            Xte = np.empty((n - n_tr, d))
            yte = np.empty(n - n_tr, dtype=np.int64)
            a = 0
            b = 0
            for i in range(n):
                if fold_table[r, i] != f:
                    Xtr[a] = X[i]
                    ytr[a] = yi[i]
                    a += 1
                else:
                    Xte[b] = X[i]
                    yte[b] = yi[i]
                    b += 1
            if standardize:
                for j in range(d):
                    mu = 0.0
                    for i in range(n_tr):
                        mu += Xtr[i, j]
                    mu /= n_tr
                    ss = 0.0
                    for i in range(n_tr):
                        ss += (Xtr[i, j] - mu) ** 2
                    sd = np.sqrt(ss / (n_tr - 1)) if n_tr > 1 else 0.0
                    if not sd > 0.0:
                        sd = 1.0
                    for i in range(n_tr):
                        Xtr[i, j] = (Xtr[i, j] - mu) / sd
                    for i in range(n - n_tr):
                        Xte[i, j] = (Xte[i, j] - mu) / sd
            W = _ovr_fit(Xtr, ytr, n_classes, C, tol, 5000)
            hits = 0
            for i in range(n - n_tr):
                best = 0
                best_v = -np.inf
                for c in range(n_classes):
                    v = W[c, d]
                    for j in range(d):
                        v += W[c, j] * Xte[i, j]
                    if v > best_v:
                        best_v = v
                        best = c
                if best == yte[i]:
                    hits += 1
            out[r, f] = hits / (n - n_tr)
    return out


def fold_table(y, cv):
    """``(repeats, n)`` fold ids, one row per repeat."""
    return np.stack([stratified_folds(y, cv, r) for r in range(cv.repeats)])


def fold_accuracies(X, y, cv, C=1.0, tol=1e-4, standardize=True, n_jobs=1, folds=None):
    """``(repeats, folds)`` array of held-out accuracies.

    ``folds`` may carry a precomputed :func:`fold_table` to skip regenerating
    the splits (they depend only on ``y`` and ``cv``).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(set(y.tolist())) < 2:
        raise LabelError("need at least two classes for cross-validation")
    classes = class_order(y)
    yi = encode(y, classes)
    table = fold_table(y, cv) if folds is None else folds
    args = (len(classes), float(C), float(tol), bool(standardize))
    if n_jobs > 1 and len(table) > 1:
        blocks = np.array_split(np.arange(len(table)), min(n_jobs, len(table)))
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(lambda b: _cv_block(X, yi, table[b], *args), blocks))
        return np.concatenate(parts)
    return _cv_block(X, yi, table, *args)


def repeated_cv_accuracy(X, y, cv, C=1.0, tol=1e-4, standardize=True, n_jobs=1):
    """Mean and population std over all repeat x fold accuracies.

    With ``standardize`` the z-score statistics are learned from each
    training split only.
    """
    accs = fold_accuracies(X, y, cv, C, tol, standardize, n_jobs)
    return float(accs.mean()), float(accs.std())
