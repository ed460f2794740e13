"""Per-time-point weighted linear SVM over averaged LDA topic features."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .evaluation import auc
from .lda import average_theta_upto
from .parallel import worker_count

C_GRID = tuple(2.0 ** e for e in range(-5, 16, 2))
POS_WEIGHT_GRID = (1.0, 3.0, 5.0, 7.0, 9.0)
DEFAULT_EPOCHS = 50


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    C: float
    pos_weight: float


def objective(w, b, X, y, C: float, pos_weight: float) -> float:
    """0.5 |w|^2 + C * sum_i s_i * hinge_i with s_i = pos_weight for positives."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    s = np.where(y > 0, pos_weight, 1.0)
    hinge = np.maximum(0.0, 1.0 - y * (X @ np.asarray(w, dtype=float) + b))
    return float(0.5 * np.dot(w, w) + C * np.sum(s * hinge))


@numba.njit(cache=True, nogil=True)
def _pegasos(X, y, s, lam, perms, track):
    n, d = X.shape
    epochs = perms.shape[0]
    w = np.zeros(d)
    b = 0.0
    w_avg = np.zeros(d)
    b_avg = 0.0
    tau = 0
    last = epochs - 1
    trace_w = np.zeros((n if track else 0, d))
    trace_b = np.zeros(n if track else 0)
    for e in range(epochs):
        for j in range(n):
            i = perms[e, j]
            tau += 1
            eta = 1.0 / (lam * tau)
            margin = y[i] * (np.dot(w, X[i]) + b)
            shrink = 1.0 - eta * lam
            for k in range(d):
                w[k] *= shrink
            if margin < 1.0:
                step = eta * s[i] * y[i]
                for k in range(d):
                    w[k] += step * X[i, k]
                b += step
            if e == last:
                for k in range(d):
                    w_avg[k] += w[k]
                b_avg += b
                if track:
                    trace_w[j] = w
                    trace_b[j] = b
    return w_avg / n, b_avg / n, trace_w, trace_b


def _check_inputs(X, y):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("features must be (n, K) with one label per row")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 / -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("train_svm needs examples of both classes")
    return X, y


def train_svm(X, y, C: float, pos_weight: float = 1.0, epochs: int = DEFAULT_EPOCHS, seed: int = 0,
              return_trace: bool = False):
    """Epoch-shuffled Pegasos subgradient descent on the weighted hinge objective.

    Step size at update tau is 1/(lambda * tau) with lambda = 1/(C n).  The
    returned model is the average of the iterates over the last epoch.
    With ``return_trace`` the last-epoch iterates are returned as well.
    """
    X, y = _check_inputs(X, y)
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(n) for _ in range(epochs)]).astype(np.int64)
    s = np.where(y > 0, pos_weight, 1.0)
    w, b, tw, tb = _pegasos(X, y, s, 1.0 / (C * n), perms, return_trace)
    model = SvmModel(w, float(b), float(C), float(pos_weight))
    if return_trace:
        return model, (tw, tb)
    return model


def svm_score(model: SvmModel, x) -> float | np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.w.shape[0]:
        raise ValueError(f"expected {model.w.shape[0]} features, got {x.shape[-1]}")
    out = x @ model.w + model.b
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------ per time point


def time_point_sets(thetas: Sequence[np.ndarray], horizon: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """For t = 1..horizon: (patient indices with length >= t, averaged features)."""
    out = []
    for t in range(1, horizon + 1):
        idx = np.array([i for i, th in enumerate(thetas) if len(th) >= t], dtype=np.int64)
        feats = np.array([average_theta_upto(thetas[i], t) for i in idx]) if len(idx) else np.zeros((0, 0))
        out.append((idx, feats))
    return out


def _signed(labels) -> np.ndarray:
    return np.where(np.asarray(labels, dtype=bool), 1.0, -1.0)


def grid_search_svm(train_sets, train_labels, val_sets, val_labels, C_grid=C_GRID,
                    pos_grid=POS_WEIGHT_GRID, epochs: int = DEFAULT_EPOCHS, seed: int = 0):
    """Exhaustive (C, pos_weight) search per time point on validation AUC.

    ``*_sets`` come from ``time_point_sets``.  Returns a list with one entry
    per time point: (SvmModel | None, val_auc | None, {(C, w): auc}).
    Ties prefer the smaller C, then the smaller pos_weight; a time point
    whose training set lacks a class gets None.
    """
    ytr_all = np.asarray(train_labels, dtype=bool)
    yva_all = np.asarray(val_labels, dtype=bool)
    grid = [(C, w) for C in sorted(C_grid) for w in sorted(pos_grid)]

    def one(t):
        (tr_idx, Xtr), (va_idx, Xva) = train_sets[t], val_sets[t]
        ytr = ytr_all[tr_idx] if len(tr_idx) else np.zeros(0, dtype=bool)
        if len(tr_idx) == 0 or ytr.all() or not ytr.any():
            return None, None, {}
        yva = yva_all[va_idx] if len(va_idx) else np.zeros(0, dtype=bool)
        can_score = len(va_idx) > 0 and yva.any() and not yva.all()
        scores = {}
        best = None
        for C, w in grid:
            model = train_svm(Xtr, _signed(ytr), C, w, epochs, seed)
            value = auc(svm_score(model, Xva), yva) if can_score else None
            scores[(C, w)] = value
            if best is None or (value is not None and (best[1] is None or value > best[1])):
                best = (model, value)
        return best[0], best[1], scores

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(one, range(len(train_sets))))


@dataclass
class SvmBaseline:
    """One classifier per time point; later points fall back to the last trained one."""

    models: list[SvmModel | None] = field(default_factory=list)

    def model_for(self, t: int) -> SvmModel | None:
        for j in range(min(t, len(self.models)) - 1, -1, -1):
            if self.models[j] is not None:
                return self.models[j]
        return None

    def score_sequence(self, thetas: np.ndarray) -> np.ndarray:
        out = np.zeros(len(thetas))
        for t in range(1, len(thetas) + 1):
            model = self.model_for(t)
            out[t - 1] = 0.0 if model is None else svm_score(model, average_theta_upto(thetas, t))
        return out
