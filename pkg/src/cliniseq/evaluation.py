"""Per-time-point AUC, topic top-word listings and kNN-overlap topic quality."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks; ties between classes count one half.

    Raises ValueError unless both classes are present.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class AucPoint:
    t: int
    n_pos: int
    n_neg: int
    auc: float | None


def default_horizon(lengths: Sequence[int]) -> int:
    """90th-percentile sequence length (at least 1)."""
    if len(lengths) == 0:
        return 1
    return max(1, int(math.ceil(np.percentile(np.asarray(lengths), 90))))


def eval_per_time_point(scores: Sequence[np.ndarray], labels, horizon: int | None = None) -> list[AucPoint]:
    """AUC at t = 1..horizon over patients whose sequence reaches t.

    ``scores[i][t-1]`` is patient i's score at time point t; the length of
    ``scores[i]`` is the patient's sequence length.
    """
    y = np.asarray(labels, dtype=bool)
    lengths = [len(s) for s in scores]
    if horizon is None:
        horizon = default_horizon(lengths)
    report = []
    for t in range(1, horizon + 1):
        idx = [i for i, n in enumerate(lengths) if n >= t]
        yt = y[idx]
        n_pos = int(yt.sum())
        n_neg = len(idx) - n_pos
        value = None
        if n_pos and n_neg:
            value = auc([scores[i][t - 1] for i in idx], yt)
        report.append(AucPoint(t, n_pos, n_neg, value))
    return report


def mean_auc(report: Sequence[AucPoint]) -> float:
    vals = [p.auc for p in report if p.auc is not None]
    return float(np.mean(vals)) if vals else float("nan")


def write_auc_csv(path, rows: Sequence[tuple[str, str, AucPoint]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "model", "t", "n_pos", "n_neg", "auc"])
        for task, model, p in rows:
            w.writerow([task, model, p.t, p.n_pos, p.n_neg, "" if p.auc is None else repr(p.auc)])


# ------------------------------------------------------------------ topics


def top_words(M: np.ndarray, vocab: Sequence[str], k: int, n: int = 10,
              word_major: bool = False) -> list[tuple[str, float]]:
    """Highest-weight words of topic ``k``.

    Rows are topics (encoder weights, LDA phi) unless ``word_major`` is set,
    in which case columns are topics (decoder weights).  Ties are broken by
    the word itself.
    """
    M = np.asarray(M, dtype=float)
    weights = M[:, k] if word_major else M[k]
    n_topics = M.shape[1] if word_major else M.shape[0]
    if not 0 <= k < n_topics:
        raise IndexError(f"topic {k} out of range 0..{n_topics - 1}")
    if len(weights) != len(vocab):
        raise ValueError("weight matrix does not match vocabulary size")
    order = sorted(range(len(vocab)), key=lambda w: (-weights[w], vocab[w]))
    return [(vocab[w], float(weights[w])) for w in order[: min(n, len(vocab))]]


def format_topics(M: np.ndarray, vocab: Sequence[str], n: int = 10, word_major: bool = False) -> str:
    n_topics = M.shape[1] if word_major else M.shape[0]
    lines = []
    for k in range(n_topics):
        words = ", ".join(w for w, _ in top_words(M, vocab, k, n, word_major))
        lines.append(f"T{k}: {words}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- kNN


def nearest_neighbors(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of each point's k nearest others (Euclidean), ties by index."""
    X = np.asarray(points, dtype=float)
    n = X.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} vectors, got {n}")
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        # exact row-wise differences so duplicate points tie exactly
        d2 = ((X - X[i]) ** 2).sum(axis=1)
        d2[i] = np.inf
        out[i] = np.argsort(d2, kind="stable")[:k]
    return out


def knn_overlap(latents: np.ndarray, k: int, reference: np.ndarray | None = None,
                groups: Sequence | None = None) -> float:
    """Mean kNN agreement with a gold standard.

    With ``reference`` latents: |kNN(candidate) & kNN(reference)| / k.
    With ``groups`` (e.g. patient ids): share of neighbors in the same group.
    Rows are ordered by document id, which breaks distance ties.
    """
    if (reference is None) == (groups is None):
        raise ValueError("give exactly one of reference or groups")
    nn = nearest_neighbors(latents, k)
    if reference is not None:
        ref = nearest_neighbors(reference, k)
        if ref.shape != nn.shape:
            raise ValueError("candidate and reference latents differ in size")
        return float(np.mean([len(set(a) & set(b)) / k for a, b in zip(nn, ref)]))
    g = np.asarray(groups)
    if g.shape[0] != nn.shape[0]:
        raise ValueError("groups and latents differ in size")
    return float(np.mean(g[nn] == g[:, None]))
