"""Latent Dirichlet Allocation by collapsed Gibbs sampling, with fold-in inference.

The sweep kernels are compiled with numba; all randomness comes from a
numpy Generator so a seed fully determines the result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .parallel import worker_count

DEFAULT_K = 50
DEFAULT_BETA = 0.01


def default_alpha(K: int) -> float:
    return 50.0 / K


@dataclass
class LdaModel:
    K: int
    V: int
    alpha: float
    beta: float
    topic_word_counts: np.ndarray  # (K, V) int64
    topic_totals: np.ndarray  # (K,) int64
    fixed_phi: np.ndarray | None = None

    @property
    def phi(self) -> np.ndarray:
        if self.fixed_phi is not None:
            return self.fixed_phi
        return (self.topic_word_counts + self.beta) / (self.topic_totals[:, None] + self.V * self.beta)

    @classmethod
    def from_phi(cls, phi: np.ndarray, alpha: float, beta: float) -> "LdaModel":
        """Model carrying only phi (as loaded from a checkpoint); fold-in needs nothing else."""
        K, V = phi.shape
        return cls(K, V, alpha, beta, np.zeros((K, V), dtype=np.int64), np.zeros(K, dtype=np.int64),
                   fixed_phi=np.asarray(phi, dtype=float))


def conditional(n_dk: np.ndarray, n_kw: np.ndarray, n_k: np.ndarray, alpha: float, beta: float, V: int) -> np.ndarray:
    """Normalized p(z = k | rest) for one token, counts already excluding it."""
    p = (n_dk + alpha) * (n_kw + beta) / (n_k + V * beta)
    return p / p.sum()


@numba.njit(cache=True, nogil=True)
def _sweep(words, doc_of, z, ndk, nkw, nk, alpha, beta, u):
    K = nk.shape[0]
    V = nkw.shape[1]
    vbeta = V * beta
    p = np.empty(K)
    for i in range(words.shape[0]):
        w = words[i]
        d = doc_of[i]
        k = z[i]
        ndk[d, k] -= 1
        nkw[k, w] -= 1
        nk[k] -= 1
        total = 0.0
        for j in range(K):
            total += (ndk[d, j] + alpha) * (nkw[j, w] + beta) / (nk[j] + vbeta)
            p[j] = total
        r = u[i] * total
        k = 0
        while k < K - 1 and p[k] <= r:
            k += 1
        z[i] = k
        ndk[d, k] += 1
        nkw[k, w] += 1
        nk[k] += 1


@numba.njit(cache=True, nogil=True)
def _fold_in(words, z, phi, alpha, u, burn_in, samples):
    K = phi.shape[0]
    n = words.shape[0]
    ndk = np.zeros(K)
    for i in range(n):
        ndk[z[i]] += 1
    theta = np.zeros(K)
    p = np.empty(K)
    pos = 0
    for sweep in range(burn_in + samples):
        for i in range(n):
            w = words[i]
            ndk[z[i]] -= 1
            total = 0.0
            for j in range(K):
                total += (ndk[j] + alpha) * phi[j, w]
                p[j] = total
            r = u[pos] * total
            pos += 1
            k = 0
            while k < K - 1 and p[k] <= r:
                k += 1
            z[i] = k
            ndk[k] += 1
        if sweep >= burn_in:
            for j in range(K):
                theta[j] += (ndk[j] + alpha) / (n + K * alpha)
    return theta / samples


def _expand(doc) -> np.ndarray:
    """Token id array from either a token list or a {word_id: count} map."""
    if isinstance(doc, dict):
        if not doc:
            return np.zeros(0, dtype=np.int64)
        return np.repeat(np.fromiter(doc.keys(), dtype=np.int64), np.fromiter(doc.values(), dtype=np.int64))
    return np.asarray(doc, dtype=np.int64)


def fit_gibbs(corpus: Sequence, K: int = DEFAULT_K, V: int | None = None, alpha: float | None = None,
              beta: float = DEFAULT_BETA, iterations: int = 200, seed: int = 0,
              callback=None) -> LdaModel:
    """Fit LDA on documents given as token-id lists or {id: count} maps.

    ``callback(sweep, state)`` is called after every sweep, where state is a
    dict holding the live count arrays.
    """
    docs = [_expand(d) for d in corpus]
    if not docs or sum(len(d) for d in docs) == 0:
        raise ValueError("fit_gibbs needs a non-empty corpus")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if V is None:
        V = int(max(d.max() for d in docs if len(d))) + 1
    if alpha is None:
        alpha = default_alpha(K)
    words = np.concatenate(docs)
    if words.min() < 0 or words.max() >= V:
        raise ValueError(f"token ids must lie in [0, {V})")
    doc_of = np.repeat(np.arange(len(docs), dtype=np.int64), [len(d) for d in docs])
    rng = np.random.default_rng(seed)
    z = rng.integers(0, K, size=words.shape[0]).astype(np.int64)
    ndk = np.zeros((len(docs), K), dtype=np.int64)
    nkw = np.zeros((K, V), dtype=np.int64)
    nk = np.zeros(K, dtype=np.int64)
    np.add.at(ndk, (doc_of, z), 1)
    np.add.at(nkw, (z, words), 1)
    np.add.at(nk, z, 1)
    for sweep in range(iterations):
        _sweep(words, doc_of, z, ndk, nkw, nk, float(alpha), float(beta), rng.random(words.shape[0]))
        if callback is not None:
            callback(sweep + 1, {"z": z, "words": words, "doc_of": doc_of,
                                 "doc_topic_counts": ndk, "topic_word_counts": nkw, "topic_totals": nk})
    return LdaModel(K, V, float(alpha), float(beta), nkw, nk)


def log_likelihood_per_token(model: LdaModel, doc_topic_counts: np.ndarray, words: np.ndarray,
                             doc_of: np.ndarray) -> float:
    theta = (doc_topic_counts + model.alpha) / (doc_topic_counts.sum(1, keepdims=True) + model.K * model.alpha)
    probs = np.einsum("ik,ki->i", theta[doc_of], model.phi[:, words])
    return float(np.log(probs).mean())


def infer_doc(model: LdaModel, doc, burn_in: int = 20, samples: int = 10, seed: int = 0) -> np.ndarray:
    """Fold-in topic mixture for one document with phi held fixed."""
    words = _expand(doc)
    if words.size == 0:
        return np.full(model.K, 1.0 / model.K)
    if words.max() >= model.V:
        raise ValueError("document uses word ids outside the model vocabulary")
    rng = np.random.default_rng(seed)
    z = rng.integers(0, model.K, size=words.size).astype(np.int64)
    u = rng.random(words.size * (burn_in + samples))
    theta = _fold_in(words, z, np.ascontiguousarray(model.phi), float(model.alpha), u, burn_in, samples)
    return theta / theta.sum()


def average_theta_upto(thetas: Sequence[np.ndarray], t: int) -> np.ndarray:
    """Mean of the non-empty (non-zero) mixtures among time points 1..t."""
    if not 1 <= t <= len(thetas):
        raise ValueError(f"t={t} out of range 1..{len(thetas)}")
    rows = [np.asarray(th, dtype=float) for th in thetas[:t] if np.any(th)]
    if not rows:
        return np.zeros_like(np.asarray(thetas[0], dtype=float))
    return np.mean(rows, axis=0)


def topic_vectors_for_sequence(model: LdaModel, counts: Sequence[dict], burn_in: int = 20,
                               samples: int = 10, seed: int = 0) -> np.ndarray:
    """(T, K) topic vectors for a count sequence; empty time points give zero rows."""
    out = np.zeros((len(counts), model.K))
    for t, bow in enumerate(counts):
        if bow:
            if max(bow) >= model.V:
                raise ValueError("sequence vocabulary does not match the LDA model")
            out[t] = infer_doc(model, bow, burn_in, samples, seed=_doc_seed(seed, t))
    return out


def _doc_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def topic_vectors_for_corpus(model: LdaModel, sequences: Sequence[Sequence[dict]], seeds: Sequence[int],
                             burn_in: int = 20, samples: int = 10) -> list[np.ndarray]:
    """topic_vectors_for_sequence over many patients, threaded; order preserved."""
    if len(seeds) != len(sequences):
        raise ValueError("one seed per sequence required")
    jobs = list(zip(sequences, seeds))
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(lambda job: topic_vectors_for_sequence(model, job[0], burn_in, samples, job[1]), jobs))
