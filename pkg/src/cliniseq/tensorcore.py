"""Dense layers with hand-derived backward passes, losses and Adam.

Arrays are float64 numpy arrays.  Functions accept a single vector or a
leading batch axis; weight matrices are stored (out, in) and applied as
``x @ W.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

PROB_EPS = 1e-7
RECON_FLOOR = 1e-12
GATES = ("i", "f", "o", "c")


def _check_last_dim(x: np.ndarray, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise ValueError(f"{what}: expected last dimension {n}, got {x.shape[-1]}")


# ---------------------------------------------------------------- affine


@dataclass
class AffineParams:
    W: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.W.ndim != 2:
            raise ValueError("W must be a matrix")
        if self.b is not None and self.b.shape != (self.W.shape[0],):
            raise ValueError(f"bias shape {self.b.shape} does not match W {self.W.shape}")


def affine_forward(p: AffineParams, x: np.ndarray) -> np.ndarray:
    _check_last_dim(x, p.W.shape[1], "affine_forward")
    y = x @ p.W.T
    if p.b is not None:
        y = y + p.b
    return y


def affine_backward(p: AffineParams, x: np.ndarray, dy: np.ndarray):
    """Return (dx, dW, db) for y = x W^T + b; batch axes are summed."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0) if p.b is not None else None
    dx = dy @ p.W
    return dx, dW, db


# ----------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return dy * (x > 0)


def sigmoid(x):
    return expit(np.asarray(x, dtype=float))


def tanh(x):
    return np.tanh(x)


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, dy, axis: int = -1):
    """Backward through softmax given its output ``y``."""
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


# ------------------------------------------------------------------ LSTM


@dataclass
class LstmParams:
    """Per-gate input weights U (H, K), recurrent weights R (H, H), biases (H,)."""

    U: dict[str, np.ndarray]
    R: dict[str, np.ndarray]
    b: dict[str, np.ndarray]

    @property
    def hidden_size(self) -> int:
        return self.R["i"].shape[0]

    @property
    def input_size(self) -> int:
        return self.U["i"].shape[1]

    def stacked(self):
        U = np.concatenate([self.U[g] for g in GATES], axis=0)
        R = np.concatenate([self.R[g] for g in GATES], axis=0)
        b = np.concatenate([self.b[g] for g in GATES])
        return U, R, b

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LstmParams":
        s_in = 1.0 / np.sqrt(input_size)
        s_rec = 1.0 / np.sqrt(hidden_size)
        U, R, b = {}, {}, {}
        for g in GATES:
            U[g] = rng.uniform(-s_in, s_in, (hidden_size, input_size))
            R[g] = rng.uniform(-s_rec, s_rec, (hidden_size, hidden_size))
            b[g] = np.full(hidden_size, 1.0 if g == "f" else 0.0)
        return cls(U, R, b)


def lstm_step(p: LstmParams, x, h_prev, c_prev):
    _check_last_dim(x, p.input_size, "lstm_step input")
    _check_last_dim(h_prev, p.hidden_size, "lstm_step h_prev")
    _check_last_dim(c_prev, p.hidden_size, "lstm_step c_prev")
    U, R, b = p.stacked()
    h, c, _ = _lstm_cell(U, R, b, x, h_prev, c_prev, p.hidden_size)
    return h, c


def _lstm_cell(U, R, b, x, h_prev, c_prev, H):
    a = x @ U.T + h_prev @ R.T + b
    ifo = expit(a[..., :3 * H])
    i, f, o = ifo[..., :H], ifo[..., H:2 * H], ifo[..., 2 * H:]
    g = np.tanh(a[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, o, g, tc)


@dataclass
class LstmCache:
    x: np.ndarray
    mask: np.ndarray
    hs: np.ndarray
    cs: np.ndarray
    single: bool = False
    gates: list = field(default_factory=list)


def lstm_forward(p: LstmParams, inputs, mask=None):
    """Run the recurrence over ``inputs`` of shape (T, K) or (B, T, K).

    Where ``mask`` is False the step is skipped: the state is carried
    forward unchanged, so padded or empty time points are invisible.
    Returns hidden states with the same leading shape and a cache.
    """
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    B, T, _ = x.shape
    if T < 1:
        raise ValueError("lstm_forward needs at least one time point")
    _check_last_dim(x, p.input_size, "lstm_forward")
    m = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)
    H = p.hidden_size
    U, R, b = p.stacked()
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    cache = LstmCache(x=x, mask=m, hs=hs, cs=cs, single=single)
    for t in range(T):
        h, c, gates = _lstm_cell(U, R, b, x[:, t], hs[:, t], cs[:, t], H)
        keep = m[:, t, None]
        hs[:, t + 1] = np.where(keep, h, hs[:, t])
        cs[:, t + 1] = np.where(keep, c, cs[:, t])
        cache.gates.append(gates)
    out = hs[:, 1:]
    return (out[0] if single else out), cache


def lstm_backward(p: LstmParams, cache: LstmCache, dh):
    """BPTT.  ``dh`` is dLoss/dh^(t) with the forward output's shape.

    Returns (grads, dx) where grads mirrors LstmParams as a dict of
    {"U": {...}, "R": {...}, "b": {...}}.
    """
    dh = np.asarray(dh, dtype=float)
    if dh.ndim == 2:
        dh = dh[None]
    x, m, hs, cs = cache.x, cache.mask, cache.hs, cache.cs
    B, T, K = x.shape
    H = p.hidden_size
    U, R, _ = p.stacked()
    das = np.zeros((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        i, f, o, g, tc = cache.gates[t]
        keep = m[:, t, None]
        dh_t = dh[:, t] + dh_next
        dc_t = dc_next
        do = dh_t * tc
        dc = dc_t + dh_t * o * (1.0 - tc ** 2)
        di = dc * g
        dg = dc * i
        df = dc * cs[:, t]
        dc_prev = dc * f
        da = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g ** 2)], axis=-1
        )
        da = da * keep
        das[:, t] = da
        dh_prev = da @ R
        dh_next = np.where(keep, dh_prev, dh_t)
        dc_next = np.where(keep, dc_prev, dc_t)
    flat = das.reshape(B * T, 4 * H)
    dU = flat.T @ x.reshape(B * T, K)
    dR = flat.T @ hs[:, :T].reshape(B * T, H)
    db = flat.sum(axis=0)
    dx = das @ U
    grads = {"U": {}, "R": {}, "b": {}}
    for n, gname in enumerate(GATES):
        sl = slice(n * H, (n + 1) * H)
        grads["U"][gname] = dU[sl]
        grads["R"][gname] = dR[sl]
        grads["b"][gname] = db[sl]
    return grads, (dx[0] if cache.single else dx)


# ---------------------------------------------------------------- losses


def weighted_ce(p, q, cfn: float = 1.0):
    """False-negative weighted binary cross-entropy and dH/dp.

    ``p`` is clamped to [PROB_EPS, 1 - PROB_EPS]; the returned gradient is
    zero where the clamp is active.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    value = -cfn * q * np.log(pc) - (1.0 - q) * np.log(1.0 - pc)
    grad = -cfn * q / pc + (1.0 - q) / (1.0 - pc)
    grad = np.where((p < PROB_EPS) | (p > 1.0 - PROB_EPS), 0.0, grad)
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


def categorical_ce(pred, target):
    """-sum target * ln(pred) over the last axis; zero targets give 0."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"categorical_ce: shape mismatch {pred.shape} vs {target.shape}")
    value = -(target * np.log(np.maximum(pred, RECON_FLOOR))).sum(axis=-1)
    return float(value) if value.ndim == 0 else value


def categorical_ce_grad(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    return np.where(pred > RECON_FLOOR, -target / np.maximum(pred, RECON_FLOOR), 0.0)


def l1_value_and_subgradient(x):
    x = np.asarray(x, dtype=float)
    return float(np.abs(x).sum()), np.sign(x)


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **kw,
        )


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """In-place bias-corrected Adam step over every name in ``grads``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_update: gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1 if c1 > 0 else m
        v_hat = v / c2 if c2 > 0 else v
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ------------------------------------------------------------ grad check


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x)
        flat[j] = orig - h
        fm = f(x)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(f: Callable[[np.ndarray], float], point, analytic, h: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``."""
    numeric = numerical_gradient(f, np.asarray(point, dtype=float), h)
    return relative_error(analytic, numeric)
