"""LSTM outcome models over per-time-point documents.

Four variants share one forward/backward implementation:

* ``lstm_lda``  - the LSTM reads precomputed LDA topic vectors;
* ``lstm_e``    - a ReLU encoder maps bag-of-words to the topic layer;
* ``lstm_ed``   - plus a bias-free softmax decoder reconstructing the input;
* ``lstm_etd``  - plus a ReLU transcoder between topic layer and decoder.

Every model reads a batch ``X`` of shape (B, T, D) with a mask marking
non-empty time points.  Masked steps do not advance the LSTM and add no
per-time-point loss.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensorcore as tc

log = logging.getLogger(__name__)

LSTM_NAMES = [f"lstm.{kind}{g}" for kind in ("U", "R", "b") for g in tc.GATES]


class ModelKind(str, enum.Enum):
    LSTM_LDA = "lstm_lda"
    LSTM_E = "lstm_e"
    LSTM_E_D = "lstm_ed"
    LSTM_E_T_D = "lstm_etd"

    @property
    def has_encoder(self) -> bool:
        return self is not ModelKind.LSTM_LDA

    @property
    def has_decoder(self) -> bool:
        return self in (ModelKind.LSTM_E_D, ModelKind.LSTM_E_T_D)

    @property
    def has_transcoder(self) -> bool:
        return self is ModelKind.LSTM_E_T_D


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lambda1: float = 1e-2
    lambda2: float = 0.0
    lambda3: float = 1.0
    cfn: float = 1.0
    lr: float = 1e-3
    batch_size: int = 10
    steps: int = 100_000
    seed: int = 0
    task: str = "hospital"
    K: int = 50
    H: int = 128
    log_every: int = 100
    val_every: int = 1000
    decoder_l1: bool = True
    frozen: tuple = ()

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.cfn < 1:
            raise ValueError("cfn must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lr must be > 0, batch_size >= 1, steps >= 0")
        if self.K < 1 or self.H < 1 or self.log_every < 1 or self.val_every < 1:
            raise ValueError("K, H, log_every and val_every must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class JointModel:
    kind: ModelKind
    params: dict[str, np.ndarray]
    V: int  # input width: vocabulary size, or K for lstm_lda
    K: int
    H: int

    def lstm(self) -> tc.LstmParams:
        p = self.params
        return tc.LstmParams(
            U={g: p[f"lstm.U{g}"] for g in tc.GATES},
            R={g: p[f"lstm.R{g}"] for g in tc.GATES},
            b={g: p[f"lstm.b{g}"] for g in tc.GATES},
        )

    def copy(self) -> "JointModel":
        return JointModel(self.kind, {k: v.copy() for k, v in self.params.items()}, self.V, self.K, self.H)


def init_model(kind: ModelKind | str, V: int, K: int = 50, H: int = 128, seed: int = 0) -> JointModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except forget gate 1.

    Encoder, LSTM and output layer come from one stream and decoder-side
    layers from another, so variants with the same seed share their
    prediction-path initialization.
    """
    kind = ModelKind(kind)
    if kind is ModelKind.LSTM_LDA and V != K:
        raise ValueError("lstm_lda reads K-dimensional topic vectors, so V must equal K")
    rng = np.random.default_rng([seed, 0])
    aux = np.random.default_rng([seed, 1])
    p: dict[str, np.ndarray] = {}

    def uni(r, shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return r.uniform(-s, s, shape)

    if kind.has_encoder:
        p["encoder.W"] = uni(rng, (K, V), V)
        p["encoder.b"] = np.zeros(K)
    lstm = tc.LstmParams.init(K, H, rng)
    for g in tc.GATES:
        p[f"lstm.U{g}"] = lstm.U[g]
    for g in tc.GATES:
        p[f"lstm.R{g}"] = lstm.R[g]
    for g in tc.GATES:
        p[f"lstm.b{g}"] = lstm.b[g]
    p["output.W"] = uni(rng, (2, H), H)
    p["output.b"] = np.zeros(2)
    if kind.has_transcoder:
        p["transcoder.W"] = uni(aux, (K, K), K)
        p["transcoder.b"] = np.zeros(K)
    if kind.has_decoder:
        p["decoder.W"] = uni(aux, (V, K), K)
    return JointModel(kind, p, V, K, H)


# --------------------------------------------------------------- batching


def time_mask(X: np.ndarray) -> np.ndarray:
    return np.abs(X).sum(axis=-1) > 0


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (T_i, D) arrays into (B, T_max, D) plus mask and lengths."""
    lengths = np.array([s.shape[0] for s in seqs])
    D = seqs[0].shape[1]
    X = np.zeros((len(seqs), lengths.max(), D))
    for b, s in enumerate(seqs):
        X[b, : s.shape[0]] = s
    return X, time_mask(X), lengths


# ---------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    X: np.ndarray
    mask: np.ndarray
    z: np.ndarray
    yhat: np.ndarray
    probs: np.ndarray
    hs: np.ndarray
    lstm_cache: tc.LstmCache
    a_enc: np.ndarray | None = None
    a_trans: np.ndarray | None = None
    zhat: np.ndarray | None = None
    xhat: np.ndarray | None = None


def forward(model: JointModel, X: np.ndarray, mask: np.ndarray | None = None) -> ForwardTrace:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.shape[-1] != model.V:
        raise ValueError(f"{model.kind.value} expects input width {model.V}, got {X.shape[-1]}")
    mask = time_mask(X) if mask is None else np.asarray(mask, dtype=bool)
    p = model.params
    m = mask[..., None]
    a_enc = None
    if model.kind.has_encoder:
        a_enc = X @ p["encoder.W"].T + p["encoder.b"]
        z = tc.relu(a_enc) * m
    else:
        z = X * m
    hs, cache = tc.lstm_forward(model.lstm(), z, mask)
    probs = tc.softmax(hs @ p["output.W"].T + p["output.b"])
    trace = ForwardTrace(X=X, mask=mask, z=z, yhat=probs[..., 1], probs=probs, hs=hs,
                         lstm_cache=cache, a_enc=a_enc)
    if model.kind.has_transcoder:
        trace.a_trans = z @ p["transcoder.W"].T + p["transcoder.b"]
        trace.zhat = tc.relu(trace.a_trans)
        trace.xhat = tc.softmax(trace.zhat @ p["decoder.W"].T)
    elif model.kind.has_decoder:
        trace.xhat = tc.softmax(z @ p["decoder.W"].T)
    return trace


# ------------------------------------------------------------------- loss


def _decoder_l1_on(model: JointModel, config: TrainConfig) -> bool:
    if not model.kind.has_decoder:
        return False
    return model.kind is ModelKind.LSTM_E_T_D or config.decoder_l1


def per_patient_loss(model: JointModel, trace: ForwardTrace, y: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Mean per-time-point loss over non-empty points, plus the decoder L1 term."""
    y = np.asarray(y, dtype=float).reshape(-1)
    mask = trace.mask
    n = mask.sum(axis=1)
    inv = np.where(n > 0, 1.0 / np.maximum(n, 1), 0.0)
    pred, _ = tc.weighted_ce(trace.yhat, np.broadcast_to(y[:, None], trace.yhat.shape), config.cfn)
    per_t = pred
    if trace.xhat is not None and config.lambda1:
        per_t = per_t + config.lambda1 * tc.categorical_ce(trace.xhat, trace.X)
    if trace.zhat is not None and config.lambda2:
        per_t = per_t + config.lambda2 * np.abs(trace.zhat).sum(axis=-1)
    out = (per_t * mask).sum(axis=1) * inv
    if _decoder_l1_on(model, config) and config.lambda3:
        out = out + config.lambda3 * np.abs(model.params["decoder.W"]).sum()
    return out


def loss(model: JointModel, trace: ForwardTrace, y, config: TrainConfig) -> float:
    return float(per_patient_loss(model, trace, y, config).mean())


# --------------------------------------------------------------- backward


def backward(model: JointModel, trace: ForwardTrace, y, config: TrainConfig) -> dict[str, np.ndarray]:
    """Exact (sub)gradient of ``loss`` with respect to every parameter."""
    p = model.params
    y = np.asarray(y, dtype=float).reshape(-1)
    B = trace.X.shape[0]
    mask = trace.mask
    n = mask.sum(axis=1)
    inv = np.where(n > 0, 1.0 / np.maximum(n, 1), 0.0)
    wt = mask * inv[:, None] / B  # d(batch loss) / d(per-time-point term)
    grads: dict[str, np.ndarray] = {}

    _, dp = tc.weighted_ce(trace.yhat, np.broadcast_to(y[:, None], trace.yhat.shape), config.cfn)
    dprobs = np.zeros_like(trace.probs)
    dprobs[..., 1] = dp * wt
    dlogits = tc.softmax_backward(trace.probs, dprobs)
    out = tc.AffineParams(p["output.W"], p["output.b"])
    dhs, grads["output.W"], grads["output.b"] = tc.affine_backward(out, trace.hs, dlogits)

    lstm_grads, dz = tc.lstm_backward(model.lstm(), trace.lstm_cache, dhs)
    for part in ("U", "R", "b"):
        for g in tc.GATES:
            grads[f"lstm.{part}{g}"] = lstm_grads[part][g]

    if trace.xhat is not None:
        dxhat = config.lambda1 * wt[..., None] * tc.categorical_ce_grad(trace.xhat, trace.X)
        dlog = tc.softmax_backward(trace.xhat, dxhat)
        dec = tc.AffineParams(p["decoder.W"])
        src = trace.zhat if trace.zhat is not None else trace.z
        dsrc, dWd, _ = tc.affine_backward(dec, src, dlog)
        if _decoder_l1_on(model, config):
            dWd = dWd + config.lambda3 * np.sign(p["decoder.W"])
        grads["decoder.W"] = dWd
        if trace.zhat is not None:
            dzhat = dsrc + config.lambda2 * wt[..., None] * np.sign(trace.zhat)
            da_t = tc.relu_backward(trace.a_trans, dzhat)
            trans = tc.AffineParams(p["transcoder.W"], p["transcoder.b"])
            dz_t, grads["transcoder.W"], grads["transcoder.b"] = tc.affine_backward(trans, trace.z, da_t)
            dz = dz + dz_t
        else:
            dz = dz + dsrc

    if model.kind.has_encoder:
        da = tc.relu_backward(trace.a_enc, dz) * mask[..., None]
        enc = tc.AffineParams(p["encoder.W"], p["encoder.b"])
        _, grads["encoder.W"], grads["encoder.b"] = tc.affine_backward(enc, trace.X, da)
    return {name: grads[name] for name in p}


# --------------------------------------------------------------- predict


def predict_sequences(model: JointModel, inputs: Sequence[np.ndarray], chunk: int = 64) -> list[np.ndarray]:
    """Per-time-point positive-class probabilities for each sequence."""
    order = np.argsort([len(s) for s in inputs], kind="stable")
    out: list[np.ndarray] = [None] * len(inputs)  # type: ignore[list-item]
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        X, mask, lengths = pad_batch([inputs[i] for i in idx])
        yhat = forward(model, X, mask).yhat
        for row, i in enumerate(idx):
            out[i] = yhat[row, : lengths[row]].copy()
    return out


def latent_sequences(model: JointModel, inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Topic-layer vectors z^(t) for each sequence."""
    return [forward(model, x).z[0] for x in inputs]


def final_scores(model: JointModel, inputs: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([s[-1] for s in predict_sequences(model, inputs)])


# ------------------------------------------------------------------ train


@dataclass
class TrainResult:
    model: JointModel
    losses: list[float] = field(default_factory=list)
    log_rows: list[tuple[int, float | None, float | None]] = field(default_factory=list)
    best_step: int = 0
    best_val_auc: float | None = None


def train(kind: ModelKind | str, inputs: Sequence[np.ndarray], y, config: TrainConfig,
          val_inputs: Sequence[np.ndarray] | None = None, val_y=None,
          init: JointModel | None = None) -> TrainResult:
    """Adam on batches sampled uniformly with replacement.

    Returns the parameters from the evaluation step with the best
    final-time-point validation AUC, or the last step without validation.
    """
    from .evaluation import auc  # evaluation imports models

    kind = ModelKind(kind)
    if len(inputs) == 0:
        raise ValueError("train needs at least one patient")
    y = np.asarray(y, dtype=float)
    V = inputs[0].shape[1]
    model = init.copy() if init is not None else init_model(kind, V, config.K, config.H, config.seed)
    result = TrainResult(model=model.copy())
    if config.steps == 0:
        return result
    trainable = {k: v for k, v in model.params.items() if k not in config.frozen}
    state = tc.AdamState.zeros_like(trainable)
    rng = np.random.default_rng([config.seed, 2])
    can_validate = (val_inputs is not None and len(val_inputs) > 0
                    and 0 < int(np.sum(val_y)) < len(val_y))
    window: list[float] = []
    best = None
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(inputs), size=config.batch_size)
        X, mask, _ = pad_batch([inputs[i] for i in idx])
        trace = forward(model, X, mask)
        value = loss(model, trace, y[idx], config)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        grads = backward(model, trace, y[idx], config)
        tc.adam_update(model.params, {k: grads[k] for k in trainable}, state, config.lr)
        if not all(np.isfinite(v).all() for v in model.params.values()):
            raise NumericError(f"non-finite parameters after step {step}")
        result.losses.append(value)
        window.append(value)
        val_auc = None
        if can_validate and (step % config.val_every == 0 or step == config.steps):
            val_auc = auc(final_scores(model, val_inputs), np.asarray(val_y, dtype=bool))
            if best is None or val_auc > best:
                best = val_auc
                result.model = model.copy()
                result.best_step = step
                result.best_val_auc = val_auc
        if step % config.log_every == 0 or val_auc is not None:
            train_loss = float(np.mean(window)) if step % config.log_every == 0 else None
            if train_loss is not None:
                window = []
                log.debug("step %d loss %.5f", step, train_loss)
            result.log_rows.append((step, train_loss, val_auc))
    if best is None:
        result.model = model.copy()
        result.best_step = config.steps
    return result


def cfn_grid_search(kind: ModelKind | str, inputs, y, val_inputs, val_y, config: TrainConfig,
                    candidates: Sequence[float] = (1.0, 2.0, 4.0, 8.0), horizon: int | None = None):
    """Train once per false-negative cost and keep the best mean per-time-point validation AUC.

    Returns (best_cfn, {cfn: score}); ties go to the smaller cost.
    """
    from .evaluation import eval_per_time_point, mean_auc

    if val_inputs is None or len(val_inputs) == 0:
        raise ValueError("cfn_grid_search needs a validation split")
    scores = {}
    for cfn in sorted(candidates):
        cfg = replace(config, cfn=cfn)
        res = train(kind, inputs, y, cfg, val_inputs, val_y)
        report = eval_per_time_point(predict_sequences(res.model, val_inputs), val_y, horizon=horizon)
        scores[cfn] = mean_auc(report)
    best = max(scores, key=lambda c: (np.nan_to_num(scores[c], nan=-1.0), -c))
    return best, scores
