"""Glue between the corpus, LDA, LSTM and SVM modules, and checkpoint (de)serialization."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import lda as lda_mod
from .checkpoint import Checkpoint
from .corpus import Corpus, downsample
from .models import JointModel, ModelKind, TrainConfig, TrainResult, latent_sequences, predict_sequences, train
from .svm import DEFAULT_EPOCHS, SvmBaseline, SvmModel, grid_search_svm, objective, time_point_sets

LDA_KINDS = ("lda", "svm_lda", "lstm_lda")
ALL_MODELS = ("lda", "svm_lda", "lstm_lda", "lstm_e", "lstm_ed", "lstm_etd")


class CompatibilityError(ValueError):
    """Checkpoint and corpus do not fit together."""


# ----------------------------------------------------------------- inputs


def bow_inputs(corpus: Corpus, ids: Sequence[str]) -> list[np.ndarray]:
    V = len(corpus.vocab)
    return [corpus.sequences[i].dense(V) for i in ids]


def lda_documents(corpus: Corpus, ids: Sequence[str]) -> list[dict]:
    return [bow for i in ids for bow in corpus.sequences[i].counts if bow]


def patient_seed(seed: int, pid: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(pid.encode("utf-8"))]).generate_state(1)[0])


def lda_inputs(model: lda_mod.LdaModel, corpus: Corpus, ids: Sequence[str], seed: int = 0) -> list[np.ndarray]:
    seqs = [corpus.sequences[i].counts for i in ids]
    return lda_mod.topic_vectors_for_corpus(model, seqs, [patient_seed(seed, i) for i in ids])


def fit_corpus_lda(corpus: Corpus, K: int = lda_mod.DEFAULT_K, iterations: int = 200, seed: int = 0,
                   alpha: float | None = None, beta: float = lda_mod.DEFAULT_BETA, callback=None) -> lda_mod.LdaModel:
    docs = lda_documents(corpus, corpus.ids("train"))
    return lda_mod.fit_gibbs(docs, K=K, V=len(corpus.vocab), alpha=alpha, beta=beta,
                             iterations=iterations, seed=seed, callback=callback)


def training_ids(corpus: Corpus, task: str, seed: int) -> list[str]:
    """Train split after per-task negative downsampling."""
    ids = corpus.ids("train")
    kept, _ = downsample(ids, {i: corpus.labels[i].for_task(task) for i in ids}, np.random.default_rng([seed, 3]))
    return kept


# --------------------------------------------------------------- training


@dataclass
class LstmRun:
    result: TrainResult
    train_ids: list[str]
    cfn_scores: dict | None = None


def train_lstm(kind: ModelKind | str, corpus: Corpus, config: TrainConfig, lda: lda_mod.LdaModel | None = None,
               cfn_grid: Sequence[float] | None = None) -> LstmRun:
    from .models import cfn_grid_search

    kind = ModelKind(kind)
    ids = training_ids(corpus, config.task, config.seed)
    val = corpus.ids("validation")
    if kind is ModelKind.LSTM_LDA:
        if lda is None:
            raise ValueError("lstm_lda needs a fitted LDA model")
        X, Xv = lda_inputs(lda, corpus, ids, config.seed), lda_inputs(lda, corpus, val, config.seed)
        config = TrainConfig(**{**asdict(config), "K": lda.K})
    else:
        X, Xv = bow_inputs(corpus, ids), bow_inputs(corpus, val)
    y = corpus.task_labels(ids, config.task)
    yv = corpus.task_labels(val, config.task)
    scores = None
    if cfn_grid:
        best, scores = cfn_grid_search(kind, X, y, Xv, yv, config, candidates=cfn_grid)
        config = TrainConfig(**{**asdict(config), "cfn": best})
    result = train(kind, X, y, config, Xv, yv)
    return LstmRun(result, ids, scores)


@dataclass
class SvmRun:
    baseline: SvmBaseline
    details: list
    train_sizes: list[int]


def train_svm_baseline(corpus: Corpus, lda: lda_mod.LdaModel, task: str, seed: int = 0,
                       horizon: int | None = None, epochs: int = DEFAULT_EPOCHS, **grid) -> SvmRun:
    from .evaluation import default_horizon

    ids = training_ids(corpus, task, seed)
    val = corpus.ids("validation")
    thetas = lda_inputs(lda, corpus, ids, seed)
    vthetas = lda_inputs(lda, corpus, val, seed)
    if horizon is None:
        horizon = default_horizon([len(t) for t in thetas])
    tr_sets = time_point_sets(thetas, horizon)
    va_sets = time_point_sets(vthetas, horizon)
    details = grid_search_svm(tr_sets, corpus.task_labels(ids, task), va_sets, corpus.task_labels(val, task),
                              epochs=epochs, seed=seed, **grid)
    baseline = SvmBaseline([d[0] for d in details])
    return SvmRun(baseline, details, [len(idx) for idx, _ in tr_sets])


# ----------------------------------------------------------------- scores


def sequence_scores(ck: Checkpoint, corpus: Corpus, ids: Sequence[str]) -> list[np.ndarray]:
    """Per-time-point scores from any trained checkpoint."""
    kind = ck.metadata.get("kind")
    check_vocab(ck, corpus)
    seed = int(ck.metadata.get("seed", "0"))
    if kind == "svm_lda":
        lda = lda_from_checkpoint(ck)
        baseline = svm_from_checkpoint(ck)
        return [baseline.score_sequence(th) for th in lda_inputs(lda, corpus, ids, seed)]
    if kind in {k.value for k in ModelKind}:
        model = model_from_checkpoint(ck)
        if model.kind is ModelKind.LSTM_LDA:
            inputs = lda_inputs(lda_from_checkpoint(ck), corpus, ids, seed)
        else:
            inputs = bow_inputs(corpus, ids)
        return predict_sequences(model, inputs)
    raise CompatibilityError(f"checkpoint kind {kind!r} does not produce outcome scores")


def sequence_latents(ck: Checkpoint, corpus: Corpus, ids: Sequence[str]) -> list[np.ndarray]:
    """Topic-layer vectors per time point (encoder output or LDA mixture)."""
    kind = ck.metadata.get("kind")
    check_vocab(ck, corpus)
    seed = int(ck.metadata.get("seed", "0"))
    if kind in LDA_KINDS:
        return lda_inputs(lda_from_checkpoint(ck), corpus, ids, seed)
    model = model_from_checkpoint(ck)
    return latent_sequences(model, bow_inputs(corpus, ids))


# ------------------------------------------------------------ checkpoints


def check_vocab(ck: Checkpoint, corpus: Corpus) -> None:
    words = ck.metadata.get("vocab")
    if words is not None and words.split(" ") != corpus.vocab.id_to_word:
        raise CompatibilityError("checkpoint vocabulary differs from the corpus vocabulary")
    V = ck.metadata.get("V")
    if V is not None and int(V) != len(corpus.vocab):
        raise CompatibilityError(f"checkpoint expects V={V}, corpus has {len(corpus.vocab)}")


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def lda_to_checkpoint(lda: lda_mod.LdaModel, ck: Checkpoint) -> Checkpoint:
    ck.metadata.update({"lda.K": str(lda.K), "alpha": repr(lda.alpha), "beta": repr(lda.beta)})
    ck.tensors["phi"] = lda.phi
    return ck


def lda_from_checkpoint(ck: Checkpoint) -> lda_mod.LdaModel:
    if "phi" not in ck.tensors:
        raise CompatibilityError("checkpoint carries no LDA topics")
    return lda_mod.LdaModel.from_phi(ck.tensors["phi"].astype(float), float(ck.metadata["alpha"]),
                                     float(ck.metadata["beta"]))


def model_to_checkpoint(model: JointModel, config: TrainConfig, vocab: Sequence[str], **extra) -> Checkpoint:
    meta = {"kind": model.kind.value, "K": str(model.K), "H": str(model.H), "V": str(len(vocab))}
    for key, value in asdict(config).items():
        if key in ("K", "H"):
            continue
        meta[key] = ",".join(value) if isinstance(value, tuple) else _fmt(value)
    meta.update({k: _fmt(v) for k, v in extra.items()})
    meta["vocab"] = " ".join(vocab)
    return Checkpoint(meta, dict(model.params))


def model_from_checkpoint(ck: Checkpoint) -> JointModel:
    meta = ck.metadata
    try:
        kind = ModelKind(meta["kind"])
        K, H = int(meta["K"]), int(meta["H"])
    except (KeyError, ValueError) as exc:
        raise CompatibilityError(f"not an LSTM checkpoint: {exc}") from exc
    params = {k: v.astype(float) for k, v in ck.tensors.items() if k != "phi"}
    width = K if kind is ModelKind.LSTM_LDA else int(meta["V"])
    return JointModel(kind, params, width, K, H)


def svm_to_checkpoint(run: SvmRun, ck: Checkpoint) -> Checkpoint:
    ck.metadata["svm.horizon"] = str(len(run.baseline.models))
    for t, m in enumerate(run.baseline.models, start=1):
        if m is None:
            continue
        ck.tensors[f"svm.t{t}.w"] = m.w
        ck.tensors[f"svm.t{t}.b"] = np.array(m.b)
        ck.metadata[f"svm.t{t}.C"] = repr(m.C)
        ck.metadata[f"svm.t{t}.pos_weight"] = repr(m.pos_weight)
    return ck


def svm_from_checkpoint(ck: Checkpoint) -> SvmBaseline:
    horizon = int(ck.metadata["svm.horizon"])
    models: list[SvmModel | None] = []
    for t in range(1, horizon + 1):
        if f"svm.t{t}.w" not in ck.tensors:
            models.append(None)
            continue
        models.append(SvmModel(ck.tensors[f"svm.t{t}.w"].astype(float), float(ck.tensors[f"svm.t{t}.b"]),
                               float(ck.metadata[f"svm.t{t}.C"]), float(ck.metadata[f"svm.t{t}.pos_weight"])))
    return SvmBaseline(models)


def svm_metrics_rows(run: SvmRun, corpus: Corpus, lda: lda_mod.LdaModel, task: str, seed: int):
    """(t, mean training objective per example, validation AUC) per time point."""
    ids = training_ids(corpus, task, seed)
    thetas = lda_inputs(lda, corpus, ids, seed)
    y = np.where(corpus.task_labels(ids, task), 1.0, -1.0)
    rows = []
    for t, (model, val_auc, _) in enumerate(run.details, start=1):
        obj = None
        if model is not None:
            idx, X = time_point_sets(thetas, t)[-1]
            obj = objective(model.w, model.b, X, y[idx], model.C, model.pos_weight) / len(idx)
        rows.append((t, obj, val_auc))
    return rows
