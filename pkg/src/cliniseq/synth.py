"""Synthetic note corpora with planted topics and a planted mortality signal."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .corpus import HOURS_12, PatientMeta, RawNote, age_at, load_stopwords, write_meta_csv, write_notes_csv

BASE_TIME = datetime(2100, 1, 1, tzinfo=timezone.utc).timestamp()
CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


@dataclass
class SynthConfig:
    n_patients: int = 500
    vocab_size: int = 200
    n_topics: int = 8
    n_risk_topics: int = 2
    mean_seq_len: float = 10.0
    doc_len: int = 50
    empty_rate: float = 0.2
    risk_strength: float = 6.0
    seed: int = 0
    positive_rate: float = 0.25
    concentration: float = 0.1  # symmetric Dirichlet for each patient's starting mixture
    drift: float = 0.3  # std of the log-space random walk per time point

    def validate(self) -> None:
        if min(self.n_patients, self.vocab_size, self.n_topics, self.doc_len) < 1:
            raise ValueError("counts must be positive")
        if not 0 <= self.n_risk_topics < self.n_topics:
            raise ValueError("n_risk_topics must be in [0, n_topics)")
        if self.vocab_size % self.n_topics:
            raise ValueError("vocab_size must be a multiple of n_topics (disjoint equal blocks)")
        if not 0.0 <= self.empty_rate <= 1.0:
            raise ValueError("empty_rate must lie in [0, 1]")
        if self.mean_seq_len < 1 or not 0 < self.positive_rate < 1:
            raise ValueError("mean_seq_len >= 1 and 0 < positive_rate < 1 required")
        if self.concentration <= 0 or self.drift < 0 or self.risk_strength < 0:
            raise ValueError("concentration > 0, drift >= 0, risk_strength >= 0 required")


@dataclass
class SynthTruth:
    words: list[str]
    phi_star: np.ndarray  # (K*, V*)
    risk: np.ndarray  # (K*,)
    mixtures: list[np.ndarray] = field(default_factory=list)  # per patient (T, K*)
    late_risk: np.ndarray = field(default_factory=lambda: np.zeros(0))
    offset: float = 0.0

    def block(self, k: int) -> list[str]:
        return [self.words[w] for w in np.flatnonzero(self.phi_star[k] > 0)]

    def top_words(self, k: int, n: int = 10) -> list[str]:
        order = np.argsort(-self.phi_star[k], kind="stable")[:n]
        return [self.words[w] for w in order]


@dataclass
class SynthCorpus:
    config: SynthConfig
    patient_ids: list[str]
    notes: list[RawNote]
    metas: list[PatientMeta]
    dobs: list[str]
    labels: np.ndarray
    truth: SynthTruth


def pseudo_words(n: int) -> list[str]:
    """``n`` distinct three-syllable letter-only words that are not stop words."""
    stop = load_stopwords()
    syll = [c + v for c in CONSONANTS for v in VOWELS]
    out = []
    i = 0
    while len(out) < n:
        a, rest = divmod(i, len(syll) ** 2)
        b, c = divmod(rest, len(syll))
        word = syll[a % len(syll)] + syll[b] + syll[c]
        if word not in stop:
            out.append(word)
        i += 1
    return out


def planted_topics(n_topics: int, vocab_size: int) -> np.ndarray:
    """Disjoint equal word blocks with 1/(rank+1) weights inside each block."""
    size = vocab_size // n_topics
    within = 1.0 / np.arange(1, size + 1)
    within /= within.sum()
    phi = np.zeros((n_topics, vocab_size))
    for k in range(n_topics):
        phi[k, k * size:(k + 1) * size] = within
    return phi


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gen_corpus(config: SynthConfig) -> SynthCorpus:
    config.validate()
    rng = np.random.default_rng(config.seed)
    K, V = config.n_topics, config.vocab_size
    words = pseudo_words(V)
    phi = planted_topics(K, V)
    cum = np.cumsum(phi, axis=1)
    risk = np.zeros(K)
    risk[: config.n_risk_topics] = config.risk_strength
    width = len(str(config.n_patients))
    ids = [f"P{i:0{width}d}" for i in range(1, config.n_patients + 1)]

    notes: list[RawNote] = []
    metas: list[PatientMeta] = []
    dobs: list[str] = []
    mixtures: list[np.ndarray] = []
    late = np.zeros(config.n_patients)
    stays = []
    for n, pid in enumerate(ids):
        T = max(2, int(rng.geometric(1.0 / config.mean_seq_len)))
        logm = np.log(np.maximum(rng.dirichlet(np.full(K, config.concentration)), 1e-300))
        mix = np.zeros((T, K))
        for t in range(T):
            if t:
                logm = logm + rng.normal(0.0, config.drift, K)
            e = np.exp(logm - logm.max())
            mix[t] = e / e.sum()
        mixtures.append(mix)
        late[n] = float(risk @ mix[T // 2:].mean(axis=0))
        empty = rng.random(T) < config.empty_rate
        if empty.all():
            empty[-1] = False
        admit = BASE_TIME + n * 86400 + int(rng.integers(0, 86400))
        for t in range(T):
            if empty[t]:
                continue
            topics = rng.choice(K, size=config.doc_len, p=mix[t])
            u = rng.random(config.doc_len)
            ids_t = np.minimum((cum[topics] <= u[:, None]).sum(axis=1), V - 1)
            chart = admit + t * HOURS_12 + int(rng.integers(0, int(HOURS_12)))
            notes.append(RawNote(pid, float(chart), "nursing", " ".join(words[w] for w in ids_t)))
        age_years = float(rng.uniform(25, 85))
        dob_day = datetime.fromtimestamp(admit, tz=timezone.utc) - timedelta(days=age_years * 365.25)
        dob = dob_day.date().isoformat()
        dobs.append(dob)
        stays.append((pid, dob, float(admit), float(admit + T * HOURS_12)))

    if config.risk_strength > 0:
        offset = brentq(lambda o: _sigmoid(late - o).mean() - config.positive_rate, -100, 100)
    else:
        offset = -float(np.log(config.positive_rate / (1 - config.positive_rate)))
    labels = rng.random(config.n_patients) < _sigmoid(late - offset)

    for (pid, dob, admit, disch), y in zip(stays, labels):
        metas.append(PatientMeta(pid, age_at(dob, admit), admit, disch,
                                 death_time=disch if y else None, in_hospital_death=bool(y)))
    truth = SynthTruth(words, phi, risk, mixtures, late, float(offset))
    return SynthCorpus(config, ids, notes, metas, dobs, labels, truth)


def write_synth(outdir, corpus: SynthCorpus) -> None:
    """notes.csv and meta.csv in the ingestion format, truth.clnt with phi_star and risk."""
    from .checkpoint import Checkpoint, save_checkpoint

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_notes_csv(out / "notes.csv", corpus.notes)
    write_meta_csv(out / "meta.csv", [
        (m.patient_id, dob, m.admit_time, m.discharge_time, m.death_time, m.in_hospital_death)
        for m, dob in zip(corpus.metas, corpus.dobs)
    ])
    ck = Checkpoint(
        metadata={"kind": "synth_truth", "K": str(corpus.config.n_topics), "V": str(corpus.config.vocab_size),
                  "offset": repr(corpus.truth.offset), "vocab": " ".join(corpus.truth.words)},
        tensors={"phi_star": corpus.truth.phi_star, "risk": corpus.truth.risk},
    )
    save_checkpoint(out / "truth.clnt", ck)
