"""Note ingestion, text normalization, 12-hour bucketing, vocabulary and splits."""

from __future__ import annotations

import csv
import math
import re
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

HOURS_12 = 12 * 3600.0
DAY = 24 * 3600.0
TASKS = ("hospital", "30d", "1y")
DEFAULT_VOCAB_CAP = 500
MIN_AGE = 18.0
MIN_TRAIN_TOKENS = 100
MAX_NEGATIVE_FRACTION = 0.70

NOTES_HEADER = ["patient_id", "chart_time", "category", "text"]
META_HEADER = ["patient_id", "dob", "admit_time", "discharge_time", "death_time", "in_hospital_death"]


class CorpusFormatError(ValueError):
    """Malformed input file."""


# ----------------------------------------------------------------- types


@dataclass(frozen=True)
class RawNote:
    patient_id: str
    chart_time: float
    category: str
    text: str

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if not math.isfinite(self.chart_time):
            raise ValueError("chart_time must be finite")


@dataclass(frozen=True)
class PatientMeta:
    patient_id: str
    age_at_admission: float
    admit_time: float
    discharge_time: float
    death_time: float | None = None
    in_hospital_death: bool = False

    def __post_init__(self):
        if self.discharge_time < self.admit_time:
            raise ValueError(f"{self.patient_id}: discharge before admission")
        if self.in_hospital_death and (self.death_time is None or self.death_time > self.discharge_time):
            raise ValueError(f"{self.patient_id}: in-hospital death needs death_time <= discharge_time")


@dataclass(frozen=True)
class Labels:
    in_hospital: bool
    post_30d: bool
    post_1y: bool

    def for_task(self, task: str) -> bool:
        try:
            return {"hospital": self.in_hospital, "30d": self.post_30d, "1y": self.post_1y}[task]
        except KeyError:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}") from None

    def as_field(self) -> str:
        return ",".join("1" if v else "0" for v in (self.in_hospital, self.post_30d, self.post_1y))

    @classmethod
    def from_field(cls, text: str) -> "Labels":
        parts = text.split(",")
        if len(parts) != 3 or any(p not in ("0", "1") for p in parts):
            raise CorpusFormatError(f"bad label field {text!r}")
        return cls(*(p == "1" for p in parts))


@dataclass
class Vocab:
    id_to_word: list[str]
    word_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_word)

    @property
    def size(self) -> int:
        return len(self.id_to_word)


@dataclass
class BowSequence:
    """One patient's per-time-point bag-of-words counts.

    ``counts[t - 1]`` holds time point t; an empty dict is a missing time
    point.  Keys are tokens before vocabulary restriction, word ids after.
    """

    patient_id: str
    counts: list[dict]

    def __post_init__(self):
        if len(self.counts) < 1:
            raise ValueError("a sequence has at least one time point")

    @property
    def length(self) -> int:
        return len(self.counts)

    @property
    def vectors(self) -> list[dict]:
        return [bow_normalize(c) for c in self.counts]

    def n_tokens(self) -> int:
        return int(sum(sum(c.values()) for c in self.counts))

    def dense(self, V: int) -> np.ndarray:
        """(T, V) array of normalized weights; empty rows stay zero."""
        out = np.zeros((self.length, V))
        for t, vec in enumerate(self.vectors):
            for w, x in vec.items():
                out[t, w] = x
        return out


@dataclass
class Patient:
    meta: PatientMeta
    labels: Labels
    sequence: BowSequence
    n_tokens: int

    @property
    def patient_id(self) -> str:
        return self.meta.patient_id


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset
    validation: frozenset
    test: frozenset
    removed: frozenset = frozenset()

    def __post_init__(self):
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise ValueError("splits overlap")

    def role_of(self, pid: str) -> str | None:
        for name, ids in (("train", self.train), ("validation", self.validation), ("test", self.test)):
            if pid in ids:
                return name
        return None


# ------------------------------------------------------------------ text


@lru_cache(maxsize=8)
def load_stopwords(path: str | None = None) -> frozenset:
    if path is None:
        text = resources.files("cliniseq").joinpath("data/stopwords_onix.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


_DEID = re.compile(r"\[\*\*(.*?)\*\*\]", re.S)
_TIME = re.compile(r"(?<!\d)\d{1,2}:\d{2}(?:\s*[ap]\.?m\.?\b)?", re.I)
_DIGITS = re.compile(r"\d+")
_TOKEN = re.compile(r"[a-z0-9#]+")


def _deid_category(m: re.Match) -> str:
    return "##" + re.sub(r"[^a-z]", "", m.group(1).lower()) + "##"


def normalize_text(text: str, stopwords: Iterable[str] | None = None) -> list[str]:
    """Rewrite de-id spans, times and numbers, lowercase, tokenize, drop stop words."""
    if not text:
        return []
    stop = load_stopwords() if stopwords is None else stopwords
    text = _DEID.sub(_deid_category, text)
    text = _TIME.sub(" ##time## ", text)
    text = _DIGITS.sub("#", text)
    return [tok for tok in _TOKEN.findall(text.lower()) if tok not in stop]


# ------------------------------------------------------------- sequences


def segment_time_points(
    notes: Sequence[RawNote],
    meta: PatientMeta,
    tokenize: Callable[[str], list[str]] | None = None,
) -> BowSequence:
    """Bucket note tokens into 12-hour time points counted from admission."""
    tokenize = tokenize or normalize_text
    T = max(1, math.ceil((meta.discharge_time - meta.admit_time) / HOURS_12))
    buckets: list[Counter] = [Counter() for _ in range(T)]
    kept = 0
    for note in notes:
        if note.patient_id != meta.patient_id:
            raise ValueError(f"note for {note.patient_id} passed with {meta.patient_id}")
        if note.chart_time > meta.discharge_time:
            continue
        t = max(1, math.floor((note.chart_time - meta.admit_time) / HOURS_12) + 1)
        # a note stamped exactly at discharge on a 12h boundary belongs to the last point
        t = min(t, T)
        buckets[t - 1].update(tokenize(note.text))
        kept += 1
    if kept == 0:
        raise ValueError(f"patient {meta.patient_id} has no notes within the stay")
    return BowSequence(meta.patient_id, [dict(b) for b in buckets])


def bow_normalize(counts: Mapping) -> dict:
    total = sum(counts.values())
    if not counts or total == 0:
        return {}
    return {k: v / total for k, v in counts.items()}


def build_vocab(train_patients: Sequence[tuple[str, Mapping[str, int]]], cap: int = DEFAULT_VOCAB_CAP) -> Vocab:
    """Union of each training patient's top-``cap`` words by tf-idf."""
    if not train_patients:
        raise ValueError("build_vocab needs at least one training patient")
    N = len(train_patients)
    df: Counter = Counter()
    for _, counts in train_patients:
        df.update(w for w, c in counts.items() if c > 0)
    keep: set[str] = set()
    for _, counts in train_patients:
        scored = [(-(c * math.log(N / df[w])), w) for w, c in counts.items() if c > 0]
        scored.sort()
        keep.update(w for _, w in scored[:cap])
    return Vocab(sorted(keep))


def restrict_to_vocab(seq: BowSequence, vocab: Vocab) -> BowSequence:
    ids = vocab.word_to_id
    counts = []
    for bucket in seq.counts:
        mapped = {ids[w]: c for w, c in bucket.items() if w in ids}
        counts.append(dict(sorted(mapped.items())))
    return BowSequence(seq.patient_id, counts)


# --------------------------------------------------------------- cohorts


def compute_labels(meta: PatientMeta) -> Labels:
    d = meta.death_time
    return Labels(
        in_hospital=bool(meta.in_hospital_death),
        post_30d=d is not None and d <= meta.discharge_time + 30 * DAY,
        post_1y=d is not None and d <= meta.discharge_time + 365 * DAY,
    )


def filter_patients(patients: Iterable[Patient], training: bool = False,
                    min_age: float = MIN_AGE, min_tokens: int = MIN_TRAIN_TOKENS) -> list[Patient]:
    """Adults only; the note-length floor is applied to training candidates only."""
    out = []
    for p in patients:
        if p.meta.age_at_admission < min_age:
            continue
        if training and p.n_tokens < min_tokens:
            continue
        out.append(p)
    return out


def negatives_to_remove(n_total: int, n_neg: int, max_fraction: float = MAX_NEGATIVE_FRACTION) -> int:
    """Smallest k with (n_neg - k) / (n_total - k) <= max_fraction."""
    k = 0
    while k < n_neg and (n_neg - k) > max_fraction * (n_total - k) + 1e-12:
        k += 1
    return k


def downsample(train_ids: Sequence[str], label_of: Mapping[str, bool], rng: np.random.Generator,
               max_fraction: float = MAX_NEGATIVE_FRACTION) -> tuple[list[str], list[str]]:
    """Remove uniformly chosen negatives until they are at most ``max_fraction`` of the set."""
    ids = list(train_ids)
    negs = [p for p in ids if not label_of[p]]
    k = negatives_to_remove(len(ids), len(negs), max_fraction)
    if k == 0:
        return ids, []
    drop = {negs[j] for j in rng.choice(len(negs), size=k, replace=False)}
    return [p for p in ids if p not in drop], sorted(drop)


def split_and_downsample(patients: Sequence[Patient], seed: int, task: str | None = None,
                         min_train_tokens: int = MIN_TRAIN_TOKENS) -> DatasetSplit:
    """6:2:2 shuffle split, train note-length floor, then optional train downsampling for ``task``."""
    if len(patients) < 5:
        raise ValueError("need at least 5 patients to split")
    rng = np.random.default_rng(seed)
    by_id = {p.patient_id: p for p in patients}
    ids = sorted(by_id)
    order = [ids[j] for j in rng.permutation(len(ids))]
    n = len(order)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    train = order[:n_train]
    val = order[n_train:n_train + n_val]
    test = order[n_train + n_val:]
    kept = {p.patient_id for p in filter_patients((by_id[i] for i in train), training=True,
                                                   min_age=-math.inf, min_tokens=min_train_tokens)}
    train = [i for i in train if i in kept]
    removed: list[str] = []
    if task is not None:
        train, removed = downsample(train, {i: by_id[i].labels.for_task(task) for i in train}, rng)
    return DatasetSplit(frozenset(train), frozenset(val), frozenset(test), frozenset(removed))


# ------------------------------------------------------------------- I/O


def parse_time(text: str) -> float:
    text = text.strip()
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise CorpusFormatError(f"bad timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_time(seconds: float) -> str:
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc).replace(tzinfo=None)
    return dt.isoformat(timespec="seconds")


def age_at(dob: str, admit_time: float) -> float:
    """Age in years (365.25-day years) at admission; ``dob`` may be a date or a timestamp."""
    dob = dob.strip()
    try:
        born = date.fromisoformat(dob)
        start = datetime(born.year, born.month, born.day, tzinfo=timezone.utc).timestamp()
    except ValueError:
        start = parse_time(dob)
    return (admit_time - start) / (365.25 * DAY)


def _check_header(reader, expected: list[str], path) -> None:
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
        raise CorpusFormatError(f"{path}: expected header {','.join(expected)}, got {reader.fieldnames}")


def read_notes_csv(path) -> list[RawNote]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        _check_header(reader, NOTES_HEADER, path)
        notes = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise CorpusFormatError(f"{path}:{lineno}: wrong number of fields")
            try:
                notes.append(RawNote(row["patient_id"], parse_time(row["chart_time"]), row["category"], row["text"]))
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return notes


def read_meta_csv(path) -> list[PatientMeta]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        _check_header(reader, META_HEADER, path)
        metas = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise CorpusFormatError(f"{path}:{lineno}: wrong number of fields")
            try:
                admit = parse_time(row["admit_time"])
                death = row["death_time"].strip()
                flag = row["in_hospital_death"].strip().lower()
                if flag not in ("0", "1", "true", "false"):
                    raise ValueError(f"bad in_hospital_death {flag!r}")
                metas.append(PatientMeta(
                    patient_id=row["patient_id"],
                    age_at_admission=age_at(row["dob"], admit),
                    admit_time=admit,
                    discharge_time=parse_time(row["discharge_time"]),
                    death_time=parse_time(death) if death else None,
                    in_hospital_death=flag in ("1", "true"),
                ))
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return metas


def write_notes_csv(path, notes: Iterable[RawNote]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NOTES_HEADER)
        for n in notes:
            w.writerow([n.patient_id, format_time(n.chart_time), n.category, n.text])


def write_meta_csv(path, rows: Iterable[tuple[str, str, float, float, float | None, bool]]) -> None:
    """Rows are (patient_id, dob, admit, discharge, death or None, in_hospital_death)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_HEADER)
        for pid, dob, admit, disch, death, ihd in rows:
            w.writerow([pid, dob, format_time(admit), format_time(disch),
                        "" if death is None else format_time(death), "1" if ihd else "0"])


def is_discharge_summary(category: str) -> bool:
    return re.sub(r"[^a-z]", "", category.lower()) == "dischargesummary"


def write_vocab(path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, w in enumerate(vocab.id_to_word):
            fh.write(f"{i}\t{w}\n")


def read_vocab(path) -> Vocab:
    words = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or parts[0] != str(len(words)):
                raise CorpusFormatError(f"{path}:{lineno}: expected '{len(words)}<TAB>word'")
            words.append(parts[1])
    return Vocab(words)


def _format_bow(bow: Mapping[int, float], integer: bool) -> str:
    if integer:
        return " ".join(f"{w}:{int(c)}" for w, c in sorted(bow.items()))
    return " ".join(f"{w}:{float(x)!r}" for w, x in sorted(bow.items()))


def _parse_bow(text: str, integer: bool) -> dict:
    out = {}
    for item in text.split():
        w, _, x = item.partition(":")
        try:
            out[int(w)] = int(x) if integer else float(x)
        except ValueError as exc:
            raise CorpusFormatError(f"bad bag-of-words item {item!r}") from exc
    return out


def write_sequences(path, sequences: Iterable[BowSequence], labels: Mapping[str, Labels], counts: bool = False) -> None:
    """corpus.tsv layout; ``counts=True`` writes integer counts instead of weights."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            lab = labels[seq.patient_id].as_field()
            rows = seq.counts if counts else seq.vectors
            for t, bow in enumerate(rows, start=1):
                fh.write(f"{seq.patient_id}\t{t}\t{lab}\t{_format_bow(bow, counts)}\n")


def read_sequences(path, counts: bool = False) -> tuple[dict[str, BowSequence], dict[str, Labels]]:
    rows: dict[str, list] = defaultdict(list)
    labels: dict[str, Labels] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise CorpusFormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            pid, t, lab, bow = parts
            if not t.isdigit() or int(t) != len(rows[pid]) + 1:
                raise CorpusFormatError(f"{path}:{lineno}: time points for {pid} out of order")
            labels[pid] = Labels.from_field(lab)
            rows[pid].append(_parse_bow(bow, counts))
    return {pid: BowSequence(pid, r) for pid, r in rows.items()}, labels


# -------------------------------------------------------------- pipeline


@dataclass
class Corpus:
    vocab: Vocab
    sequences: dict[str, BowSequence]  # word-id counts
    labels: dict[str, Labels]
    split: DatasetSplit

    def ids(self, role: str) -> list[str]:
        ids = {"train": self.split.train, "validation": self.split.validation, "test": self.split.test}[role]
        return sorted(ids)

    def task_labels(self, ids: Sequence[str], task: str) -> np.ndarray:
        return np.array([self.labels[i].for_task(task) for i in ids], dtype=bool)


def build_patients(notes: Sequence[RawNote], metas: Sequence[PatientMeta],
                   stopwords: Iterable[str] | None = None) -> list[Patient]:
    """Tokenize and bucket notes for every patient with metadata and usable notes."""
    stop = load_stopwords() if stopwords is None else frozenset(stopwords)
    by_patient: dict[str, list[RawNote]] = defaultdict(list)
    for n in notes:
        if not is_discharge_summary(n.category):
            by_patient[n.patient_id].append(n)
    patients = []
    for meta in sorted(metas, key=lambda m: m.patient_id):
        pn = by_patient.get(meta.patient_id)
        if not pn:
            continue
        try:
            seq = segment_time_points(pn, meta, lambda s: normalize_text(s, stop))
        except ValueError:
            continue
        patients.append(Patient(meta, compute_labels(meta), seq, seq.n_tokens()))
    return patients


def build_corpus(patients: Sequence[Patient], seed: int, vocab_cap: int = DEFAULT_VOCAB_CAP,
                 split: DatasetSplit | None = None, min_train_tokens: int = MIN_TRAIN_TOKENS) -> Corpus:
    """Age filter, split, train-only vocabulary, and id-keyed sequences."""
    adults = filter_patients(patients)
    if split is None:
        split = split_and_downsample(adults, seed, task=None, min_train_tokens=min_train_tokens)
    by_id = {p.patient_id: p for p in adults}
    train = [by_id[i] for i in sorted(split.train)]
    vocab = build_vocab([(p.patient_id, _total_counts(p.sequence)) for p in train], cap=vocab_cap)
    keep = split.train | split.validation | split.test
    sequences = {i: restrict_to_vocab(by_id[i].sequence, vocab) for i in sorted(keep)}
    labels = {i: by_id[i].labels for i in sorted(keep)}
    return Corpus(vocab, sequences, labels, split)


def _total_counts(seq: BowSequence) -> Counter:
    total: Counter = Counter()
    for c in seq.counts:
        total.update(c)
    return total


def corpus_stats(sequences: Iterable[BowSequence], vocab_size: int) -> dict[str, float]:
    seqs = list(sequences)
    seq_lens = [s.length for s in seqs]
    doc_lens = [sum(c.values()) for s in seqs for c in s.counts if c]
    return {
        "# patients": len(seqs),
        "# unique words": vocab_size,
        "Seq. len (median)": statistics.median(seq_lens) if seq_lens else 0,
        "Seq. len (max)": max(seq_lens, default=0),
        "Doc. len (median)": statistics.median(doc_lens) if doc_lens else 0,
        "Doc. len (max)": max(doc_lens, default=0),
    }


def write_corpus_dir(outdir, corpus: Corpus) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    seqs = [corpus.sequences[i] for i in sorted(corpus.sequences)]
    write_vocab(out / "vocab.tsv", corpus.vocab)
    write_sequences(out / "corpus.tsv", seqs, corpus.labels)
    write_sequences(out / "counts.tsv", seqs, corpus.labels, counts=True)
    with open(out / "splits.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for pid in sorted(corpus.sequences):
            fh.write(f"{pid}\t{corpus.split.role_of(pid)}\n")
    with open(out / "stats.txt", "w", encoding="utf-8", newline="\n") as fh:
        for key, value in corpus_stats(seqs, len(corpus.vocab)).items():
            fh.write(f"{key}\t{value:g}\n")


def read_corpus_dir(indir) -> Corpus:
    d = Path(indir)
    for name in ("vocab.tsv", "counts.tsv", "splits.tsv"):
        if not (d / name).exists():
            raise CorpusFormatError(f"{d / name} not found; run preprocess first")
    vocab = read_vocab(d / "vocab.tsv")
    sequences, labels = read_sequences(d / "counts.tsv", counts=True)
    roles: dict[str, set] = {"train": set(), "validation": set(), "test": set()}
    with open(d / "splits.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or parts[1] not in roles:
                raise CorpusFormatError(f"{d / 'splits.tsv'}:{lineno}: bad row")
            roles[parts[1]].add(parts[0])
    for seq in sequences.values():
        for bow in seq.counts:
            if any(w >= len(vocab) or w < 0 for w in bow):
                raise CorpusFormatError(f"word id out of range for vocabulary of size {len(vocab)}")
    split = DatasetSplit(frozenset(roles["train"]), frozenset(roles["validation"]), frozenset(roles["test"]))
    return Corpus(vocab, sequences, labels, split)
