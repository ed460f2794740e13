import csv
import statistics
from collections import defaultdict

import numpy as np
import pytest

import oracles
from cliniseq import cli, models, parallel
from cliniseq import pipeline as pl
from cliniseq.checkpoint import load_checkpoint
from cliniseq.corpus import RawNote, read_corpus_dir, write_meta_csv, write_notes_csv

SYNTH = ["--n-patients", "200", "--vocab-size", "100", "--n-topics", "4", "--n-risk-topics", "1",
         "--mean-seq-len", "4", "--doc-len", "40", "--seed", "1"]
SMALL = ["--K", "4", "--H", "5", "--steps", "20", "--log-every", "5", "--val-every", "10", "--lr", "0.01"]
LDA = ["--K", "4", "--lda-iterations", "150"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def ok(*argv):
    code = run(*argv)
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    ok("synth", "--out", d / "raw", *SYNTH)
    ok("preprocess", d / "raw/notes.csv", d / "raw/meta.csv", "--out", d / "corpus")
    ok("train", "--model", "lda", "--corpus", d / "corpus", "--out", d / "lda", *LDA)
    return d


def metadata(path):
    return load_checkpoint(path).metadata


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------ determinism


def test_synth_and_preprocess_are_deterministic(ws, tmp_path):
    ok("synth", "--out", tmp_path / "raw", *SYNTH)
    for name in ("notes.csv", "meta.csv", "truth.clnt"):
        assert (tmp_path / "raw" / name).read_bytes() == (ws / "raw" / name).read_bytes()
    ok("preprocess", ws / "raw/notes.csv", ws / "raw/meta.csv", "--out", tmp_path / "corpus")
    for name in ("corpus.tsv", "counts.tsv", "vocab.tsv", "splits.tsv", "stats.txt"):
        assert (tmp_path / "corpus" / name).read_bytes() == (ws / "corpus" / name).read_bytes()


@pytest.mark.parametrize("model, extra", [
    ("lda", LDA),
    ("svm_lda", ["--svm-epochs", "5", "--svm-c", "0.25,4", "--svm-pos-weight", "1,3"]),
    ("lstm_lda", SMALL),
    ("lstm_e", SMALL),
    ("lstm_ed", SMALL),
    ("lstm_etd", SMALL + ["--lambda2", "0.1"]),
])
def test_train_eval_latents_are_deterministic(ws, tmp_path, model, extra):
    lda = [] if model in ("lda",) else (["--lda", ws / "lda/model.clnt"] if model != "lstm_e" else [])
    outs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        ok("train", "--model", model, "--corpus", ws / "corpus", "--out", d, *lda, *extra)
        if model != "lda":
            ok("eval", "--checkpoint", d / "model.clnt", "--corpus", ws / "corpus", "--out", d / "auc.csv")
        ok("latents", "--checkpoint", d / "model.clnt", "--corpus", ws / "corpus", "--out", d / "latents.tsv")
        outs.append(d)
    for f in outs[0].iterdir():
        assert f.read_bytes() == (outs[1] / f.name).read_bytes(), f.name
    rows = read_csv(outs[0] / "metrics.csv")
    assert rows[0] == ["step", "train_loss", "val_auc"] and len(rows) > 1
    if model != "lda":
        auc_rows = read_csv(outs[0] / "auc.csv")
        assert auc_rows[0] == ["task", "model", "t", "n_pos", "n_neg", "auc"]
        assert all(r[0] == "hospital" and r[1] == model for r in auc_rows[1:])


def test_topics_and_knn_are_deterministic(ws, tmp_path, capsys):
    for rep in ("a", "b"):
        ok("topics", "--checkpoint", ws / "lda/model.clnt", "--source", "lda", "--out", tmp_path / f"{rep}.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    ok("latents", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--out", tmp_path / "z.tsv")
    capsys.readouterr()
    ok("knn", tmp_path / "z.tsv", "--gold", "patient", "--k", "3")
    ok("knn", tmp_path / "z.tsv", "--gold", "patient", "--k", "3")
    first, second = capsys.readouterr().out.splitlines()
    assert first == second and 0.0 <= float(first) <= 1.0


def test_thread_count_does_not_change_outputs(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("CLINISEQ_THREADS", "1")
    ok("latents", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--out", tmp_path / "one.tsv")
    monkeypatch.setenv("CLINISEQ_THREADS", "3")
    ok("latents", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--out", tmp_path / "three.tsv")
    assert (tmp_path / "one.tsv").read_bytes() == (tmp_path / "three.tsv").read_bytes()


def test_worker_count(monkeypatch):
    monkeypatch.setenv("CLINISEQ_THREADS", "5")
    assert parallel.worker_count() == 5
    monkeypatch.delenv("CLINISEQ_THREADS")
    assert parallel.worker_count() >= 1
    for bad in ("0", "two"):
        monkeypatch.setenv("CLINISEQ_THREADS", bad)
        with pytest.raises(ValueError):
            parallel.worker_count()


# ------------------------------------------------------------- preprocess


def test_stats_match_independent_recount(ws):
    d = ws / "corpus"
    seq_len, doc_len = defaultdict(int), []
    with open(d / "counts.tsv") as fh:
        for line in fh:
            pid, t, _, bow = line.rstrip("\n").split("\t")
            seq_len[pid] += 1
            if bow:
                doc_len.append(sum(int(item.split(":")[1]) for item in bow.split()))
    with open(d / "corpus.tsv") as fh:
        assert sorted({line.split("\t")[0] for line in fh}) == sorted(seq_len)
    n_words = sum(1 for _ in open(d / "vocab.tsv"))
    stats = dict(line.rstrip("\n").split("\t") for line in open(d / "stats.txt"))
    assert float(stats["# patients"]) == len(seq_len)
    assert float(stats["# unique words"]) == n_words
    assert float(stats["Seq. len (median)"]) == statistics.median(seq_len.values())
    assert float(stats["Seq. len (max)"]) == max(seq_len.values())
    assert float(stats["Doc. len (median)"]) == statistics.median(doc_len)
    assert float(stats["Doc. len (max)"]) == max(doc_len)


def test_splits_file(ws):
    roles = [line.rstrip("\n").split("\t") for line in open(ws / "corpus/splits.tsv")]
    counts = {r: sum(1 for _, x in roles if x == r) for r in ("train", "validation", "test")}
    assert [pid for pid, _ in roles] == sorted(pid for pid, _ in roles)
    assert counts["train"] > counts["validation"] > 0 and counts["test"] > 0


def test_empty_notes_exit_2(ws, tmp_path, capsys):
    write_notes_csv(tmp_path / "notes.csv", [])
    assert run("preprocess", tmp_path / "notes.csv", ws / "raw/meta.csv", "--out", tmp_path / "c") == 2
    assert "no patients" in capsys.readouterr().err


def test_malformed_csv_exit_2(ws, tmp_path):
    (tmp_path / "notes.csv").write_text("pid,when\nP1,2\n")
    assert run("preprocess", tmp_path / "notes.csv", ws / "raw/meta.csv", "--out", tmp_path / "c") == 2
    assert run("train", "--model", "lstm_e", "--corpus", tmp_path / "missing", "--out", tmp_path / "m") == 2
    assert run("eval", "--checkpoint", tmp_path / "none.clnt", "--corpus", ws / "corpus", "--out", tmp_path / "a") == 2


def test_bad_flags_exit_2(ws, tmp_path):
    assert run("train", "--model", "nope", "--corpus", ws / "corpus", "--out", tmp_path) == 2
    assert run("train", "--model", "lstm_e", "--corpus", ws / "corpus", "--out", tmp_path, "--cfn", "0.5") == 2
    assert run("synth", "--out", tmp_path / "s", "--n-topics", "3", "--vocab-size", "100") == 2
    assert run() == 2


# ------------------------------------------------------------------ train


def test_lstm_e_defaults_recorded(ws, tmp_path):
    ok("train", "--model", "lstm_e", "--corpus", ws / "corpus", "--out", tmp_path, "--steps", "0")
    meta = metadata(tmp_path / "model.clnt")
    assert (meta["K"], meta["H"], meta["lr"], meta["batch_size"]) == ("50", "128", "0.001", "10")
    assert (meta["lambda1"], meta["lambda2"], meta["lambda3"]) == ("0.01", "0.0", "1.0")
    assert meta["kind"] == "lstm_e" and meta["cfn"] == "1.0" and meta["task"] == "hospital"


@pytest.mark.parametrize("kind", ["lstm_e", "lstm_etd"])
def test_zero_steps_checkpoint_is_initialization(ws, tmp_path, kind):
    ok("train", "--model", kind, "--corpus", ws / "corpus", "--out", tmp_path, "--steps", "0",
       "--K", "6", "--H", "7", "--seed", "4")
    ck = load_checkpoint(tmp_path / "model.clnt")
    V = int(ck.metadata["V"])
    init = models.init_model(kind, V, 6, 7, seed=4)
    assert set(ck.tensors) == set(init.params)
    for name, arr in init.params.items():
        np.testing.assert_array_equal(ck.tensors[name], arr.astype(np.float32))


def planted_in_vocab(ws):
    truth = load_checkpoint(ws / "raw/truth.clnt")
    words = truth.metadata["vocab"].split(" ")
    vocab = metadata(ws / "lda/model.clnt")["vocab"].split(" ")
    cols = [words.index(w) for w in vocab]
    phi_star = truth.tensors["phi_star"].astype(float)[:, cols]
    return phi_star / phi_star.sum(1, keepdims=True), vocab


def test_lda_checkpoint_recovers_planted_topics(ws):
    phi = load_checkpoint(ws / "lda/model.clnt").tensors["phi"].astype(float)
    phi_star, _ = planted_in_vocab(ws)
    cos = (phi @ phi_star.T) / np.linalg.norm(phi, axis=1)[:, None] / np.linalg.norm(phi_star, axis=1)[None]
    match = oracles.greedy_match(cos.tolist())
    assert np.mean([c for _, c in match.values()]) >= 0.8
    rows = read_csv(ws / "lda/metrics.csv")[1:]
    assert [int(r[0]) for r in rows] == list(range(7, 150, 7)) + [150]
    assert float(rows[-1][1]) < float(rows[0][1])


def test_topics_contain_planted_blocks(ws, tmp_path):
    ok("topics", "--checkpoint", ws / "lda/model.clnt", "--source", "lda", "--n", "10", "--out", tmp_path / "t.txt")
    phi_star, vocab = planted_in_vocab(ws)
    blocks = [{vocab[w] for w in np.flatnonzero(row > 0)} for row in phi_star]
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert len(lines) == 4
    for line in lines:
        label, words = line.split(": ")
        words = words.split(", ")
        assert len(words) == 10
        assert max(len(set(words) & b) for b in blocks) >= 8


def test_topics_sources(ws, tmp_path):
    ok("train", "--model", "lstm_ed", "--corpus", ws / "corpus", "--out", tmp_path / "m", *SMALL)
    for source in ("encoder", "decoder"):
        ok("topics", "--checkpoint", tmp_path / "m/model.clnt", "--source", source, "--n", "3",
           "--out", tmp_path / f"{source}.txt")
        assert len((tmp_path / f"{source}.txt").read_text().splitlines()) == 4
    assert run("topics", "--checkpoint", tmp_path / "m/model.clnt", "--source", "lda", "--out", tmp_path / "x") == 3


def test_knn_identical_latents_print_one(ws, tmp_path, capsys):
    ok("latents", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--split", "all",
       "--out", tmp_path / "z.tsv")
    capsys.readouterr()
    ok("knn", tmp_path / "z.tsv", "--gold", tmp_path / "z.tsv", "--k", "5")
    assert capsys.readouterr().out == "1.0\n"


def test_latents_rows_cover_non_empty_points(ws, tmp_path):
    ok("latents", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--out", tmp_path / "z.tsv")
    corpus = read_corpus_dir(ws / "corpus")
    want = [(pid, t) for pid in corpus.ids("test") for t, c in enumerate(corpus.sequences[pid].counts, 1) if c]
    rows = [line.rstrip("\n").split("\t") for line in open(tmp_path / "z.tsv")]
    assert [(r[0], int(r[1])) for r in rows] == want
    assert all(len(r) == 3 + 4 and abs(sum(map(float, r[3:])) - 1) < 1e-9 for r in rows)


def test_single_time_point_corpus_gives_one_auc_row(tmp_path):
    rng = np.random.default_rng(0)
    notes, meta = [], []
    for i in range(60):
        pid = f"Q{i:02d}"
        dead = i % 3 == 0
        admit = 1e9 + i * 86400
        words = ["alpha", "gamma", "delta"] if dead else ["beta", "gamma", "omega"]
        notes.append(RawNote(pid, admit + 3600, "nursing", " ".join(rng.choice(words, 30))))
        meta.append((pid, "1950-01-01", admit, admit + 6 * 3600, admit + 5 * 3600 if dead else None, dead))
    write_notes_csv(tmp_path / "notes.csv", notes)
    write_meta_csv(tmp_path / "meta.csv", meta)
    ok("preprocess", tmp_path / "notes.csv", tmp_path / "meta.csv", "--out", tmp_path / "c", "--min-train-tokens", "1")
    ok("train", "--model", "lstm_e", "--corpus", tmp_path / "c", "--out", tmp_path / "m", *SMALL)
    ok("eval", "--checkpoint", tmp_path / "m/model.clnt", "--corpus", tmp_path / "c", "--out", tmp_path / "auc.csv")
    rows = read_csv(tmp_path / "auc.csv")
    assert len(rows) == 2 and rows[1][2] == "1"


# ------------------------------------------------------------------ config


def test_config_file_values_and_flag_precedence(ws, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[train]\nmodel = lstm_e\ncorpus = {ws / 'corpus'}\nK = 4\nH = 5\nsteps = 7\n"
                   "log-every = 5\nval_every = 10\nlr = 0.01\n")
    ok("--config", cfg, "train", "--out", tmp_path / "from_cfg")
    assert metadata(tmp_path / "from_cfg/model.clnt")["steps"] == "7"
    ok("--config", cfg, "train", "--out", tmp_path / "flag", "--steps", "20")
    ok("train", "--model", "lstm_e", "--corpus", ws / "corpus", "--out", tmp_path / "direct", *SMALL)
    for name in ("model.clnt", "metrics.csv"):
        assert (tmp_path / "flag" / name).read_bytes() == (tmp_path / "direct" / name).read_bytes()


def test_config_errors_exit_2(ws, tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nmodel = lstm_e\nbogus = 1\n")
    assert run("--config", cfg, "train", "--corpus", ws / "corpus", "--out", tmp_path / "x") == 2
    cfg.write_text("[train]\nsteps = many\n")
    assert run("--config", cfg, "train", "--model", "lstm_e", "--corpus", ws / "corpus", "--out", tmp_path) == 2
    cfg.write_text("[train]\nmodel = svm\n")
    assert run("--config", cfg, "train", "--corpus", ws / "corpus", "--out", tmp_path) == 2
    assert run("--config", tmp_path / "absent.ini", "train", "--model", "lstm_e") == 2


# ------------------------------------------------------------- exit codes


def test_vocab_mismatch_exit_3(ws, tmp_path):
    ok("synth", "--out", tmp_path / "raw", "--n-patients", "60", "--vocab-size", "40", "--n-topics", "4")
    ok("preprocess", tmp_path / "raw/notes.csv", tmp_path / "raw/meta.csv", "--out", tmp_path / "small")
    ok("train", "--model", "lstm_e", "--corpus", ws / "corpus", "--out", tmp_path / "m", *SMALL)
    assert run("eval", "--checkpoint", tmp_path / "m/model.clnt", "--corpus", tmp_path / "small",
               "--out", tmp_path / "auc.csv") == 3
    assert run("latents", "--checkpoint", tmp_path / "m/model.clnt", "--corpus", tmp_path / "small",
               "--out", tmp_path / "z.tsv") == 3
    assert run("train", "--model", "svm_lda", "--corpus", tmp_path / "small", "--lda", ws / "lda/model.clnt",
               "--out", tmp_path / "s") == 3
    # an LDA checkpoint produces no outcome scores
    assert run("eval", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--out", tmp_path / "a") == 3
    (tmp_path / "junk.clnt").write_bytes(b"not a checkpoint")
    assert run("topics", "--checkpoint", tmp_path / "junk.clnt", "--source", "lda", "--out", tmp_path / "t") == 3


def test_knn_gold_mismatch_exit_3(ws, tmp_path):
    ok("latents", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--split", "test",
       "--out", tmp_path / "a.tsv")
    ok("latents", "--checkpoint", ws / "lda/model.clnt", "--corpus", ws / "corpus", "--split", "validation",
       "--out", tmp_path / "b.tsv")
    assert run("knn", tmp_path / "a.tsv", "--gold", tmp_path / "b.tsv") == 3
    assert run("knn", tmp_path / "a.tsv", "--gold", "patient", "--k", "100000") == 2


def test_nan_loss_exit_4(ws, tmp_path, capsys, monkeypatch):
    real = models.loss
    monkeypatch.setattr(models, "loss", lambda *a: float("nan") if real(*a) > 0 else 0.0)
    code = run("train", "--model", "lstm_e", "--corpus", ws / "corpus", "--out", tmp_path, *SMALL)
    assert code == 4
    assert "numeric" in capsys.readouterr().err
    assert not (tmp_path / "model.clnt").exists()


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_diverging_weights_exit_4(ws, tmp_path):
    # a huge step size drives weights past the float32 range of the checkpoint
    code = run("train", "--model", "lstm_e", "--corpus", ws / "corpus", "--out", tmp_path,
               "--K", "4", "--H", "5", "--steps", "50", "--lr", "1e300")
    assert code == 4
    assert not (tmp_path / "model.clnt").exists()


# --------------------------------------------------------- checkpoint glue


def test_svm_checkpoint_round_trip(ws):
    corpus = read_corpus_dir(ws / "corpus")
    lda = pl.lda_from_checkpoint(load_checkpoint(ws / "lda/model.clnt"))
    run_ = pl.train_svm_baseline(corpus, lda, "hospital", seed=0, horizon=3, epochs=3, C_grid=[1.0], pos_grid=[3.0])
    assert run_.train_sizes == sorted(run_.train_sizes, reverse=True)
    from cliniseq.checkpoint import Checkpoint, decode, encode
    back = pl.svm_from_checkpoint(decode(encode(pl.svm_to_checkpoint(run_, Checkpoint()))))
    for a, b in zip(run_.baseline.models, back.models):
        assert (a is None) == (b is None)
        if a is not None:
            np.testing.assert_allclose(b.w, a.w, rtol=1e-6)
            assert (b.C, b.pos_weight) == (a.C, a.pos_weight)
