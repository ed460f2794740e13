from collections import Counter

import numpy as np
import pytest

from cliniseq import corpus as cp
from cliniseq.checkpoint import load_checkpoint
from cliniseq.evaluation import auc
from cliniseq.synth import SynthConfig, gen_corpus, planted_topics, pseudo_words, write_synth


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    cfg = SynthConfig(n_patients=80, vocab_size=40, n_topics=4, n_risk_topics=1, mean_seq_len=4, doc_len=25, seed=2)
    sc = gen_corpus(cfg)
    out = tmp_path_factory.mktemp("synth")
    write_synth(out, sc)
    return sc, out


def test_planted_topics_are_disjoint_normalized_blocks():
    phi = planted_topics(4, 100)
    np.testing.assert_allclose(phi.sum(1), 1.0, atol=1e-12)
    support = phi > 0
    assert support.sum(1).tolist() == [25] * 4 and support.sum(0).max() == 1
    assert np.all(np.diff(phi[0, :25]) < 0)


def test_pseudo_words_are_distinct_letters_and_survive_normalization():
    words = pseudo_words(300)
    assert len(set(words)) == 300
    assert cp.normalize_text(" ".join(words)) == words


def test_files_round_trip_through_parser(written):
    sc, out = written
    notes = cp.read_notes_csv(out / "notes.csv")
    metas = cp.read_meta_csv(out / "meta.csv")
    assert len(notes) == len(sc.notes) and len(metas) == sc.config.n_patients
    for a, b in zip(notes, sc.notes):
        assert (a.patient_id, a.category, a.text) == (b.patient_id, b.category, b.text)
        assert a.chart_time == b.chart_time
    for m, ref in zip(metas, sc.metas):
        assert m.patient_id == ref.patient_id and m.in_hospital_death == ref.in_hospital_death
        assert (m.admit_time, m.discharge_time) == (ref.admit_time, ref.discharge_time)
        assert abs(m.age_at_admission - ref.age_at_admission) < 1e-9
    patients = {p.patient_id: p for p in cp.build_patients(notes, metas)}
    assert sorted(patients) == sc.patient_ids
    for i, pid in enumerate(sc.patient_ids):
        seq = patients[pid].sequence
        assert seq.length == len(sc.truth.mixtures[i])
        assert patients[pid].labels.in_hospital == bool(sc.labels[i])
        # rebuild each time point's token counts straight from the generated notes
        want = [Counter() for _ in range(seq.length)]
        admit = sc.metas[i].admit_time
        for n in sc.notes:
            if n.patient_id == pid:
                want[int((n.chart_time - admit) // cp.HOURS_12)].update(n.text.split())
        assert seq.counts == [dict(c) for c in want]


def test_truth_checkpoint(written):
    sc, out = written
    ck = load_checkpoint(out / "truth.clnt")
    np.testing.assert_allclose(ck.tensors["phi_star"], sc.truth.phi_star, rtol=1e-6)
    np.testing.assert_array_equal(ck.tensors["risk"], [6.0, 0.0, 0.0, 0.0])
    assert ck.metadata["vocab"].split() == sc.truth.words


def test_seed_determinism(tmp_path):
    cfg = SynthConfig(n_patients=30, vocab_size=40, n_topics=4, seed=9)
    write_synth(tmp_path / "a", gen_corpus(cfg))
    write_synth(tmp_path / "b", gen_corpus(cfg))
    for name in ("notes.csv", "meta.csv", "truth.clnt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    write_synth(tmp_path / "c", gen_corpus(SynthConfig(n_patients=30, vocab_size=40, n_topics=4, seed=10)))
    assert (tmp_path / "a" / "notes.csv").read_bytes() != (tmp_path / "c" / "notes.csv").read_bytes()


def test_sequence_lengths_and_mixtures():
    sc = gen_corpus(SynthConfig(n_patients=600, vocab_size=40, n_topics=4, mean_seq_len=6, seed=3))
    lengths = np.array([len(m) for m in sc.truth.mixtures])
    assert lengths.min() >= 2
    assert 5 <= lengths.mean() <= 7.5
    for m in sc.truth.mixtures[:50]:
        np.testing.assert_allclose(m.sum(1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_base_rate_near_target(seed):
    sc = gen_corpus(SynthConfig(n_patients=800, vocab_size=40, n_topics=4, mean_seq_len=4, doc_len=10, seed=seed))
    assert abs(sc.labels.mean() - 0.25) <= 0.05


def test_no_empty_time_points_without_empty_rate():
    sc = gen_corpus(SynthConfig(n_patients=50, vocab_size=40, n_topics=4, mean_seq_len=5, empty_rate=0.0, seed=4))
    patients = cp.build_patients(sc.notes, sc.metas)
    assert all(all(c for c in p.sequence.counts) for p in patients)


def test_some_empty_time_points_by_default():
    sc = gen_corpus(SynthConfig(n_patients=50, vocab_size=40, n_topics=4, mean_seq_len=5, seed=4))
    patients = cp.build_patients(sc.notes, sc.metas)
    assert any(not c for p in patients for c in p.sequence.counts)
    # every patient keeps at least one note
    assert len(patients) == 50


def test_null_signal_labels_ignore_text():
    sc = gen_corpus(SynthConfig(n_patients=800, vocab_size=40, n_topics=4, mean_seq_len=4, doc_len=10,
                                risk_strength=0.0, seed=5))
    assert not sc.truth.late_risk.any()
    assert abs(sc.labels.mean() - 0.25) <= 0.05
    share = np.array([m[len(m) // 2:, 0].mean() for m in sc.truth.mixtures])
    assert 0.4 <= auc(share, sc.labels) <= 0.6


def oracle_auc(n_risk_topics, seed=0):
    sc = gen_corpus(SynthConfig(n_patients=2000, vocab_size=100, n_topics=4, n_risk_topics=n_risk_topics,
                                risk_strength=6.0, mean_seq_len=4, doc_len=10, seed=seed))
    return auc(sc.truth.late_risk, sc.labels)


def test_generative_oracle_is_strong():
    assert oracle_auc(1) >= 0.90


@pytest.mark.xfail(strict=True, reason="Bernoulli label noise caps the oracle near 0.93 at a 25% base rate "
                                       "with a logit range of 6; see the decisions ledger")
def test_generative_oracle_reaches_095():
    assert oracle_auc(1) >= 0.95


@pytest.mark.parametrize("bad", [dict(n_patients=0), dict(n_risk_topics=8), dict(vocab_size=30),
                                 dict(empty_rate=1.5), dict(positive_rate=1.0), dict(mean_seq_len=0.5),
                                 dict(concentration=0), dict(risk_strength=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        gen_corpus(SynthConfig(**{**dict(vocab_size=40, n_topics=8), **bad}))
