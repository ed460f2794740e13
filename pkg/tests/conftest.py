import pytest

from cliniseq.synth import SynthConfig, gen_corpus


@pytest.fixture(scope="session")
def synth_small():
    return gen_corpus(SynthConfig(n_patients=60, vocab_size=40, n_topics=4, n_risk_topics=1, mean_seq_len=4,
                                  doc_len=30, seed=5))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
