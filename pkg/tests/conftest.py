import pytest

from bootalign.ensemble import ReferenceStore
from bootalign.synth import CorpusConfig, generate_corpus

TINY = CorpusConfig(profiles=2, legitimate=9, malicious=6, base_length=700, max_len=600, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY)


@pytest.fixture(scope="session")
def tiny_store(tiny_corpus):
    store = ReferenceStore(tiny_corpus.alphabet)
    for app in tiny_corpus.apps():
        for s in tiny_corpus.legitimate(app):
            store.add(app, s, verified=True)
    return store


def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_report import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n].line())
    passed = sum(r.passed for r in RESULTS.values())
    terminalreporter.write_line(f"{passed}/{len(RESULTS)} criteria passed")
