import pytest

from streamrq.corpus import make_corpus
from streamrq.ctc import ProbeConfig, Vocabulary
from streamrq.encoder import EncoderConfig
from streamrq.model import SpeechModel


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("corpus"), 4, seed=7, max_words=2)


@pytest.fixture(scope="session")
def probe_ckpt(tmp_path_factory, corpus):
    """Untrained Tiny model with a small probe over the corpus alphabet."""
    from streamrq.corpus import read_manifest
    m = SpeechModel(EncoderConfig.preset("tiny", dropout=0.0), seed=1)
    m.attach_probe(Vocabulary.from_texts([e.text for e in read_manifest(corpus)]), ProbeConfig(32, 1, 0.0))
    path = tmp_path_factory.mktemp("ckpt") / "probe.ckpt"
    m.save(path)
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
