import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from streamrq.corpus import ROLES, char_frequency, make_corpus, phrase, read_manifest, render
from streamrq.estimators import BestRQPretrainer, CTCRecognizer, LogMelFrontend
from streamrq.frontend import load_wav
from streamrq.validation import check_features, check_texts


def test_get_params_round_trip():
    est = CTCRecognizer(steps=7, probe_hidden=16)
    params = est.get_params()
    assert params["steps"] == 7 and params["probe_hidden"] == 16
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert BestRQPretrainer().set_params(lr=3e-4).lr == 3e-4


def test_frontend_transform(corpus):
    entries = read_manifest(corpus)
    feats = LogMelFrontend().fit_transform([e.audio for e in entries])
    assert all(f.shape[1] == 80 for f in feats)
    assert abs(float(np.mean(feats[0]))) < 1e-4


def test_check_features_errors():
    with pytest.raises(ValueError):
        check_features(np.zeros((10, 80)))
    with pytest.raises(ValueError):
        check_features([np.zeros((10, 40))])
    with pytest.raises(ValueError):
        check_features([np.full((10, 80), np.nan)])
    with pytest.raises(ValueError):
        check_features([])


def test_check_texts_errors():
    with pytest.raises(ValueError):
        check_texts(["a"], 2)
    with pytest.raises(ValueError):
        check_texts(["  "], 1)
    assert check_texts(["Climb"], 1) == ["climb"]


def test_pretrainer_short_fit(corpus):
    feats = LogMelFrontend().transform([e.audio for e in read_manifest(corpus)])
    est = BestRQPretrainer(steps=3, batch_size=2, codebook_size=16).fit(feats)
    assert len(est.loss_log_) + est.skipped_steps_ == 3
    out = est.transform(feats[:1])
    assert out[0].shape == (-(-feats[0].shape[0] // 4), 64)


def test_recognizer_pipeline_and_warm_start(corpus):
    entries = read_manifest(corpus)
    pre = BestRQPretrainer(steps=2, batch_size=2, codebook_size=16).fit(
        LogMelFrontend().transform([e.audio for e in entries]))
    pipe = make_pipeline(LogMelFrontend(), CTCRecognizer(init=pre.model_, steps=3, batch_size=2,
                                                         probe_hidden=16, probe_layers=1))
    pipe.fit([e.audio for e in entries], [e.text for e in entries])
    rec = pipe[-1]
    assert rec.n_steps_ == 3 and len(rec.loss_log_) == 3
    hyps = pipe.predict([e.audio for e in entries])
    assert len(hyps) == len(entries)
    assert -np.inf < pipe.score([e.audio for e in entries], [e.text for e in entries]) <= 1.0
    # warm start copies the encoder without touching the source
    assert not torch.equal(rec.model_.encoder.blocks[0].attn.q.weight, pre.model_.encoder.blocks[0].attn.q.weight)


def test_fit_is_seeded(corpus):
    feats = LogMelFrontend().transform([e.audio for e in read_manifest(corpus)])
    a = BestRQPretrainer(steps=3, batch_size=2, codebook_size=16, seed=4).fit(feats)
    b = BestRQPretrainer(steps=3, batch_size=2, codebook_size=16, seed=4).fit(feats)
    assert [r["loss"] for r in a.loss_log_] == [r["loss"] for r in b.loss_log_]


class TestCorpus:
    def test_deterministic(self, tmp_path):
        a = make_corpus(tmp_path / "a", 3, seed=5)
        b = make_corpus(tmp_path / "b", 3, seed=5)
        ea, eb = read_manifest(a), read_manifest(b)
        assert [e.text for e in ea] == [e.text for e in eb]
        assert np.array_equal(load_wav(ea[0].audio).samples, load_wav(eb[0].audio).samples)

    def test_roles_and_fields(self, corpus):
        for e in read_manifest(corpus):
            assert e.role in ROLES and e.text and e.duration_s > 0
            assert load_wav(e.audio).sample_rate == 16000

    def test_phrase_alphabet(self):
        import random
        rng = random.Random(0)
        for role in ROLES:
            assert set(phrase(rng, role)) <= set("abcdefghijklmnopqrstuvwxyz ")

    def test_pitch_unique(self):
        pitches = [char_frequency(c) for c in "abcdefghijklmnopqrstuvwxyz"]
        assert len(set(pitches)) == 26 and max(pitches) < 8000

    def test_render_length(self):
        sig = render("ab c", np.random.default_rng(0))
        assert sig.dtype == np.float32 and np.abs(sig).max() <= 1.0
        assert sig.size == 16 * (70 + 90 + 90 + 70 + 90 + 70)
