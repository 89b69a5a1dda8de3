import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from streamrq.chunking import ChunkPolicy
from streamrq.ctc import ProbeConfig, Vocabulary, greedy_decode
from streamrq.encoder import EncoderConfig
from streamrq.frontend import AudioBuffer, cmvn, cmvn_stats, log_mel
from streamrq.model import NotFinetunedError, SpeechModel
from streamrq.streaming import (SessionClosedError, StreamConfig, first_emission_bound_ms, open_session,
                                stream_file)
from streamrq.tensor import ConfigError


@pytest.fixture(scope="module")
def model():
    m = SpeechModel(EncoderConfig.preset("tiny", dropout=0.0), seed=3)
    m.attach_probe(Vocabulary("ab "), ProbeConfig(32, 1, 0.0))
    return m.eval()


def audio(seconds=1.3, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(16000 * seconds)) / 16000
    sig = 0.3 * np.sin(2 * np.pi * (300 + 400 * t) * t) + 0.05 * rng.standard_normal(t.size)
    return sig.astype(np.float32)


def offline(model, samples, policy):
    feats = log_mel(AudioBuffer(samples))
    x = torch.from_numpy(cmvn(feats).frames).unsqueeze(0)
    with torch.no_grad():
        return model.encoder(x, policy)[0], cmvn_stats(feats.frames)


def test_fresh_session(model):
    s = open_session(model, StreamConfig(8, 2))
    assert s.chunks_processed == 0 and s.transcript == ""
    assert s.algorithmic_latency_ms == 320


def test_finalize_immediately(model):
    text, report = open_session(model, StreamConfig(8)).finalize()
    assert text == "" and report.chunks == 0


def test_latency_for_32():
    assert StreamConfig(32).policy.chunk_size == 32
    _, report = open_session(_m(), StreamConfig(32)).finalize()
    assert report.algorithmic_ms == 1280


def _m():
    m = SpeechModel(EncoderConfig.preset("tiny", dropout=0.0))
    m.attach_probe(Vocabulary("ab "), ProbeConfig(32, 1, 0.0))
    return m.eval()


def test_requires_probe():
    with pytest.raises(NotFinetunedError):
        open_session(SpeechModel(EncoderConfig.preset("tiny")), StreamConfig())


def test_config_validation():
    for bad in (dict(chunk_size=0), dict(chunk_size=129), dict(left_chunks=-1), dict(emit="sometimes")):
        with pytest.raises(ConfigError):
            StreamConfig(**bad)


def test_ten_ms_push_buffers(model):
    s = open_session(model, StreamConfig(8))
    assert s.push_audio(np.zeros(160, np.float32)) == []
    assert s.chunks_processed == 0 and s.frames.buffered_samples == 160


def test_double_finalize_and_push_after(model):
    s = open_session(model, StreamConfig(4))
    s.push_audio(audio(0.3))
    s.finalize()
    with pytest.raises(SessionClosedError):
        s.finalize()
    with pytest.raises(SessionClosedError):
        s.push_audio(np.zeros(10, np.float32))


def test_first_chunk_waits_for_enough_audio(model):
    s = open_session(model, StreamConfig(8))
    sig = audio(1.0)
    bound = first_emission_bound_ms(8)
    assert bound >= 320
    step = 160
    for i in range(0, sig.size, step):
        s.push_audio(sig[i: i + step])
        if s.chunks_processed:
            assert s.samples_in / 16.0 >= bound
            break
    assert s.chunks_processed == 1


@pytest.mark.parametrize("pushes", [1, 160, 1037])
def test_push_granularity(model, pushes):
    sig = audio(0.8)
    cfg = StreamConfig(4, 1)
    whole, _, a = stream_file(model, sig, cfg)
    split, _, b = stream_file(model, sig, cfg, push_samples=pushes)
    assert whole == split
    assert torch.equal(a.encoder_output(), b.encoder_output())


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, 4000), min_size=1, max_size=30))
def test_push_granularity_random_splits(sizes):
    model = _m()
    sig = audio(0.7, seed=1)
    cfg = StreamConfig(3, 2)
    ref, _, _ = stream_file(model, sig, cfg)
    s = open_session(model, cfg)
    i = 0
    for n in sizes * (sig.size // sum(sizes) + 1):
        if i >= sig.size:
            break
        s.push_audio(sig[i: i + n])
        i += n
    assert s.finalize()[0] == ref


def test_transcript_accounting(model):
    s = open_session(model, StreamConfig(2, 1))
    sig = audio(1.0, seed=2)
    pushed = []
    for i in range(0, sig.size, 800):
        pushed += s.push_audio(sig[i: i + 800])
    before = len(s.emitted)
    text, _ = s.finalize()
    flushed = [model.vocab.tokens[k] for k in s.emitted[before:]]
    assert text == "".join(pushed + flushed)
    assert len(text) > 0


def test_final_only_emits_nothing_until_finalize(model):
    s = open_session(model, StreamConfig(2, 1, emit="final-only"))
    sig = audio(0.6)
    assert s.push_audio(sig) == []
    text, _ = s.finalize()
    assert text == stream_file(model, sig, StreamConfig(2, 1))[0]


def test_sessions_are_isolated(model):
    sig_a, sig_b = audio(0.9, seed=3), audio(0.9, seed=4)
    ref_a = stream_file(model, sig_a, StreamConfig(4, 1))[0]
    ref_b = stream_file(model, sig_b, StreamConfig(4, 1))[0]
    a, b = open_session(model, StreamConfig(4, 1)), open_session(model, StreamConfig(4, 1))
    for i in range(0, sig_a.size, 700):
        a.push_audio(sig_a[i: i + 700])
        b.push_audio(sig_b[i: i + 700])
    assert (a.finalize()[0], b.finalize()[0]) == (ref_a, ref_b)


@pytest.mark.parametrize("C,L", [(1, 0), (2, 3), (4, 1), (8, None)])
def test_cache_bound(model, C, L):
    s = open_session(model, StreamConfig(C, L))
    s.push_audio(audio(1.2))
    expected = s.chunks_processed * C if L is None else min(s.chunks_processed, L) * C
    assert s.peak_cache == [expected] * len(s.peak_cache)


@pytest.mark.parametrize("C,L", [(1, 0), (1, 2), (3, 1), (4, None), (8, 2), (5, 0)])
def test_streaming_matches_offline(model, C, L):
    sig = audio(1.45, seed=C)
    ref, stats = offline(model, sig, ChunkPolicy.chunked(C, L))
    text, _, s = stream_file(model, sig, StreamConfig(C, L), push_samples=333, cmvn_stats=stats)
    out = s.encoder_output()
    assert out.shape == ref.shape
    assert (out - ref).abs().max() <= 1e-4
    assert text == greedy_decode(model.probe(ref), model.vocab)


def test_running_cmvn_still_decodes(model):
    text, report, s = stream_file(model, audio(1.0), StreamConfig(8, 1), push_samples=1600)
    assert report.chunks == s.chunks_processed and np.isfinite(report.compute_ms_mean)
    assert report.compute_ms_p95 >= 0
