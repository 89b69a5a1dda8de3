import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamrq.frontend import (AudioBuffer, AudioFormatError, FeatureSequence, FrameStream,
                               RunningCMVN, TooShortError, cmvn, load_features, load_wav,
                               log_mel, num_frames, save_features, save_wav)


def write_wav(path, payload: bytes, rate=16000, channels=1, tag=1, bits=16):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_silence(tmp_path):
    write_wav(tmp_path / "s.wav", b"\x00\x00" * 16000)
    audio = load_wav(tmp_path / "s.wav")
    assert audio.samples.shape == (16000,) and not audio.samples.any()


def test_pcm16_scaling(tmp_path):
    write_wav(tmp_path / "h.wav", struct.pack("<hh", 16384, -32768))
    assert load_wav(tmp_path / "h.wav").samples.tolist() == [0.5, -1.0]


def test_float32(tmp_path):
    write_wav(tmp_path / "f.wav", np.array([0.25, -0.75], "<f4").tobytes(), tag=3, bits=32)
    assert load_wav(tmp_path / "f.wav").samples.tolist() == [0.25, -0.75]


def test_wrong_rate(tmp_path):
    write_wav(tmp_path / "r.wav", b"\x00\x00" * 10, rate=44100)
    with pytest.raises(AudioFormatError):
        load_wav(tmp_path / "r.wav")


def test_stereo_rejected(tmp_path):
    write_wav(tmp_path / "st.wav", b"\x00\x00" * 10, channels=2)
    with pytest.raises(AudioFormatError):
        load_wav(tmp_path / "st.wav")


def test_truncated(tmp_path):
    write_wav(tmp_path / "t.wav", b"\x00\x00" * 100)
    data = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(data[:-50])
    with pytest.raises(OSError):
        load_wav(tmp_path / "t.wav")


def test_save_load_round_trip(tmp_path):
    x = np.round(np.random.default_rng(0).uniform(-1, 1, 500) * 32768) / 32768
    x = np.clip(x, -1, 32767 / 32768)
    save_wav(tmp_path / "x.wav", x)
    assert np.array_equal(load_wav(tmp_path / "x.wav").samples, x.astype(np.float32))


def test_buffer_rejects_other_rates():
    with pytest.raises(AudioFormatError):
        AudioBuffer(np.zeros(10), 8000)


def test_one_second_frame_count():
    assert len(log_mel(AudioBuffer(np.zeros(16000)))) == 98


def test_too_short():
    with pytest.raises(TooShortError):
        log_mel(AudioBuffer(np.zeros(399)))


def test_silence_hits_floor():
    f = log_mel(AudioBuffer(np.zeros(1600)))
    assert np.allclose(f.frames, np.log(1e-10))


def test_sine_peaks_in_fixed_bin():
    t = np.arange(16000) / 16000
    feats = log_mel(AudioBuffer(0.5 * np.sin(2 * np.pi * 1000 * t))).frames
    # filter 28 has the largest triangle weight at 1 kHz (0.517 vs 0.483 for filter 27)
    assert set(feats.argmax(axis=1)) == {28}


@settings(max_examples=30, deadline=None)
@given(st.integers(400, 6000))
def test_frame_count_formula(n):
    assert len(log_mel(AudioBuffer(np.zeros(n)))) == (n - 400) // 160 + 1 == num_frames(n)


def test_deterministic():
    x = np.random.default_rng(1).uniform(-0.5, 0.5, 3000)
    assert np.array_equal(log_mel(AudioBuffer(x)).frames, log_mel(AudioBuffer(x)).frames)


class TestCmvn:
    def test_statistics(self):
        f = FeatureSequence(np.random.default_rng(2).standard_normal((50, 80)) * 3 + 7)
        out = cmvn(f)
        assert out.normalized
        assert np.abs(out.frames.mean(0)).max() <= 1e-6
        v = out.frames.var(0)
        assert v.min() >= 0.99 and v.max() <= 1.01

    def test_idempotent(self):
        once = cmvn(FeatureSequence(np.random.default_rng(3).standard_normal((40, 80))))
        twice = cmvn(once)
        assert np.abs(twice.frames - once.frames).max() <= 1e-6

    def test_constant_dim(self):
        x = np.random.default_rng(4).standard_normal((20, 80))
        x[:, 5] = 3.0
        out = cmvn(FeatureSequence(x))
        assert np.all(out.frames[:, 5] == 0) and np.isfinite(out.frames).all()

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            cmvn(FeatureSequence(np.zeros((1, 80))))


def test_running_cmvn_fixed_matches_offline():
    x = np.random.default_rng(5).standard_normal((30, 80)).astype(np.float32)
    mean, std = x.astype(np.float64).mean(0), x.astype(np.float64).std(0)
    r = RunningCMVN.fixed(mean, std)
    online = np.concatenate([r.normalize(x[:10]), r.normalize(x[10:])])
    assert np.abs(online - cmvn(FeatureSequence(x)).frames).max() <= 1e-6


def test_running_cmvn_adapts():
    r = RunningCMVN(decay=0.9)
    r.normalize(np.zeros((4, 80)))
    r.normalize(np.full((50, 80), 5.0))
    assert np.allclose(r.mean, 5.0, atol=0.1)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 900), min_size=1, max_size=12))
def test_frame_stream_matches_batch(pushes):
    x = np.random.default_rng(len(pushes)).uniform(-0.5, 0.5, sum(pushes)).astype(np.float32)
    fs = FrameStream()
    got, pos = [], 0
    for n in pushes:
        fs.push(x[pos : pos + n])
        pos += n
        got.append(fs.take(fs.available))
    got = np.concatenate(got)
    if len(x) < 400:
        assert len(got) == 0
    else:
        assert np.array_equal(got, log_mel(AudioBuffer(x)).frames)


def test_feature_dump_round_trip(tmp_path):
    x = np.random.default_rng(6).standard_normal((7, 80)).astype(np.float32)
    save_features(tmp_path / "f.bin", x)
    raw = (tmp_path / "f.bin").read_bytes()
    assert struct.unpack("<II", raw[:8]) == (7, 80) and len(raw) == 8 + 7 * 80 * 4
    assert np.array_equal(load_features(tmp_path / "f.bin"), x)
