"""Input checks shared by the estimators."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .frontend import N_MELS, AudioBuffer, FeatureSequence, load_wav


def check_audio(x) -> AudioBuffer:
    if isinstance(x, AudioBuffer):
        return x
    if isinstance(x, (str, Path)):
        return load_wav(x)
    return AudioBuffer(np.asarray(x, dtype=np.float32))


def check_features(X, n_mels: int = N_MELS) -> list[np.ndarray]:
    """A sequence of ``[T, n_mels]`` matrices, as float32 arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a sequence of utterances, not one feature matrix")
    out = []
    for i, x in enumerate(X):
        arr = x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != n_mels:
            raise ValueError(f"utterance {i}: expected [T, {n_mels}] features, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError(f"utterance {i}: non-finite feature values")
        out.append(arr.astype(np.float32, copy=False))
    if not out:
        raise ValueError("X is empty")
    return out


def check_texts(y, n: int) -> list[str]:
    texts = [str(t).lower() for t in y]
    if len(texts) != n:
        raise ValueError(f"got {len(texts)} transcripts for {n} utterances")
    if any(not t.strip() for t in texts):
        raise ValueError("supervised transcripts must be nonempty")
    return texts
