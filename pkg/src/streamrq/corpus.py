"""JSON-lines manifests and a seeded synthetic pseudo-ATC corpus.

Synthetic "speech" renders each character as a short tone whose pitch is
unique to that character, separated by brief fades, with word gaps and
background noise. It carries just enough structure for the full pipeline
(pre-training, CTC fine-tuning, streaming decode) to learn from it without
external data.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .frontend import SAMPLE_RATE, save_wav

ROLES = ("C", "P", "A")

NATO = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
        "juliett", "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo",
        "sierra", "tango", "uniform", "victor", "whiskey", "xray", "yankee", "zulu"]
DIGITS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
VERBS = ["climb", "descend", "maintain", "turn left", "turn right", "contact", "hold"]
OBJECTS = ["flight level", "heading", "runway", "tower", "ground", "approach"]

ALPHABET = "abcdefghijklmnopqrstuvwxyz"
CHAR_MS = 90
FADE_MS = 15
GAP_MS = 70


@dataclass
class ManifestEntry:
    utt_id: str
    audio: str
    text: str
    role: str | None = None
    duration_s: float | None = None


def read_manifest(path) -> list[ManifestEntry]:
    base = Path(path).parent
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        audio = Path(obj["audio"])
        if not audio.is_absolute():
            audio = base / audio
        entries.append(ManifestEntry(obj["utt_id"], str(audio), obj.get("text", "").lower(),
                                     obj.get("role"), obj.get("duration_s")))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({k: v for k, v in asdict(e).items() if v is not None}) + "\n")


def char_frequency(ch: str) -> float:
    """Log-spaced pitch per letter, 250 Hz to about 4.5 kHz."""
    return 250.0 * (1.123 ** ALPHABET.index(ch))


def phrase(rng: random.Random, role: str = "C", max_words: int | None = None) -> str:
    callsign = [rng.choice(NATO) for _ in range(rng.randint(1, 2))]
    if role == "A":
        words = ["information", rng.choice(NATO), "runway"] + [rng.choice(DIGITS) for _ in range(2)]
    else:
        verb = rng.choice(VERBS).split()
        obj = rng.choice(OBJECTS).split()
        nums = [rng.choice(DIGITS) for _ in range(rng.randint(1, 3))]
        words = callsign + verb + obj + nums
        if role == "P":
            words = words[len(callsign):] + callsign
    if max_words:
        words = words[:max_words]
    return " ".join(words)


def render(text: str, rng: np.random.Generator, snr_db: float = 20.0) -> np.ndarray:
    n_char = SAMPLE_RATE * CHAR_MS // 1000
    n_fade = SAMPLE_RATE * FADE_MS // 1000
    n_gap = SAMPLE_RATE * GAP_MS // 1000
    env = np.ones(n_char)
    ramp = np.linspace(0.0, 1.0, n_fade)
    env[:n_fade], env[-n_fade:] = ramp, ramp[::-1]
    pieces = [np.zeros(n_gap)]
    for ch in text:
        if ch == " ":
            pieces.append(np.zeros(n_gap))
            continue
        f = char_frequency(ch) * rng.uniform(0.985, 1.015)
        t = np.arange(n_char) / SAMPLE_RATE
        tone = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        if 2 * f < 0.95 * SAMPLE_RATE / 2:
            tone += 0.3 * np.sin(4 * np.pi * f * t)
        pieces.append(0.3 * env * tone)
    pieces.append(np.zeros(n_gap))
    sig = np.concatenate(pieces)
    noise_std = 0.3 / np.sqrt(2) / (10 ** (snr_db / 20))
    sig = sig + rng.normal(0.0, noise_std, size=sig.size)
    return np.clip(sig, -1.0, 1.0).astype(np.float32)


def make_corpus(out_dir, n: int, seed: int = 0, max_words: int | None = None,
                name: str = "manifest.jsonl", snr_db: float = 20.0) -> Path:
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    prng = random.Random(seed)
    arng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        role = ROLES[prng.randrange(len(ROLES))]
        text = phrase(prng, role, max_words)
        audio = render(text, arng, snr_db)
        rel = f"wav/utt{seed:04d}_{i:05d}.wav"
        save_wav(out / rel, audio)
        entries.append(ManifestEntry(f"utt{seed:04d}_{i:05d}", rel, text, role,
                                     round(audio.size / SAMPLE_RATE, 3)))
    path = out / name
    write_manifest(path, entries)
    return path
