"""Word error rate with a deterministic alignment tie-break."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

_PUNCT = re.compile(r"[^\w\s-]")
_LOOSE_HYPHEN = re.compile(r"(?<!\w)-|-(?!\w)")


def normalize_text(text: str) -> str:
    """Lowercase, drop punctuation (hyphens survive only inside words), squeeze spaces."""
    text = _PUNCT.sub(" ", text.lower())
    text = _LOOSE_HYPHEN.sub(" ", text)
    return " ".join(text.split())


@dataclass
class WerStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0
    by_role: dict = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.ref_words

    def __add__(self, other: "WerStats") -> "WerStats":
        return WerStats(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )

    def to_dict(self) -> dict:
        out = {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_words": self.ref_words,
            "wer": self.wer,
        }
        if self.by_role:
            out["by_role"] = {role: s.to_dict() for role, s in sorted(self.by_role.items())}
        return out


def align_counts(ref: list, hyp: list) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-edit alignment.

    Costs compare as tuples ``(edits, insertions, deletions)``, so among
    equal-distance alignments the one with fewest insertions, then fewest
    deletions, wins.
    """
    n, m = len(ref), len(hyp)
    # cell = (edits, ins, dels, subs)
    prev = [(j, j, 0, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            e, a, d, s = prev[j - 1]
            diag = (e, a, d, s) if ref[i - 1] == hyp[j - 1] else (e + 1, a, d, s + 1)
            e, a, d, s = cur[j - 1]
            ins = (e + 1, a + 1, d, s)
            e, a, d, s = prev[j]
            dele = (e + 1, a, d + 1, s)
            cur.append(min(diag, ins, dele, key=lambda c: c[:3]))
        prev = cur
    _, ins, dels, subs = prev[m]
    return subs, ins, dels


def wer(ref: str, hyp: str, normalize: bool = True) -> WerStats:
    if normalize:
        ref, hyp = normalize_text(ref), normalize_text(hyp)
    r, h = ref.split(), hyp.split()
    subs, ins, dels = align_counts(r, h)
    return WerStats(subs, ins, dels, len(r))
