"""Word n-gram language model with ARPA import/export.

Training uses interpolated absolute discounting. For a history ``h`` seen
``c(h)`` times followed by ``n1(h)`` distinct words,

    P(w | h) = max(c(hw) - D, 0) / c(h) + D * n1(h) / c(h) * P(w | h[1:])

bottoming out at a uniform distribution over the vocabulary (``<s>``
excluded). The model is stored the ARPA way: every seen n-gram keeps its
interpolated probability and every seen history its backoff weight
``D * n1(h) / c(h)``, so a trained model and its exported file answer
queries through the same lookup.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from pathlib import Path

from .tensor import ConfigError

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
DISCOUNT = 0.75
NO_PROB = -99.0


class ArpaParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class NgramLm:
    def __init__(self, order: int, probs: list[dict], backoffs: dict):
        self.order = order
        self.probs = probs  # probs[n-1][(w1..wn)] = log10 P
        self.backoffs = backoffs  # backoffs[(w1..wk)] = log10 bow
        self.vocab = {g[0] for g in probs[0]}

    def _logprob(self, ngram: tuple) -> float:
        for n in range(len(ngram), 0, -1):
            gram = ngram[-n:]
            p = self.probs[n - 1].get(gram)
            if p is not None:
                bow = sum(self.backoffs.get(ngram[-m - 1 : -1], 0.0) for m in range(n, len(ngram)))
                return p + bow
        raise KeyError(ngram[-1])

    def logprob(self, word: str, history=()) -> float:
        """log10 P(word | history), truncated to the model order."""
        word = word if word in self.vocab else UNK
        hist = tuple(h if h in self.vocab else UNK for h in history)
        hist = hist[len(hist) - min(len(hist), self.order - 1):]
        return self._logprob(hist + (word,))

    def score(self, words) -> float:
        """Sentence log10 probability with ``<s>``/``</s>`` padding."""
        words = [w.lower() for w in words]
        hist = [BOS]
        total = 0.0
        for w in words + [EOS]:
            total += self.logprob(w, hist)
            hist.append(w)
        return total

    def perplexity(self, lines) -> float:
        total, count = 0.0, 0
        for line in lines:
            words = line.lower().split()
            total += self.score(words)
            count += len(words) + 1
        return 10 ** (-total / count)


def train_ngram(lines, order: int = 4, discount: float = DISCOUNT) -> NgramLm:
    sentences = [line.lower().split() for line in lines]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise ConfigError("cannot train a language model on an empty corpus")
    if order < 1:
        raise ConfigError("order must be >= 1")

    counts = [Counter() for _ in range(order)]
    for words in sentences:
        padded = [BOS] + words + [EOS]
        for i in range(1, len(padded)):
            for n in range(1, order + 1):
                if i - n + 1 < 0:
                    break
                counts[n - 1][tuple(padded[i - n + 1 : i + 1])] += 1

    vocab = {g[0] for g in counts[0]} | {UNK, EOS}
    uniform = 1.0 / len(vocab)

    hist_total, hist_types = [], []
    for n in range(order):
        tot, types = defaultdict(int), defaultdict(int)
        for gram, c in counts[n].items():
            tot[gram[:-1]] += c
            types[gram[:-1]] += 1
        hist_total.append(tot)
        hist_types.append(types)

    def gamma(n, hist):
        return discount * hist_types[n][hist] / hist_total[n][hist]

    lin = [dict() for _ in range(order)]
    lin[0] = {
        (w,): max(counts[0].get((w,), 0) - discount, 0) / hist_total[0][()] + gamma(0, ()) * uniform
        for w in vocab
    }

    def lookup(gram):
        # P(gram[-1] | gram[:-1]) from the finished lower-order tables
        p = lin[len(gram) - 1].get(gram)
        if p is not None:
            return p
        hist = gram[:-1]
        weight = gamma(len(hist), hist) if hist_total[len(hist)].get(hist) else 1.0
        return weight * lookup(gram[1:])

    for n in range(1, order):
        for gram, c in counts[n].items():
            hist = gram[:-1]
            lin[n][gram] = (c - discount) / hist_total[n][hist] + gamma(n, hist) * lookup(gram[1:])

    probs = [{g: math.log10(p) for g, p in lin[n].items()} for n in range(order)]
    probs[0][(BOS,)] = NO_PROB
    backoffs = {}
    for n in range(order - 1):
        for hist in hist_total[n + 1]:
            backoffs[hist] = math.log10(gamma(n + 1, hist))
    return NgramLm(order, probs, backoffs)


def export_arpa(lm: NgramLm, path) -> None:
    lines = ["", "\\data\\"]
    for n in range(lm.order):
        lines.append(f"ngram {n + 1}={len(lm.probs[n])}")
    for n in range(lm.order):
        lines += ["", f"\\{n + 1}-grams:"]
        for gram in sorted(lm.probs[n]):
            row = f"{lm.probs[n][gram]:.7f}\t{' '.join(gram)}"
            if n + 1 < lm.order and gram in lm.backoffs:
                row += f"\t{lm.backoffs[gram]:.7f}"
            lines.append(row)
    lines += ["", "\\end\\", ""]
    Path(path).write_text("\n".join(lines), encoding="utf-8")


_COUNT = re.compile(r"^ngram (\d+)=(\d+)$")
_SECTION = re.compile(r"^\\(\d+)-grams:$")


def import_arpa(path) -> NgramLm:
    declared: dict[int, int] = {}
    probs: list[dict] = []
    backoffs: dict = {}
    state, current, ended, lineno = "start", 0, False, 0
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if ended:
            raise ArpaParseError(lineno, "content after \\end\\")
        if state == "start":
            if line != "\\data\\":
                raise ArpaParseError(lineno, "expected \\data\\ header")
            state = "counts"
            continue
        if line == "\\end\\":
            ended = True
            continue
        m = _SECTION.match(line)
        if m:
            n = int(m.group(1))
            if n != current + 1 or n not in declared:
                raise ArpaParseError(lineno, f"unexpected section \\{n}-grams:")
            current, state = n, "grams"
            probs.append({})
            continue
        if state == "counts":
            m = _COUNT.match(line)
            if not m:
                raise ArpaParseError(lineno, f"malformed count line {line!r}")
            declared[int(m.group(1))] = int(m.group(2))
            continue
        if line.startswith("\\"):
            raise ArpaParseError(lineno, f"malformed section header {line!r}")
        fields = line.split()
        try:
            p = float(fields[0])
            gram = tuple(fields[1 : 1 + current])
            if len(gram) != current or len(fields) > current + 2:
                raise ValueError
            bow = float(fields[1 + current]) if len(fields) == current + 2 else None
        except (ValueError, IndexError):
            raise ArpaParseError(lineno, f"malformed {current}-gram entry {line!r}") from None
        probs[-1][gram] = p
        if bow is not None:
            backoffs[gram] = bow
    if not ended:
        raise ArpaParseError(lineno, "missing \\end\\ marker")
    for n, count in declared.items():
        if n > len(probs) or len(probs[n - 1]) != count:
            got = len(probs[n - 1]) if n <= len(probs) else 0
            raise ArpaParseError(0, f"{n}-gram count mismatch: header {count}, found {got}")
    return NgramLm(len(probs), probs, backoffs)
