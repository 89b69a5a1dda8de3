"""CTC probe, loss and decoders over a character vocabulary."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import tensor as T_
from .tensor import ConfigError

BLANK = 0
BLANK_TOKEN = "<b>"
LN10 = math.log(10.0)
NEG_INF = -math.inf


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the given number of frames."""


class Vocabulary:
    """Blank at id 0, then characters in sorted order."""

    def __init__(self, chars):
        chars = sorted(set(chars) - {BLANK_TOKEN})
        self.tokens = [BLANK_TOKEN] + chars
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        chars = set()
        for text in texts:
            chars.update(text.lower())
        chars.add(" ")
        return cls(chars)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[ch] for ch in text.lower()]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids if i != BLANK)

    @property
    def space_id(self) -> int | None:
        return self.index.get(" ")


@dataclass(frozen=True)
class ProbeConfig:
    hidden_dim: int = 1024
    n_hidden: int = 3
    dropout: float = 0.15


class Probe(nn.Module):
    """Three hidden layers, then a linear map to the vocabulary and log-softmax."""

    def __init__(self, d_model: int, vocab_size: int, cfg: ProbeConfig = ProbeConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.generator = torch.Generator().manual_seed(seed)
        dims = [d_model] + [cfg.hidden_dim] * cfg.n_hidden
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
            self.out = nn.Linear(dims[-1], vocab_size)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        x = hidden
        for layer in self.hidden:
            x = T_.dropout(T_.gelu(layer(x)), self.cfg.dropout, self.training, self.generator)
        return T_.log_softmax(self.out(x), dim=-1)


def extend_with_blanks(target) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target) -> int:
    """Shortest alignment: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target[:-1], target[1:]) if a == b)
    return len(target) + repeats


def _forward_backward(lp: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. ``lp`` (``[T, V]`` log-probs)."""
    T, V = lp.shape
    ext = extend_with_blanks(target)
    S = len(ext)
    emit = lp[:, ext]  # T,S
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    occupancy = np.exp(alpha + beta - emit - log_p)  # T,S
    grad = np.zeros((T, V))
    for s in range(S):
        grad[:, ext[s]] -= occupancy[:, s]
    return -float(log_p), grad


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logprobs, target):
        nll, grad = _forward_backward(logprobs.detach().double().numpy(), target)
        ctx.save_for_backward(torch.from_numpy(grad))
        ctx.dtype = logprobs.dtype
        return torch.tensor(nll, dtype=torch.float64)

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return (g * grad).to(ctx.dtype), None


def ctc_loss(logprobs: torch.Tensor, target) -> torch.Tensor:
    """``-log`` of the total probability of ``target`` under ``logprobs`` ``[T, V]``.

    The value is a float64 scalar whatever the input dtype.
    """
    target = [int(t) for t in target]
    if any(t == BLANK for t in target):
        raise ValueError("targets must not contain the blank id")
    if logprobs.shape[0] < min_frames(target):
        raise CTCInfeasibleError(
            f"{logprobs.shape[0]} frames cannot align a target needing {min_frames(target)}"
        )
    return _CTCFunction.apply(logprobs, tuple(target))


def ctc_loss_batch(logprobs: torch.Tensor, lengths, targets) -> torch.Tensor:
    """Mean over the batch of per-utterance losses normalized by target length."""
    losses = [
        ctc_loss(logprobs[i, : int(lengths[i])], tgt) / max(len(tgt), 1)
        for i, tgt in enumerate(targets)
    ]
    return torch.stack(losses).mean()


def greedy_ids(logprobs) -> list[int]:
    best = np.asarray(torch.as_tensor(logprobs).argmax(dim=-1))
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def greedy_decode(logprobs, vocab: Vocabulary) -> str:
    return vocab.decode(greedy_ids(logprobs))


@dataclass
class CtcHypothesis:
    text: str
    score_total: float
    score_acoustic: float
    score_lm: float
    n_words: int

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "score_total": self.score_total,
            "score_acoustic": self.score_acoustic,
            "score_lm": self.score_lm,
            "n_words": self.n_words,
        }


def _sequence_logprob(lp: np.ndarray, ids: list[int]) -> float:
    if lp.shape[0] < min_frames(ids):
        return NEG_INF
    return -_forward_backward(lp, ids)[0]


class _LmState:
    """Word-level fusion bookkeeping for one prefix."""

    __slots__ = ("lm", "words", "n_words", "partial")

    def __init__(self, lm=0.0, words=("<s>",), n_words=0, partial=""):
        self.lm, self.words, self.n_words, self.partial = lm, words, n_words, partial

    def extend(self, ch: str, lm_model) -> "_LmState":
        if ch != " ":
            return _LmState(self.lm, self.words, self.n_words, self.partial + ch)
        if not self.partial:
            return self
        return self._complete(lm_model)

    def _complete(self, lm_model) -> "_LmState":
        add = 0.0
        if lm_model is not None:
            add = lm_model.logprob(self.partial, self.words) * LN10
        words = (self.words + (self.partial,))[-(lm_model.order - 1 if lm_model else 3):]
        return _LmState(self.lm + add, words, self.n_words + 1, "")

    def finish(self, lm_model) -> "_LmState":
        st = self._complete(lm_model) if self.partial else self
        if lm_model is not None:
            st = _LmState(st.lm + lm_model.logprob("</s>", st.words) * LN10, st.words, st.n_words, "")
        return st


def _state_for(text: str, lm) -> _LmState:
    st = _LmState()
    for ch in text:
        st = st.extend(ch, lm)
    return st


def beam_search(logprobs, vocab: Vocabulary, lm=None, beam_size: int = 32,
                alpha: float = 0.8, beta: float = 1.0) -> CtcHypothesis:
    """CTC prefix beam search with word-level n-gram shallow fusion.

    Each prefix carries its blank-ending and non-blank-ending log
    probabilities. When a space closes a word the LM log-probability of that
    word (natural log, weighted by ``alpha``) and the bonus ``beta`` are
    added; at the end, a trailing partial word is scored as a full word and
    the sentence end is scored.

    ``beam_size=1`` without LM weight follows the per-frame best path, so it
    coincides with greedy decoding.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    lp = np.asarray(torch.as_tensor(logprobs).detach().double())
    T, V = lp.shape
    space = vocab.space_id
    if lm is None:
        alpha = 0.0

    if beam_size == 1 and alpha == 0.0:
        ids = greedy_ids(lp)
        text = vocab.decode(ids)
        st = _state_for(text, lm).finish(lm)
        acoustic = _sequence_logprob(lp, ids)
        return CtcHypothesis(text, acoustic + beta * st.n_words, acoustic, st.lm, st.n_words)

    def total(pb, pnb, st):
        return np.logaddexp(pb, pnb) + alpha * st.lm + beta * st.n_words

    beams = {(): (0.0, NEG_INF)}
    states = {(): _LmState()}
    for t in range(T):
        row = lp[t]
        nxt = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            ptot = np.logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = np.logaddexp(cell[0], ptot + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                cell[1] = np.logaddexp(cell[1], pnb + row[last])
            for c in range(1, V):
                new = prefix + (c,)
                src = pb if c == last else ptot
                ncell = nxt[new]
                ncell[1] = np.logaddexp(ncell[1], src + row[c])
                if new not in states:
                    states[new] = states[prefix].extend(vocab.tokens[c], lm)
        ranked = sorted(nxt.items(), key=lambda kv: (-total(kv[1][0], kv[1][1], states[kv[0]]), kv[0]))
        beams = {p: (v[0], v[1]) for p, v in ranked[:beam_size]}
        # Drop LM states of pruned prefixes that no survivor can extend from.
        if len(states) > 8 * beam_size * V:
            states = {p: states[p] for p in beams}

    # Pruning drops alignments that pass through discarded prefixes, so the
    # surviving candidates (plus the greedy labeling) are rescored exactly.
    candidates = list(beams)
    greedy = tuple(greedy_ids(lp))
    if greedy not in beams:
        candidates.append(greedy)
        states[greedy] = _state_for(vocab.decode(greedy), lm)
    best = None
    for prefix in candidates:
        st = states[prefix].finish(lm)
        acoustic = _sequence_logprob(lp, list(prefix))
        hyp = CtcHypothesis(vocab.decode(prefix), acoustic + alpha * st.lm + beta * st.n_words,
                            acoustic, st.lm, st.n_words)
        if best is None or hyp.score_total > best.score_total:
            best = hyp
    return best
