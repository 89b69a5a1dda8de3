"""Corpus decoding, per-role WER and latency/context sweeps."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .chunking import ChunkPolicy, latency_ms
from .corpus import ROLES, ManifestEntry
from .ctc import beam_search, greedy_decode
from .frontend import AudioFormatError, cmvn, cmvn_stats, load_wav, log_mel
from .metrics import WerStats, wer
from .model import SpeechModel
from .streaming import StreamConfig, stream_file
from .tensor import assert_finite

log = logging.getLogger(__name__)


@dataclass
class DecodeOptions:
    policy: ChunkPolicy = field(default_factory=ChunkPolicy.full)
    beam_size: int = 1
    alpha: float = 0.8
    beta: float = 1.0
    lm: object = None
    streaming: bool = False

    @property
    def uses_beam(self) -> bool:
        return self.beam_size > 1 or (self.lm is not None and self.alpha != 0)


@dataclass
class EvalReport:
    overall: WerStats
    hypotheses: list
    errors: list

    def role_wer(self, role: str) -> float | None:
        s = self.overall.by_role.get(role)
        return None if s is None else s.wer

    def to_text(self, title: str = "") -> str:
        lines = [title] if title else []
        header = f"{'':10s}{'overall':>10s}" + "".join(f"{r:>10s}" for r in ROLES)
        cells = [f"{100 * self.overall.wer:10.2f}"]
        for r in ROLES:
            w = self.role_wer(r)
            cells.append(f"{'-':>10s}" if w is None else f"{100 * w:10.2f}")
        lines += [header, f"{'WER %':10s}" + "".join(cells)]
        o = self.overall
        lines.append(f"S={o.substitutions} I={o.insertions} D={o.deletions} N={o.ref_words} "
                     f"utterances={len(self.hypotheses)} errors={len(self.errors)}")
        for e in self.errors:
            lines.append(f"  skipped {e['utt_id']}: {e['error']}")
        return "\n".join(lines)


def load_features(path) -> np.ndarray:
    return cmvn(log_mel(load_wav(path))).frames


@torch.no_grad()
def decode_entry(model: SpeechModel, entry: ManifestEntry, opts: DecodeOptions) -> dict:
    audio = load_wav(entry.audio)
    feats = log_mel(audio)
    if opts.streaming:
        p = opts.policy
        text, report, _ = stream_file(model, audio.samples,
                                      StreamConfig(p.chunk_size, p.left_chunks),
                                      cmvn_stats=cmvn_stats(feats.frames))
        return {"utt_id": entry.utt_id, "text": text, "latency": report.to_dict()}
    x = torch.from_numpy(cmvn(feats).frames).unsqueeze(0)
    hidden = model.encoder(x, opts.policy)[0]
    lp = assert_finite(model.probe(hidden), "logprobs")
    if opts.uses_beam:
        hyp = beam_search(lp, model.vocab, opts.lm, opts.beam_size, opts.alpha, opts.beta)
        return {"utt_id": entry.utt_id, **hyp.to_dict()}
    return {"utt_id": entry.utt_id, "text": greedy_decode(lp, model.vocab)}


def evaluate(model: SpeechModel, entries: list[ManifestEntry], opts: DecodeOptions | None = None,
             workers: int = 1) -> EvalReport:
    """Decode every entry and aggregate WER overall and per speaker role.

    Entries whose audio cannot be read are skipped and listed in
    ``errors``. Results are merged in manifest order.
    """
    model.require_probe()
    model.eval()
    opts = opts or DecodeOptions()

    def run(entry):
        try:
            return decode_entry(model, entry, opts), None
        except (OSError, AudioFormatError) as exc:
            return None, {"utt_id": entry.utt_id, "error": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, entries))
    else:
        results = [run(e) for e in entries]

    total, by_role, hyps, errors = WerStats(), {}, [], []
    for entry, (hyp, err) in zip(entries, results):
        if err is not None:
            errors.append(err)
            continue
        stats = wer(entry.text, hyp["text"])
        hyp["wer"] = stats.to_dict()
        hyps.append(hyp)
        total = total + stats
        if entry.role:
            by_role[entry.role] = by_role.get(entry.role, WerStats()) + stats
    total.by_role = by_role
    return EvalReport(total, hyps, errors)


def sweep(model: SpeechModel, entries: list[ManifestEntry], chunk_sizes, left_contexts,
          workers: int = 1) -> list[dict]:
    """WER for every (chunk size, left context) cell plus one full-context cell."""
    rows = []
    for c in chunk_sizes:
        for left in left_contexts:
            policy = ChunkPolicy.chunked(c, left)
            rep = evaluate(model, entries, DecodeOptions(policy=policy), workers)
            rows.append(_row(policy, rep))
    rep = evaluate(model, entries, DecodeOptions(policy=ChunkPolicy.full()), workers)
    rows.append(_row(ChunkPolicy.full(), rep))
    return rows


def _row(policy: ChunkPolicy, rep: EvalReport) -> dict:
    lat = latency_ms(policy)
    return {
        "chunk_size": "full" if policy.is_full else policy.chunk_size,
        "left_chunks": "full" if policy.left_chunks is None else policy.left_chunks,
        "latency_ms": "inf" if policy.is_full else int(lat),
        "wer": rep.overall.wer,
    }


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["chunk_size", "left_chunks", "latency_ms", "wer"])
        w.writeheader()
        w.writerows(rows)


def sweep_annotations(rows: list[dict]) -> list[str]:
    """Qualitative notes on the grid; reported, never asserted."""
    notes = []
    full = next(r for r in rows if r["chunk_size"] == "full")
    chunked = [r for r in rows if r["chunk_size"] != "full"]
    worse = [r for r in chunked if r["wer"] < full["wer"]]
    notes.append(f"full-context WER {full['wer']:.4f}; "
                 f"{len(worse)} of {len(chunked)} chunked cells beat it")
    by_chunk: dict = {}
    for r in chunked:
        by_chunk.setdefault(r["chunk_size"], []).append(r)
    for c, cells in sorted(by_chunk.items()):
        limited = sorted((r for r in cells if r["left_chunks"] != "full"), key=lambda r: r["left_chunks"])
        seq = [r["wer"] for r in limited]
        mono = all(a >= b for a, b in zip(seq, seq[1:]))
        notes.append(f"chunk {c}: WER over growing left context {['%.4f' % w for w in seq]} "
                     f"({'non-increasing' if mono else 'not monotone'})")
    return notes
