"""scikit-learn style estimators over the toolkit.

``X`` is always a list of utterances: raw audio for :class:`LogMelFrontend`,
normalized ``[T, 80]`` feature matrices for everything downstream, so the
pieces chain in a :class:`sklearn.pipeline.Pipeline`.
"""

from __future__ import annotations

import logging
import random
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bestrq import MaskSpec, QuantizerConfig, pretrain_step
from .chunking import ChunkPolicy, ScheduleConfig, sample_policy
from .ctc import ProbeConfig, Vocabulary, beam_search, ctc_loss_batch, greedy_decode
from .encoder import EncoderConfig, subsampled_length
from .bestrq import pad_batch
from .frontend import cmvn, log_mel
from .metrics import wer
from .model import SpeechModel
from .tensor import assert_finite
from .validation import check_audio, check_features, check_texts

log = logging.getLogger(__name__)


class LogMelFrontend(TransformerMixin, BaseEstimator):
    """Audio (arrays, :class:`AudioBuffer` or WAV paths) to normalized log-mel."""

    def __init__(self, normalize: bool = True):
        self.normalize = normalize

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for x in X:
            feats = log_mel(check_audio(x))
            out.append((cmvn(feats) if self.normalize else feats).frames)
        return out


def _schedule(p_full, chunk_range, p_limited_left, left_range) -> ScheduleConfig:
    return ScheduleConfig(p_full, tuple(chunk_range), p_limited_left, tuple(left_range))


class BestRQPretrainer(BaseEstimator):
    """Masked prediction of frozen random-projection labels.

    After ``fit``: ``model_`` (a :class:`SpeechModel` with quantizer and
    classifier head), ``loss_log_`` (one dict per step) and ``skipped_steps_``.
    """

    def __init__(self, preset="tiny", steps=2000, batch_size=8, lr=1e-4, weight_decay=0.01,
                 codebook_size=8192, code_dim=16, p_start=0.15, span_segments=4, noise_std=0.1,
                 p_full=0.40, chunk_range=(8, 32), p_limited_left=0.75, left_range=(2, 32),
                 dropout=0.1, conv_left_context="within_chunk", seed=0, log_every=50,
                 target_loss=None, callback=None):
        self.preset = preset
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.p_start = p_start
        self.span_segments = span_segments
        self.noise_std = noise_std
        self.p_full = p_full
        self.chunk_range = chunk_range
        self.p_limited_left = p_limited_left
        self.left_range = left_range
        self.dropout = dropout
        self.conv_left_context = conv_left_context
        self.seed = seed
        self.log_every = log_every
        self.target_loss = target_loss
        self.callback = callback

    def fit(self, X, y=None):
        feats = check_features(X)
        enc_cfg = EncoderConfig.preset(self.preset, dropout=self.dropout,
                                       conv_left_context=self.conv_left_context)
        model = SpeechModel(enc_cfg, seed=self.seed)
        model.attach_pretraining(QuantizerConfig(seed=self.seed, codebook_size=self.codebook_size,
                                                 code_dim=self.code_dim))
        spec = MaskSpec(p_start=self.p_start, span_segments=self.span_segments, noise_std=self.noise_std)
        schedule = _schedule(self.p_full, self.chunk_range, self.p_limited_left, self.left_range)
        params = list(model.encoder.parameters()) + list(model.head.parameters())
        opt = torch.optim.AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        prng = random.Random(self.seed)
        nrng = np.random.default_rng(self.seed)
        model.train()
        self.loss_log_, self.skipped_steps_ = [], 0
        for step in range(1, self.steps + 1):
            batch = [feats[i] for i in _draw(prng, len(feats), self.batch_size)]
            policy = sample_policy(prng, schedule, "pretrain")
            loss = pretrain_step(model.encoder, model.head, batch, policy, model.quantizer,
                                 spec, nrng, opt)
            if loss is None:
                self.skipped_steps_ += 1
                continue
            self.loss_log_.append(_log_row(step, loss, policy))
            if self.log_every and step % self.log_every == 0:
                log.info("pretrain step %d loss %.4f (%s)", step, loss, policy.describe())
            if self.callback is not None:
                self.callback(step, loss, policy)
            if self.target_loss is not None and _smoothed(self.loss_log_) <= self.target_loss:
                break
        model.meta.update({"pretrain_steps": step, "stage": "pretrained"})
        self.model_ = model.eval()
        return self

    def transform(self, X, policy: ChunkPolicy | None = None):
        check_is_fitted(self, "model_")
        return encode_all(self.model_, check_features(X), policy or ChunkPolicy.full())


class CTCRecognizer(BaseEstimator):
    """CTC fine-tuning of an (optionally pre-trained) encoder plus probe.

    ``init`` may be a :class:`SpeechModel`, a checkpoint path, or ``None``
    for a randomly initialized ``preset`` encoder. ``policy_phase`` picks the
    context schedule during training: ``"finetune"`` chunks every batch,
    ``"pretrain"`` mixes in full-context batches, ``"full"`` never chunks.
    ``context`` is the policy used by ``predict``.
    """

    def __init__(self, init=None, preset="tiny", steps=3000, batch_size=8, encoder_lr=1e-4,
                 probe_lr=8e-4, weight_decay=0.01, policy_phase="finetune", chunk_range=(8, 32),
                 p_limited_left=0.75, left_range=(2, 32), probe_hidden=1024, probe_layers=3,
                 probe_dropout=0.15, dropout=0.1, seed=0, eval_every=0, target_wer=None,
                 context=None, beam_size=1, alpha=0.8, beta=1.0, lm=None, log_every=50,
                 callback=None):
        self.init = init
        self.preset = preset
        self.steps = steps
        self.batch_size = batch_size
        self.encoder_lr = encoder_lr
        self.probe_lr = probe_lr
        self.weight_decay = weight_decay
        self.policy_phase = policy_phase
        self.chunk_range = chunk_range
        self.p_limited_left = p_limited_left
        self.left_range = left_range
        self.probe_hidden = probe_hidden
        self.probe_layers = probe_layers
        self.probe_dropout = probe_dropout
        self.dropout = dropout
        self.seed = seed
        self.eval_every = eval_every
        self.target_wer = target_wer
        self.context = context
        self.beam_size = beam_size
        self.alpha = alpha
        self.beta = beta
        self.lm = lm
        self.log_every = log_every
        self.callback = callback

    def _initial_model(self) -> SpeechModel:
        if isinstance(self.init, SpeechModel):
            src = self.init
            model = SpeechModel(src.cfg, seed=self.seed)
            model.encoder.load_state_dict(src.encoder.state_dict())
            model.meta = dict(src.meta)
        elif self.init is not None:
            model = SpeechModel.load(Path(self.init))
        else:
            model = SpeechModel(EncoderConfig.preset(self.preset, dropout=self.dropout), seed=self.seed)
        return model

    def fit(self, X, y):
        feats = check_features(X)
        texts = check_texts(y, len(feats))
        model = self._initial_model()
        vocab = Vocabulary.from_texts(texts)
        model.attach_probe(vocab, ProbeConfig(self.probe_hidden, self.probe_layers, self.probe_dropout))
        targets = [vocab.encode(t) for t in texts]
        if self.policy_phase == "full":
            schedule, phase = _schedule(1.0, self.chunk_range, self.p_limited_left, self.left_range), "pretrain"
        else:
            schedule = _schedule(0.4, self.chunk_range, self.p_limited_left, self.left_range)
            phase = self.policy_phase
        opt = torch.optim.AdamW(
            [{"params": model.encoder.parameters(), "lr": self.encoder_lr},
             {"params": model.probe.parameters(), "lr": self.probe_lr}],
            weight_decay=self.weight_decay,
        )
        prng = random.Random(self.seed)
        self.model_, self.vocab_ = model, vocab
        self.loss_log_, self.wer_log_ = [], []
        model.train()
        for step in range(1, self.steps + 1):
            idx = _draw(prng, len(feats), self.batch_size)
            policy = sample_policy(prng, schedule, phase)
            batch, lengths = pad_batch([feats[i] for i in idx])
            hidden = model.encoder(batch, policy, lengths)
            logprobs = model.probe(hidden)
            loss = ctc_loss_batch(logprobs, [subsampled_length(int(n)) for n in lengths],
                                  [targets[i] for i in idx])
            assert_finite(loss.detach(), "ctc loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.detach())
            self.loss_log_.append(_log_row(step, value, policy))
            if self.log_every and step % self.log_every == 0:
                log.info("finetune step %d loss %.4f (%s)", step, value, policy.describe())
            if self.callback is not None:
                self.callback(step, value, policy)
            if self.eval_every and step % self.eval_every == 0:
                model.eval()
                err = corpus_wer(self.predict(feats), texts)
                model.train()
                self.wer_log_.append({"step": step, "wer": err})
                log.info("finetune step %d train WER %.4f", step, err)
                if self.target_wer is not None and err <= self.target_wer:
                    break
        model.meta.update({"finetune_steps": step, "stage": "finetuned"})
        self.n_steps_ = step
        model.eval()
        return self

    def predict_logprobs(self, X, policy: ChunkPolicy | None = None) -> list[torch.Tensor]:
        check_is_fitted(self, "model_")
        return model_logprobs(self.model_, check_features(X), policy or self.context or ChunkPolicy.full())

    def predict(self, X, policy: ChunkPolicy | None = None) -> list[str]:
        out = []
        for lp in self.predict_logprobs(X, policy):
            if self.beam_size == 1 and (self.lm is None or self.alpha == 0):
                out.append(greedy_decode(lp, self.vocab_))
            else:
                out.append(beam_search(lp, self.vocab_, self.lm, self.beam_size, self.alpha, self.beta).text)
        return out

    def score(self, X, y) -> float:
        """``1 - WER`` so that larger is better."""
        return 1.0 - corpus_wer(self.predict(X), check_texts(y, len(X)))


@torch.no_grad()
def encode_all(model: SpeechModel, feats: list[np.ndarray], policy: ChunkPolicy) -> list[np.ndarray]:
    model.eval()
    return [model.encoder(torch.from_numpy(f).unsqueeze(0), policy)[0].numpy() for f in feats]


@torch.no_grad()
def model_logprobs(model: SpeechModel, feats: list[np.ndarray], policy: ChunkPolicy) -> list[torch.Tensor]:
    model.require_probe()
    model.eval()
    out = []
    for f in feats:
        hidden = model.encoder(torch.from_numpy(np.asarray(f, np.float32)).unsqueeze(0), policy)[0]
        out.append(assert_finite(model.probe(hidden), "logprobs"))
    return out


def corpus_wer(hyps, refs) -> float:
    total = None
    for h, r in zip(hyps, refs):
        s = wer(r, h)
        total = s if total is None else total + s
    return total.wer


def _draw(rng: random.Random, n: int, k: int) -> list[int]:
    return rng.sample(range(n), k) if k < n else list(range(n))


def _log_row(step, loss, policy: ChunkPolicy) -> dict:
    return {
        "step": step,
        "loss": loss,
        "policy_mode": policy.mode,
        "chunk_size": policy.chunk_size if not policy.is_full else "",
        "left": "" if policy.is_full else ("full" if policy.left_chunks is None else policy.left_chunks),
    }


def _smoothed(rows, window: int = 20) -> float:
    tail = [r["loss"] for r in rows[-window:]]
    return sum(tail) / len(tail) if len(tail) == window else float("inf")
