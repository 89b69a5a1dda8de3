"""Everything a checkpoint carries: encoder, optional pre-training head and
quantizer, optional CTC probe with its vocabulary."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .bestrq import Quantizer, QuantizerConfig, classifier_head
from .ctc import Probe, ProbeConfig, Vocabulary
from .encoder import PRESETS, ConformerEncoder, EncoderConfig
from .tensor import ConfigError


class NotFinetunedError(RuntimeError):
    """The checkpoint has no CTC probe."""


class SpeechModel:
    def __init__(self, enc_cfg: EncoderConfig, seed: int = 0):
        self.encoder = ConformerEncoder(enc_cfg, seed=seed)
        self.seed = seed
        self.quantizer: Quantizer | None = None
        self.head: nn.Linear | None = None
        self.probe: Probe | None = None
        self.vocab: Vocabulary | None = None
        self.meta: dict = {}

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def attach_pretraining(self, qcfg: QuantizerConfig) -> None:
        self.quantizer = Quantizer(qcfg)
        self.head = classifier_head(self.cfg.d_model, qcfg.codebook_size, seed=self.seed + 1)

    def attach_probe(self, vocab: Vocabulary, pcfg: ProbeConfig = ProbeConfig()) -> None:
        self.vocab = vocab
        self.probe = Probe(self.cfg.d_model, len(vocab), pcfg, seed=self.seed + 2)

    def require_probe(self) -> None:
        if self.probe is None or self.vocab is None:
            raise NotFinetunedError("checkpoint has no CTC probe; run finetune first")

    def train(self, mode: bool = True) -> "SpeechModel":
        for m in (self.encoder, self.head, self.probe):
            if m is not None:
                m.train(mode)
        return self

    def eval(self) -> "SpeechModel":
        return self.train(False)

    def config_dict(self) -> dict:
        return {
            "encoder": self.cfg.to_dict(),
            "preset": next((k for k, v in PRESETS.items() if v == self.cfg), "custom"),
            "seed": self.seed,
            "quantizer": asdict(self.quantizer.cfg) if self.quantizer else None,
            "probe": asdict(self.probe.cfg) if self.probe else None,
            "vocab": self.vocab.tokens[1:] if self.vocab else None,
            "meta": self.meta,
        }

    def tensors(self) -> dict:
        out = {f"encoder.{k}": v.detach().numpy() for k, v in self.encoder.state_dict().items()}
        if self.head is not None:
            out.update({f"head.{k}": v.detach().numpy() for k, v in self.head.state_dict().items()})
        if self.quantizer is not None:
            out["quantizer.projection"] = self.quantizer.projection
            out["quantizer.codebook"] = self.quantizer.codebook
        if self.probe is not None:
            out.update({f"probe.{k}": v.detach().numpy() for k, v in self.probe.state_dict().items()})
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.config_dict(), self.tensors())

    @classmethod
    def load(cls, path) -> "SpeechModel":
        config, tensors = checkpoint.load(path)
        try:
            enc_cfg = EncoderConfig(**config["encoder"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise checkpoint.CheckpointError(f"invalid encoder config: {exc}") from None
        model = cls(enc_cfg, seed=config.get("seed", 0))
        model.meta = config.get("meta", {})
        _load_into(model.encoder, tensors, "encoder.")
        if config.get("quantizer"):
            qcfg = QuantizerConfig(**config["quantizer"])
            _require(tensors, ["quantizer.projection", "quantizer.codebook"])
            model.quantizer = Quantizer.from_arrays(qcfg, tensors["quantizer.projection"],
                                                    tensors["quantizer.codebook"])
            model.head = nn.Linear(enc_cfg.d_model, qcfg.codebook_size)
            _load_into(model.head, tensors, "head.")
        if config.get("probe"):
            vocab = Vocabulary(config["vocab"])
            model.vocab = vocab
            model.probe = Probe(enc_cfg.d_model, len(vocab), ProbeConfig(**config["probe"]))
            _load_into(model.probe, tensors, "probe.")
        return model.eval()


def _require(tensors: dict, names) -> None:
    missing = [n for n in names if n not in tensors]
    if missing:
        raise checkpoint.MissingTensorError(f"checkpoint lacks tensors: {', '.join(missing)}")


def _load_into(module: nn.Module, tensors: dict, prefix: str) -> None:
    keys = list(module.state_dict())
    _require(tensors, [prefix + k for k in keys])
    state = {k: torch.from_numpy(np.array(tensors[prefix + k])) for k in keys}
    module.load_state_dict(state)
