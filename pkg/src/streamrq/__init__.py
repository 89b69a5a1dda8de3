"""Self-supervised pre-training and chunked streaming CTC recognition for a
Conformer encoder."""

from .chunking import ChunkPolicy, ScheduleConfig, attention_mask, conv_validity, latency_ms
from .ctc import Vocabulary, beam_search, ctc_loss, greedy_decode
from .encoder import ConformerEncoder, EncoderConfig
from .estimators import BestRQPretrainer, CTCRecognizer, LogMelFrontend
from .metrics import wer
from .model import SpeechModel
from .ngram import NgramLm, export_arpa, import_arpa, train_ngram
from .streaming import StreamConfig, open_session

__version__ = "0.1.0"

__all__ = [
    "BestRQPretrainer",
    "CTCRecognizer",
    "ChunkPolicy",
    "ConformerEncoder",
    "EncoderConfig",
    "LogMelFrontend",
    "NgramLm",
    "ScheduleConfig",
    "SpeechModel",
    "StreamConfig",
    "Vocabulary",
    "attention_mask",
    "beam_search",
    "conv_validity",
    "ctc_loss",
    "export_arpa",
    "greedy_decode",
    "import_arpa",
    "latency_ms",
    "open_session",
    "train_ngram",
    "wer",
]
