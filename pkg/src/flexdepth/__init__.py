"""flexdepth: train one encoder-decoder model, decode at any layer depth."""

from .data import Corpus, Vocab, batches, build_vocab, generate
from .decoding import DecodeConfig, beam_decode, greedy_decode, length_penalty, timed_decode_corpus
from .errors import ConfigError, IncompatibleCheckpointError
from .estimator import FlexDepthTranslator
from .evaluation import (
    BenchmarkMatrix,
    DecodeSettings,
    corpus_bleu,
    count_params,
    oracle_distribution,
    quality_timing_matrix,
    sentence_bleu,
    step_time_benchmark,
)
from .model import LayerTaps, ModelConfig, ModelParams, encoder_forward, decoder_forward, project_logits
from .tensor import Tensor, backward, no_grad
from .training import LossGrid, TrainConfig, average_checkpoints, gradient_reach, nxm_loss, train, vanilla_loss

__version__ = "0.1.0"

__all__ = [
    "BenchmarkMatrix", "ConfigError", "Corpus", "DecodeConfig", "DecodeSettings",
    "FlexDepthTranslator", "IncompatibleCheckpointError", "LayerTaps", "LossGrid",
    "ModelConfig", "ModelParams", "Tensor", "TrainConfig", "Vocab",
    "average_checkpoints", "backward", "batches", "beam_decode", "build_vocab",
    "corpus_bleu", "count_params", "decoder_forward", "encoder_forward", "generate",
    "gradient_reach", "greedy_decode", "length_penalty", "no_grad", "nxm_loss",
    "oracle_distribution", "project_logits", "quality_timing_matrix", "sentence_bleu",
    "step_time_benchmark", "timed_decode_corpus", "train", "vanilla_loss",
    "__version__",
]
