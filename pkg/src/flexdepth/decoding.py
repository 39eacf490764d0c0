"""Auto-regressive inference at any (encoder depth, decoder depth) pair.

The reference path recomputes the full target prefix each step; all
decoder layers cross-attend to the single encoder tap selected by
``enc_layers``, mirroring how the loss grid pairs depths during training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, Corpus, Vocab
from .errors import ConfigError
from .model import ModelParams, decoder_forward, encoder_forward, project_logits
from .tensor import Tensor

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()


@dataclass
class DecodeConfig:
    enc_layers: int
    dec_layers: int
    beam: int = 4
    alpha: float = 0.6
    max_len: int | None = None  # None: source length + 8, capped by the model

    def __post_init__(self):
        if self.beam < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.beam}")


@dataclass
class Hypothesis:
    """A partial or complete output: ids include the terminating EOS if any."""

    ids: list[int] = field(default_factory=list)
    log_prob: float = 0.0
    finished: bool = False


def length_penalty(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha; larger for longer hypotheses when alpha > 0."""
    if length < 1:
        raise ConfigError(f"length penalty needs length >= 1, got {length}")
    return ((5.0 + length) / 6.0) ** alpha


def _validate(params: ModelParams, src_ids, config: DecodeConfig) -> tuple[np.ndarray, int]:
    cfg = params.config
    src = np.asarray(list(src_ids), dtype=np.int64)
    if src.size == 0:
        raise ConfigError("cannot decode an empty source")
    if not 1 <= config.enc_layers <= cfg.encoder_layers:
        raise ConfigError(
            f"enc_layers {config.enc_layers} out of range 1..{cfg.encoder_layers}")
    if not 1 <= config.dec_layers <= cfg.decoder_layers:
        raise ConfigError(
            f"dec_layers {config.dec_layers} out of range 1..{cfg.decoder_layers}")
    max_steps = config.max_len if config.max_len is not None else src.size + 8
    max_steps = min(max_steps, cfg.max_len - 1)  # prefix carries a leading BOS
    if max_steps < 1:
        raise ConfigError("max_len leaves no room to generate")
    return src, max_steps


def _encode_source(params: ModelParams, src: np.ndarray, n: int) -> Tensor:
    with T.no_grad():
        model_input = np.concatenate([src, [EOS_ID]])[None, :]
        return encoder_forward(model_input, n, params).tap(n)


def _last_position_log_probs(params: ModelParams, prefixes: np.ndarray,
                             memory: Tensor, m: int) -> np.ndarray:
    """Log-probabilities of the next token for a batch of equal-length prefixes."""
    with T.no_grad():
        live = prefixes.shape[0]
        tiled = memory if live == 1 else Tensor(np.repeat(memory.data, live, axis=0))
        taps = decoder_forward(prefixes, tiled, m, params)
        last = Tensor(taps.tap(m).data[:, -1:, :])
        logits = project_logits(last, params).data[:, 0, :]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def greedy_decode(params: ModelParams, src_ids, config: DecodeConfig) -> list[int]:
    """Emit the argmax token each step (ties to the lowest id) until EOS."""
    src, max_steps = _validate(params, src_ids, config)
    memory = _encode_source(params, src, config.enc_layers)
    prefix = [BOS_ID]
    out: list[int] = []
    for _ in range(max_steps):
        log_probs = _last_position_log_probs(
            params, np.asarray([prefix]), memory, config.dec_layers)
        token = int(np.argmax(log_probs[0]))
        if token == EOS_ID:
            break
        out.append(token)
        prefix.append(token)
    return out


def beam_decode(params: ModelParams, src_ids, config: DecodeConfig) -> list[int]:
    """Beam search ranked by running log-probability, final pick by
    log-probability over length penalty; all ties resolve to the
    lexicographically smallest id sequence."""
    src, max_steps = _validate(params, src_ids, config)
    memory = _encode_source(params, src, config.enc_layers)

    live: list[Hypothesis] = [Hypothesis()]
    completed: list[Hypothesis] = []

    def penalized(h: Hypothesis) -> float:
        return h.log_prob / length_penalty(len(h.ids), config.alpha)

    for step in range(max_steps):
        prefixes = np.asarray([[BOS_ID] + h.ids for h in live], dtype=np.int64)
        log_probs = _last_position_log_probs(params, prefixes, memory, config.dec_layers)
        candidates = []
        for h, row in zip(live, log_probs):
            for token, lp in enumerate(row):
                candidates.append(Hypothesis(h.ids + [token], h.log_prob + float(lp)))
        candidates.sort(key=lambda h: (-h.log_prob, h.ids))
        kept = candidates[:config.beam]

        live = []
        for h in kept:
            h.finished = h.ids[-1] == EOS_ID or len(h.ids) == max_steps
            (completed if h.finished else live).append(h)
        if not live:
            break
        if completed:
            best_done = max(penalized(h) for h in completed)
            bound = max(
                max(h.log_prob / length_penalty(len(h.ids) + 1, config.alpha) for h in live),
                max(h.log_prob / length_penalty(max_steps, config.alpha) for h in live),
            )
            if bound <= best_done:
                break

    pool = completed if completed else live
    best = min(pool, key=lambda h: (-penalized(h), h.ids))
    ids = best.ids
    return ids[:-1] if ids and ids[-1] == EOS_ID else ids


@dataclass
class DecodeRun:
    """Corpus decode with the clock split the benchmark reports need."""

    translations: list[str]
    seconds_total: float
    seconds_decode: float
    config: DecodeConfig
    sentences: int

    def report(self) -> dict:
        return {
            "n": self.config.enc_layers,
            "m": self.config.dec_layers,
            "beam": self.config.beam,
            "alpha": self.config.alpha,
            "sentences": self.sentences,
            "seconds_total": self.seconds_total,
            "seconds_decode": self.seconds_decode,
        }


def timed_decode_corpus(model, corpus, config: DecodeConfig,
                        vocab: Vocab | str | Path | None = None) -> DecodeRun:
    """Translate every source sentence sequentially on one thread.

    ``seconds_decode`` covers search only; ``seconds_total`` additionally
    covers checkpoint loading, vocabulary I/O, and token (de)indexing.
    ``model`` may be a checkpoint path (its load is then part of the total)
    or an in-memory ``ModelParams``. One untimed warmup sentence runs first.
    """
    sources = corpus.sources() if isinstance(corpus, Corpus) else list(corpus)
    if not sources:
        raise ConfigError("cannot benchmark an empty corpus")

    with threadpool_limits(limits=1):
        start = time.perf_counter()
        if isinstance(model, (str, Path)):
            from .checkpoint import load_checkpoint
            params = load_checkpoint(model)
        else:
            params = model
        if isinstance(vocab, (str, Path)):
            vocab = Vocab.load(vocab)
        if vocab is None:
            raise ConfigError("timed_decode_corpus needs a vocabulary")

        warmup_start = time.perf_counter()
        beam_decode(params, vocab.encode(sources[0].split()), config)
        warmup = time.perf_counter() - warmup_start

        seconds_decode = 0.0
        translations = []
        for sentence in sources:
            ids = vocab.encode(sentence.split())
            tick = time.perf_counter()
            out_ids = beam_decode(params, ids, config)
            seconds_decode += time.perf_counter() - tick
            translations.append(" ".join(vocab.decode(out_ids)))
        seconds_total = time.perf_counter() - start - warmup

    return DecodeRun(translations, seconds_total, seconds_decode, config, len(sources))
