"""Quality and cost measurement: BLEU, the depth-pair quality/timing grids,
oracle-translation distribution, parameter accounting, and training step
throughput ratios.
"""

from __future__ import annotations

import json
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, Vocab, batches, build_vocab, generate
from .decoding import DecodeConfig, beam_decode, timed_decode_corpus, threadpool_limits
from .errors import ConfigError
from .model import ModelConfig, ModelParams
from .training import AdamOptimizer, TrainConfig, learning_rate, nxm_loss, vanilla_loss
from . import tensor as T


def worker_count() -> int:
    """Worker cap from FLEXDEPTH_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("FLEXDEPTH_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# BLEU


@dataclass
class BleuScore:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    empty_hypothesis: bool = False


def _tokens(text) -> list[str]:
    parts = text.split() if isinstance(text, str) else list(text)
    return [t.lower() for t in parts]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_matches(hyp: list[str], ref: list[str], n: int) -> tuple[int, int]:
    hyp_counts = _ngrams(hyp, n)
    ref_counts = _ngrams(ref, n)
    matched = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
    return matched, max(0, len(hyp) - n + 1)


def _combine(matched: list[int], total: list[int], hyp_len: int, ref_len: int,
             empty: bool = False) -> BleuScore:
    precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    if hyp_len == 0:
        return BleuScore(0.0, precisions, 0.0, hyp_len, ref_len, empty_hypothesis=True)
    bp = 1.0 if hyp_len >= ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    if any(p == 0.0 for p in precisions):
        return BleuScore(0.0, precisions, bp, hyp_len, ref_len, empty_hypothesis=empty)
    geo = float(np.exp(np.mean([np.log(p) for p in precisions])))
    return BleuScore(bp * geo * 100.0, precisions, bp, hyp_len, ref_len, empty_hypothesis=empty)


def sentence_bleu(hyp, ref, smoothing: str = "none") -> BleuScore:
    """BLEU for one pair; ``smoothing='add1'`` replaces zero n-gram matched
    (or possible) counts with 1, which keeps short or disjoint hypotheses
    comparable for per-sentence ranking."""
    if smoothing not in ("none", "add1"):
        raise ConfigError(f"unknown smoothing {smoothing!r}")
    hyp, ref = _tokens(hyp), _tokens(ref)
    if not ref:
        raise ConfigError("reference must be non-empty")
    matched, total = [], []
    for n in range(1, 5):
        m, t = _clipped_matches(hyp, ref, n)
        if smoothing == "add1" and hyp:
            m, t = m or 1, t or 1
        matched.append(m)
        total.append(t)
    return _combine(matched, total, len(hyp), len(ref), empty=not hyp)


def corpus_bleu(hyps, refs) -> BleuScore:
    """Pool n-gram counts over the corpus before computing precisions."""
    if len(hyps) != len(refs):
        raise ConfigError(f"hypothesis/reference count mismatch: {len(hyps)} vs {len(refs)}")
    if not hyps:
        raise ConfigError("corpus BLEU needs at least one pair")
    matched, total = [0] * 4, [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = _tokens(hyp), _tokens(ref)
        if not ref:
            raise ConfigError("reference must be non-empty")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            m, t = _clipped_matches(hyp, ref, n)
            matched[n - 1] += m
            total[n - 1] += t
    return _combine(matched, total, hyp_len, ref_len)


# ---------------------------------------------------------------------------
# quality / timing matrix


@dataclass
class DecodeSettings:
    beam: int = 4
    alpha: float = 0.6
    max_len: int | None = None

    def for_cell(self, n: int, m: int) -> DecodeConfig:
        return DecodeConfig(enc_layers=n, dec_layers=m, beam=self.beam,
                            alpha=self.alpha, max_len=self.max_len)


@dataclass
class MatrixCell:
    bleu: BleuScore | None = None
    seconds_total: float | None = None
    seconds_decode: float | None = None
    absent: bool = False
    error: str | None = None


@dataclass
class BenchmarkMatrix:
    cells: list[list[MatrixCell]]
    model_tag: str
    sentences: int
    settings: DecodeSettings

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.cells), len(self.cells[0])

    def cell(self, n: int, m: int) -> MatrixCell:
        return self.cells[n - 1][m - 1]

    @property
    def has_errors(self) -> bool:
        return any(c.error for row in self.cells for c in row)

    def _grid(self, getter) -> list[list[float | None]]:
        return [[getter(c) for c in row] for row in self.cells]

    def bleu_grid(self):
        return self._grid(lambda c: c.bleu.score if c.bleu else None)

    def seconds_grid(self, which: str = "decode"):
        key = "seconds_decode" if which == "decode" else "seconds_total"
        return self._grid(lambda c: getattr(c, key))

    def to_csv(self, grid) -> str:
        n_rows, n_cols = self.dims
        lines = ["n\\m," + ",".join(str(m) for m in range(1, n_cols + 1))]
        for n in range(1, n_rows + 1):
            row = grid[n - 1]
            lines.append(str(n) + "," + ",".join(
                "" if v is None else f"{v:.4f}" for v in row))
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        n_rows, n_cols = self.dims
        sections = []
        for title, grid in (("BLEU", self.bleu_grid()),
                            ("seconds_total", self.seconds_grid("total")),
                            ("seconds_decode", self.seconds_grid("decode"))):
            lines = [f"{title} ({self.model_tag}, {self.sentences} sentences)"]
            header = "n\\m".ljust(5) + "".join(f"{m:>9d}" for m in range(1, n_cols + 1))
            lines.append(header)
            for n in range(1, n_rows + 1):
                cells = "".join(
                    f"{v:>9.2f}" if v is not None else f"{'-':>9s}" for v in grid[n - 1])
                lines.append(str(n).ljust(5) + cells)
            sections.append("\n".join(lines))
        return "\n\n".join(sections) + "\n"

    def to_json(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "sentences": self.sentences,
            "beam": self.settings.beam,
            "alpha": self.settings.alpha,
            "bleu": self.bleu_grid(),
            "seconds_total": self.seconds_grid("total"),
            "seconds_decode": self.seconds_grid("decode"),
            "errors": [[c.error for c in row] for row in self.cells],
        }


def quality_timing_matrix(model, corpus: Corpus, vocab: Vocab,
                          settings: DecodeSettings | None = None,
                          vanilla_checkpoints: dict | None = None,
                          dims: tuple[int, int] | None = None) -> BenchmarkMatrix:
    """BLEU and wall-clock for every (n, m) pair over one test corpus.

    With ``vanilla_checkpoints`` (a {(n, m): path} map) each cell decodes
    its own separately trained model; a missing entry leaves the cell
    absent and the run continues.
    """
    settings = settings or DecodeSettings()
    refs = corpus.targets()
    if vanilla_checkpoints is not None:
        if dims is None:
            dims = (max(k[0] for k in vanilla_checkpoints),
                    max(k[1] for k in vanilla_checkpoints))
        tag = "vanilla"
    else:
        params = model if isinstance(model, ModelParams) else None
        if params is None:
            from .checkpoint import read_header
            cfg = ModelConfig.from_dict(read_header(model)["config"])
        else:
            cfg = params.config
        dims = (cfg.encoder_layers, cfg.decoder_layers)
        tag = "nxm"

    rows = []
    for n in range(1, dims[0] + 1):
        row = []
        for m in range(1, dims[1] + 1):
            if vanilla_checkpoints is not None:
                source = vanilla_checkpoints.get((n, m))
                if source is None:
                    row.append(MatrixCell(absent=True))
                    continue
            else:
                source = model
            try:
                run = timed_decode_corpus(source, corpus, settings.for_cell(n, m), vocab)
                bleu = corpus_bleu(run.translations, refs)
                row.append(MatrixCell(bleu, run.seconds_total, run.seconds_decode))
            except Exception as exc:  # cell failure must not sink the grid
                row.append(MatrixCell(error=f"{type(exc).__name__}: {exc}"))
        rows.append(row)
    return BenchmarkMatrix(rows, tag, len(corpus), settings)


# ---------------------------------------------------------------------------
# oracle distribution


@dataclass
class OracleDistribution:
    counts: np.ndarray
    total: int

    def to_json(self) -> dict:
        return {"counts": self.counts.tolist(), "total": self.total}

    def to_csv(self) -> str:
        n_rows, n_cols = self.counts.shape
        lines = ["n\\m," + ",".join(str(m) for m in range(1, n_cols + 1))]
        for n in range(1, n_rows + 1):
            lines.append(str(n) + "," + ",".join(str(int(v)) for v in self.counts[n - 1]))
        return "\n".join(lines) + "\n"


def translate_corpus(params: ModelParams, corpus: Corpus, vocab: Vocab,
                     config: DecodeConfig) -> list[str]:
    out = []
    for source in corpus.sources():
        ids = beam_decode(params, vocab.encode(source.split()), config)
        out.append(" ".join(vocab.decode(ids)))
    return out


def oracle_distribution(model, corpus: Corpus, vocab: Vocab,
                        settings: DecodeSettings | None = None) -> OracleDistribution:
    """Count, per (n, m), the sentences that pair translates best.

    Per-sentence quality is add1-smoothed sentence BLEU; ties go to the
    cheaper configuration, smaller m first (the decoder dominates cost),
    then smaller n.
    """
    settings = settings or DecodeSettings()
    if isinstance(model, (str, Path)):
        from .checkpoint import load_checkpoint
        model = load_checkpoint(model)
    cfg = model.config
    n_enc, n_dec = cfg.encoder_layers, cfg.decoder_layers

    cells = [(n, m) for n in range(1, n_enc + 1) for m in range(1, n_dec + 1)]

    def job(cell):
        n, m = cell
        return translate_corpus(model, corpus, vocab, settings.for_cell(n, m))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            translations = dict(zip(cells, pool.map(job, cells)))
    else:
        translations = {cell: job(cell) for cell in cells}

    refs = corpus.targets()
    counts = np.zeros((n_enc, n_dec), dtype=np.int64)
    for idx, ref in enumerate(refs):
        best_cell, best_score = None, -1.0
        for n, m in sorted(cells, key=lambda c: (c[1], c[0])):  # cheapest first
            score = sentence_bleu(translations[(n, m)][idx], ref, smoothing="add1").score
            if score > best_score:
                best_cell, best_score = (n, m), score
        counts[best_cell[0] - 1, best_cell[1] - 1] += 1
    return OracleDistribution(counts, len(refs))


# ---------------------------------------------------------------------------
# parameter accounting


def count_params(config: ModelConfig, with_optimizer_state: bool = False) -> int:
    """Closed-form count of trainable scalars (shared embedding counted once).

    ``with_optimizer_state`` also counts the two Adam moment slots per
    scalar (3x), matching how training-toolkit checkpoints report totals.
    """
    d, f = config.d_model, config.d_ff
    embedding = config.vocab_size * d
    ffn = d * f + f + f * d + d
    enc_layer = 4 * d * d + ffn + 2 * 2 * d
    dec_layer = 8 * d * d + ffn + 3 * 2 * d
    total = embedding + config.encoder_layers * enc_layer + config.decoder_layers * dec_layer
    return total * 3 if with_optimizer_state else total


def subsumed_vs_single_ratio(config: ModelConfig) -> dict:
    """Parameters of all (n, m) truncations trained separately vs the one model."""
    single = count_params(config)
    combos = []
    for n in range(1, config.encoder_layers + 1):
        for m in range(1, config.decoder_layers + 1):
            sub = ModelConfig(**{**config.to_dict(),
                                 "encoder_layers": n, "decoder_layers": m})
            combos.append(count_params(sub))
    total = sum(combos)
    return {"single": single, "subsumed_total": total, "ratio": total / single}


# ---------------------------------------------------------------------------
# training-step throughput


@dataclass
class StepTimeReport:
    model: dict
    batches: int
    batch_size: int
    seconds_nxm: float
    seconds_vanilla: float
    seconds_truncated: dict = field(default_factory=dict)  # "n,m" -> seconds
    r_nxm: float = 0.0
    r_sum: float = 0.0

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "batches": self.batches,
            "batch_size": self.batch_size,
            "seconds_nxm": self.seconds_nxm,
            "seconds_vanilla": self.seconds_vanilla,
            "seconds_truncated": self.seconds_truncated,
            "r_nxm": self.r_nxm,
            "r_sum": self.r_sum,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "StepTimeReport":
        return cls(**payload)


def _mean_step_seconds(config: ModelConfig, corpus: Corpus, vocab: Vocab,
                       train_config: TrainConfig, algorithm: str, steps: int) -> float:
    params = ModelParams.initialize(config, seed=train_config.seed)
    optimizer = AdamOptimizer(params, train_config.adam_beta1, train_config.adam_beta2,
                              train_config.adam_eps)
    batch = next(batches(corpus, vocab, train_config.batch_size, config.max_len,
                         seed=train_config.seed))

    def one_step(step):
        if algorithm == "vanilla":
            loss = vanilla_loss(params, batch)
        else:
            loss = nxm_loss(params, batch).aggregate
        T.backward(loss)
        optimizer.step(learning_rate(step, config.d_model, train_config.base_scale,
                                     train_config.warmup_steps))
        params.zero_grads()

    one_step(1)  # warmup, untimed
    tick = time.perf_counter()
    for step in range(2, steps + 2):
        one_step(step)
    return (time.perf_counter() - tick) / steps


def step_time_benchmark(model_config: ModelConfig, train_config: TrainConfig,
                        n_batches: int) -> StepTimeReport:
    """Mean step wall-clock for grid training, vanilla training, and every
    truncated vanilla model; reports the two cost ratios."""
    if n_batches < 10:
        raise ConfigError(f"need at least 10 measured batches, got {n_batches}")
    corpus = generate("copy", max(64, train_config.batch_size),
                      (2, model_config.max_len - 2), model_config.vocab_size,
                      seed=train_config.seed)
    vocab = build_vocab(corpus)

    with threadpool_limits(limits=1):
        seconds_nxm = _mean_step_seconds(model_config, corpus, vocab, train_config,
                                         "nxm", n_batches)
        seconds_vanilla = _mean_step_seconds(model_config, corpus, vocab, train_config,
                                             "vanilla", n_batches)
        truncated = {}
        for n in range(1, model_config.encoder_layers + 1):
            for m in range(1, model_config.decoder_layers + 1):
                sub = ModelConfig(**{**model_config.to_dict(),
                                     "encoder_layers": n, "decoder_layers": m})
                truncated[f"{n},{m}"] = _mean_step_seconds(
                    sub, corpus, vocab, train_config, "vanilla", n_batches)

    report = StepTimeReport(
        model=model_config.to_dict(),
        batches=n_batches,
        batch_size=train_config.batch_size,
        seconds_nxm=seconds_nxm,
        seconds_vanilla=seconds_vanilla,
        seconds_truncated=truncated,
        r_nxm=seconds_nxm / seconds_vanilla,
        r_sum=sum(truncated.values()) / seconds_vanilla,
    )
    return report
