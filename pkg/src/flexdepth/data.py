"""Synthetic sequence-to-sequence tasks, vocabulary, and batch iteration.

Corpora are plain TSV (``source<TAB>target``, whitespace-tokenized) with a
sidecar JSON echoing the generation parameters. Vocabulary files hold one
content token per line; line number equals token id minus the four
reserved ids (pad=0, bos=1, eos=2, unk=3).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

TASKS = ("copy", "reverse", "sort", "synth_translate")


@dataclass
class Corpus:
    pairs: list[tuple[str, str]]
    task: str = "unknown"
    seed: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[str]:
        return [src for src, _ in self.pairs]

    def targets(self) -> list[str]:
        return [tgt for _, tgt in self.pairs]


def generate(task: str, size: int, len_range: tuple[int, int], vocab_size: int,
             seed: int = 0) -> Corpus:
    """Deterministically generate ``size`` source/target pairs for a task.

    ``vocab_size`` counts the four reserved ids, so the content alphabet has
    ``vocab_size - 4`` tokens. ``synth_translate`` applies a seed-specific
    bijective token substitution and then swaps adjacent positions, which is
    invertible and therefore learnable to near-perfect accuracy.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
    if vocab_size < 5:
        raise ConfigError(f"vocab_size must be >= 5, got {vocab_size}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ConfigError(f"invalid length range {len_range}")
    if size < 1:
        raise ConfigError(f"corpus size must be >= 1, got {size}")

    n_content = vocab_size - 4
    width = max(2, len(str(n_content - 1)))
    alphabet = [f"w{k:0{width}d}" for k in range(n_content)]
    rng = np.random.default_rng(seed)
    substitution = {tok: alphabet[p] for tok, p in zip(alphabet, rng.permutation(n_content))}

    pairs = []
    for _ in range(size):
        length = int(rng.integers(lo, hi + 1))
        tokens = [alphabet[int(t)] for t in rng.integers(0, n_content, size=length)]
        if task == "copy":
            out = tokens
        elif task == "reverse":
            out = tokens[::-1]
        elif task == "sort":
            out = sorted(tokens)
        else:
            out = [substitution[t] for t in tokens]
            for k in range(0, len(out) - 1, 2):
                out[k], out[k + 1] = out[k + 1], out[k]
        pairs.append((" ".join(tokens), " ".join(out)))
    return Corpus(pairs, task=task, seed=seed)


class Vocab:
    """Token/id bijection over content tokens plus the fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        self.token_of = list(RESERVED_TOKENS) + list(tokens)
        self.id_of = {tok: i for i, tok in enumerate(self.token_of)}
        if len(self.id_of) != len(self.token_of):
            raise ConfigError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.token_of)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id_of.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        # ids beyond the table (a model may reserve more slots) render as unk
        return [self.token_of[i] if 0 <= i < len(self.token_of)
                else RESERVED_TOKENS[UNK_ID] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.token_of[4:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.splitlines() if line])


def build_vocab(corpus: Corpus) -> Vocab:
    """Shared source/target vocabulary, sorted after the reserved ids."""
    if not corpus.pairs:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    tokens = set()
    for src, tgt in corpus.pairs:
        tokens.update(src.split())
        tokens.update(tgt.split())
    return Vocab(sorted(tokens))


@dataclass
class Batch:
    """Padded id matrices for one training batch (teacher forcing layout).

    ``tgt_in`` is BOS + tokens and ``tgt_out`` the same tokens shifted left
    with EOS appended; pad only ever appears as a trailing suffix.
    """

    src_ids: np.ndarray
    tgt_in_ids: np.ndarray
    tgt_out_ids: np.ndarray
    src_pad_mask: np.ndarray
    tgt_pad_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]


def _pad_rows(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.ones((len(rows), width), dtype=bool)
    for b, row in enumerate(rows):
        ids[b, :len(row)] = row
        mask[b, :len(row)] = False
    return ids, mask


def batches(corpus: Corpus, vocab: Vocab, batch_size: int, max_len: int,
            seed: int = 0, shuffle: bool = False, epoch: int = 0):
    """Yield every pair exactly once as padded batches (one epoch).

    With ``shuffle`` the order is a deterministic function of
    (seed, epoch). Pairs too long for ``max_len`` (minus room for the
    BOS/EOS sentinels) are rejected with their index.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    encoded = []
    for idx, (src, tgt) in enumerate(corpus.pairs):
        src_tokens, tgt_tokens = src.split(), tgt.split()
        if len(src_tokens) > max_len - 2 or len(tgt_tokens) > max_len - 2:
            raise ConfigError(f"pair {idx} longer than max_len - 2 = {max_len - 2} tokens")
        encoded.append((vocab.encode(src_tokens), vocab.encode(tgt_tokens)))

    order = np.arange(len(encoded))
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, epoch)))
        rng.shuffle(order)

    for start in range(0, len(encoded), batch_size):
        chunk = [encoded[i] for i in order[start:start + batch_size]]
        src_ids, src_pad = _pad_rows([s + [EOS_ID] for s, _ in chunk])
        tgt_in_ids, tgt_pad = _pad_rows([[BOS_ID] + t for _, t in chunk])
        tgt_out_ids, _ = _pad_rows([t + [EOS_ID] for _, t in chunk])
        yield Batch(src_ids, tgt_in_ids, tgt_out_ids, src_pad, tgt_pad)


def save_corpus(corpus: Corpus, path, meta: dict | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for src, tgt in corpus.pairs:
            fh.write(f"{src}\t{tgt}\n")
    sidecar = {"task": corpus.task, "seed": corpus.seed, "pairs": len(corpus.pairs)}
    if meta:
        sidecar.update(meta)
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def load_corpus(path) -> Corpus:
    path = Path(path)
    pairs = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigError(f"{path}:{line_no}: expected 'source<TAB>target'")
        pairs.append((parts[0], parts[1]))
    task, seed = "unknown", 0
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        task = meta.get("task", task)
        seed = meta.get("seed", seed)
    return Corpus(pairs, task=task, seed=seed)
