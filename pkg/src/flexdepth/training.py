"""Training: the per-layer-pair loss grid, the vanilla loss, Adam with the
inverse-square-root warmup schedule, the training loop, and checkpoint
averaging.

``nxm_loss`` computes one loss for every (encoder depth i, decoder depth j)
pair: the encoder is advanced one layer at a time, and for each tap a fresh
decoder sweep runs with every decoder layer cross-attending to that tap.
The aggregate (an unweighted mean unless a weight grid is given) is what
gets back-propagated, so a single set of parameters serves all depth
combinations at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch, Corpus, Vocab, batches
from .errors import ConfigError, IncompatibleCheckpointError
from .model import (
    DropoutSeeds,
    ModelParams,
    causal_mask,
    decoder_layer_forward,
    embed_tokens,
    encoder_layer_forward,
    project_logits,
)
from .tensor import Tensor


@dataclass
class TrainConfig:
    algorithm: str = "nxm"
    steps: int = 1000
    batch_size: int = 32
    base_scale: float = 1.0
    warmup_steps: int = 400
    adam_beta1: float = 0.9
    adam_beta2: float = 0.997
    adam_eps: float = 1e-9
    checkpoint_every: int = 200
    keep_last: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("vanilla", "nxm"):
            raise ConfigError(f"algorithm must be 'vanilla' or 'nxm', got {self.algorithm!r}")
        if self.keep_last < 1:
            raise ConfigError("keep_last must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.steps and self.steps < self.checkpoint_every:
            raise ConfigError("steps must be 0 or >= checkpoint_every")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossGrid:
    """Per-depth-pair losses plus their aggregate (what gets back-propagated)."""

    cells: list[list[Tensor]]
    aggregate: Tensor

    def cell(self, i: int, j: int) -> Tensor:
        return self.cells[i - 1][j - 1]

    @property
    def values(self) -> np.ndarray:
        return np.array([[float(c.data) for c in row] for row in self.cells])


def _attention_masks(batch: Batch):
    src_keys = ~batch.src_pad_mask[:, None, None, :]
    tgt_len = batch.tgt_in_ids.shape[1]
    tgt_self = causal_mask(tgt_len)[None, None] & ~batch.tgt_pad_mask[:, None, None, :]
    return src_keys, tgt_self


def _pair_loss(tap: Tensor, batch: Batch, params: ModelParams) -> Tensor:
    cfg = params.config
    logits = project_logits(tap, params)
    flat = T.reshape(logits, (-1, cfg.vocab_size))
    return T.cross_entropy(flat, batch.tgt_out_ids.reshape(-1), cfg.pad_id, cfg.label_smoothing)


def nxm_loss(params: ModelParams, batch: Batch, seeds: DropoutSeeds | None = None,
             weights: np.ndarray | None = None) -> LossGrid:
    """Loss for every (i, j) depth pair plus their (weighted) mean.

    The encoder is evaluated incrementally (layer i extends the tap for
    layer i-1); the decoder restarts from the embedded target for every
    encoder tap. Cells are summed in (i, j) order so the aggregate is
    bit-reproducible.
    """
    cfg = params.config
    n_enc, n_dec = cfg.encoder_layers, cfg.decoder_layers
    src_keys, tgt_self = _attention_masks(batch)

    enc = embed_tokens(batch.src_ids, params, seeds)
    dec_start = embed_tokens(batch.tgt_in_ids, params, seeds)
    cells: list[list[Tensor]] = [[None] * n_dec for _ in range(n_enc)]
    for i in range(1, n_enc + 1):
        enc = encoder_layer_forward(i, enc, src_keys, params, seeds)
        dec = dec_start
        for j in range(1, n_dec + 1):
            dec = decoder_layer_forward(j, dec, enc, tgt_self, src_keys, params, seeds)
            cells[i - 1][j - 1] = _pair_loss(dec, batch, params)

    if weights is None:
        total = cells[0][0]
        for i in range(n_enc):
            for j in range(n_dec):
                if i == 0 and j == 0:
                    continue
                total = T.add(total, cells[i][j])
        aggregate = T.scale(total, 1.0 / (n_enc * n_dec))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n_enc, n_dec) or (w < 0).any() or w.sum() <= 0:
            raise ConfigError(f"loss weights must be a nonnegative {n_enc}x{n_dec} grid")
        w = w / w.sum()
        aggregate = None
        for i in range(n_enc):
            for j in range(n_dec):
                term = T.scale(cells[i][j], float(w[i, j]))
                aggregate = term if aggregate is None else T.add(aggregate, term)
    return LossGrid(cells, aggregate)


def vanilla_loss(params: ModelParams, batch: Batch,
                 seeds: DropoutSeeds | None = None) -> Tensor:
    """Single loss at the deepest pair: decoder reads the last encoder tap."""
    cfg = params.config
    src_keys, tgt_self = _attention_masks(batch)
    enc = embed_tokens(batch.src_ids, params, seeds)
    for i in range(1, cfg.encoder_layers + 1):
        enc = encoder_layer_forward(i, enc, src_keys, params, seeds)
    dec = embed_tokens(batch.tgt_in_ids, params, seeds)
    for j in range(1, cfg.decoder_layers + 1):
        dec = decoder_layer_forward(j, dec, enc, tgt_self, src_keys, params, seeds)
    return _pair_loss(dec, batch, params)


@dataclass
class GradientReach:
    """Which layers received any nonzero gradient from one isolated cell."""

    encoder: dict[int, bool]
    decoder: dict[int, bool]
    shared: bool


def gradient_reach(params: ModelParams, batch: Batch, keep: tuple[int, int]) -> GradientReach:
    """Back-propagate only cell ``keep`` and report per-layer gradient support."""
    cfg = params.config
    i, j = keep
    if not (1 <= i <= cfg.encoder_layers and 1 <= j <= cfg.decoder_layers):
        raise ConfigError(f"keep={keep} out of range for ({cfg.encoder_layers}, {cfg.decoder_layers})")
    params.zero_grads()
    grid = nxm_loss(params, batch)
    T.backward(grid.cell(i, j))
    encoder = {k: False for k in range(1, cfg.encoder_layers + 1)}
    decoder = {k: False for k in range(1, cfg.decoder_layers + 1)}
    shared = False
    for name, tensor in params.items():
        nonzero = tensor.grad is not None and bool(np.any(tensor.grad != 0))
        side, layer = ModelParams.layer_of(name)
        if side == "encoder":
            encoder[layer] = encoder[layer] or nonzero
        elif side == "decoder":
            decoder[layer] = decoder[layer] or nonzero
        else:
            shared = shared or nonzero
    params.zero_grads()
    return GradientReach(encoder, decoder, shared)


def learning_rate(step: int, d_model: int, base_scale: float, warmup_steps: int) -> float:
    """Inverse-square-root schedule with linear warmup (step is 1-based)."""
    return base_scale * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class AdamOptimizer:
    """Adam with bias correction; one float32 moment pair per parameter."""

    def __init__(self, params: ModelParams, beta1: float = 0.9, beta2: float = 0.997,
                 eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.updates = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        self.updates += 1
        t = self.updates
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                v = self._v[name] = np.zeros_like(p.data)
            m *= b1
            m += (np.float32(1) - b1) * g
            v *= b2
            v += (np.float32(1) - b2) * (g * g)
            m_hat = m / np.float32(1 - self.beta1 ** t)
            v_hat = v / np.float32(1 - self.beta2 ** t)
            np.sqrt(v_hat, out=v_hat)
            v_hat += np.float32(self.eps)
            m_hat /= v_hat
            m_hat *= np.float32(lr)
            p.data -= m_hat


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    log_path: Path | None = None


def train(params: ModelParams, corpus: Corpus, vocab: Vocab, config: TrainConfig,
          out_dir) -> TrainResult:
    """Run ``config.steps`` Adam updates, checkpointing on a ring buffer.

    Fully reproducible from ``config.seed``: batch order, dropout, and the
    optimizer trajectory are deterministic functions of it. The loss log
    gets one ``step<TAB>loss`` line per checkpoint interval.
    """
    cfg = params.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write-probe"
    try:
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise OSError(f"checkpoint directory {out_dir} is not writable: {exc}") from exc

    log_path = out_dir / "loss.log"
    log_path.write_text("")
    result = TrainResult(log_path=log_path)

    optimizer = AdamOptimizer(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    ring: list[Path] = []
    step = 0
    epoch = 0
    while step < config.steps:
        for batch in batches(corpus, vocab, config.batch_size, cfg.max_len,
                             seed=config.seed, shuffle=True, epoch=epoch):
            step += 1
            seeds = DropoutSeeds(config.seed, step) if cfg.dropout > 0 else None
            if config.algorithm == "vanilla":
                loss = vanilla_loss(params, batch, seeds)
            else:
                loss = nxm_loss(params, batch, seeds).aggregate
            loss_value = float(loss.data)
            result.losses.append(loss_value)
            T.backward(loss)
            optimizer.step(learning_rate(step, cfg.d_model, config.base_scale,
                                         config.warmup_steps))
            params.zero_grads()

            if step % config.checkpoint_every == 0:
                path = out_dir / f"checkpoint-{step:08d}.ckpt"
                save_checkpoint(path, params)
                ring.append(path)
                while len(ring) > config.keep_last:
                    ring.pop(0).unlink(missing_ok=True)
                with log_path.open("a", encoding="utf-8") as fh:
                    fh.write(f"{step}\t{loss_value:.6f}\n")
            if step >= config.steps:
                break
        epoch += 1
    result.checkpoints = list(ring)
    return result


def average_checkpoints(paths: list) -> ModelParams:
    """Parameter-wise arithmetic mean of compatible checkpoints."""
    if not paths:
        raise ConfigError("need at least one checkpoint to average")
    loaded = [load_checkpoint(p) for p in paths]
    first = loaded[0]
    reference = first.config.to_dict()
    for other, path in zip(loaded[1:], list(paths)[1:]):
        candidate = other.config.to_dict()
        for key, value in reference.items():
            if candidate[key] != value:
                raise IncompatibleCheckpointError(
                    f"{path} disagrees on {key}: {candidate[key]} != {value}")
    tensors = {}
    for name, tensor in first.items():
        total = np.zeros(tensor.shape, dtype=np.float64)
        for model in loaded:
            other = model.tensor(name)
            if other.shape != tensor.shape:
                raise IncompatibleCheckpointError(f"shape mismatch for {name}")
            total += other.data
        tensors[name] = Tensor((total / len(loaded)).astype(np.float32), requires_grad=True)
    return ModelParams(first.config, tensors)
