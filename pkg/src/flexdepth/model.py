"""Encoder-decoder transformer whose every layer output is exposed as a tap.

Layers are the original post-norm arrangement: residual add then layer
norm after each sublayer. One embedding matrix is shared by the source
side, the target side, and the output projection, so the same projection
("the softmax layer") can score the tap of any decoder layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class ModelConfig:
    encoder_layers: int = 4
    decoder_layers: int = 4
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    max_len: int = 32
    dropout: float = 0.1
    label_smoothing: float = 0.1
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ConfigError("layer counts must be >= 1")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        reserved = (self.pad_id, self.bos_id, self.eos_id)
        if len(set(reserved)) != 3 or max(reserved) >= self.vocab_size:
            raise ConfigError(f"pad/bos/eos ids must be distinct and < vocab_size, got {reserved}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerTaps:
    """Ordered per-layer hidden states; ``tap(i)`` is 1-based like the layers."""

    taps: list[Tensor] = field(default_factory=list)

    def tap(self, index: int) -> Tensor:
        if not 1 <= index <= len(self.taps):
            raise ConfigError(f"tap {index} out of range 1..{len(self.taps)}")
        return self.taps[index - 1]

    def __len__(self) -> int:
        return len(self.taps)

    def __iter__(self):
        return iter(self.taps)


_ATTN_KEYS = ("q", "k", "v", "o")
_NORM_KEYS = ("gain", "bias")
_FFN_KEYS = ("w1", "b1", "w2", "b2")


def _parameter_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = config.d_model, config.d_ff
    layout = [("embedding", (config.vocab_size, d))]

    def attn(prefix):
        return [(f"{prefix}.{k}", (d, d)) for k in _ATTN_KEYS]

    def norm(prefix):
        return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]

    def ffn(prefix):
        return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)),
                (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]

    for i in range(1, config.encoder_layers + 1):
        base = f"encoder.{i}"
        layout += attn(f"{base}.attn") + norm(f"{base}.attn_norm")
        layout += ffn(f"{base}.ffn") + norm(f"{base}.ffn_norm")
    for j in range(1, config.decoder_layers + 1):
        base = f"decoder.{j}"
        layout += attn(f"{base}.self_attn") + norm(f"{base}.self_norm")
        layout += attn(f"{base}.cross_attn") + norm(f"{base}.cross_norm")
        layout += ffn(f"{base}.ffn") + norm(f"{base}.ffn_norm")
    return layout


class ModelParams:
    """All trainable tensors of one model, addressable by dotted name.

    The layout is a pure function of the config, so a model trained with
    the per-layer-pair objective and a vanilla-trained model of the same
    config have byte-compatible checkpoints.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = tensors
        self._groups: dict[str, dict[str, Tensor]] = {}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x9e3779b9)))
        tensors: dict[str, Tensor] = {}
        for name, shape in _parameter_layout(config):
            if name == "embedding":
                data = rng.normal(0.0, config.d_model ** -0.5, size=shape)
            elif name.endswith(".gain"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-limit, limit, size=shape)
            tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        tensors = {name: Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
                   for name, shape in _parameter_layout(config)}
        return cls(config, tensors)

    def tensor(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def embedding(self) -> Tensor:
        return self._tensors["embedding"]

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix``, keyed by their remaining suffix (cached)."""
        cached = self._groups.get(prefix)
        if cached is None:
            skip = len(prefix) + 1
            cached = {name[skip:]: t for name, t in self._tensors.items()
                      if name.startswith(prefix + ".")}
            self._groups[prefix] = cached
        return cached

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def total_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def clone(self) -> "ModelParams":
        tensors = {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.items()}
        return ModelParams(self.config, tensors)

    def truncate(self, n: int, m: int) -> "ModelParams":
        """A physically smaller model from encoder layers 1..n and decoder 1..m."""
        cfg = self.config
        if not (1 <= n <= cfg.encoder_layers and 1 <= m <= cfg.decoder_layers):
            raise ConfigError(
                f"cannot truncate to ({n}, {m}) from ({cfg.encoder_layers}, {cfg.decoder_layers})")
        sub = ModelConfig(**{**cfg.to_dict(), "encoder_layers": n, "decoder_layers": m})
        tensors = {}
        for name, _ in _parameter_layout(sub):
            tensors[name] = Tensor(self._tensors[name].data.copy(), requires_grad=True)
        return ModelParams(sub, tensors)

    @staticmethod
    def layer_of(name: str) -> tuple[str, int | None]:
        """Classify a parameter name: ('encoder', i), ('decoder', j) or ('shared', None)."""
        parts = name.split(".")
        if parts[0] in ("encoder", "decoder"):
            return parts[0], int(parts[1])
        return "shared", None


class DropoutSeeds:
    """Counter-based dropout randomness derived from (seed, step, call index)."""

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)
        self.calls = 0

    def __call__(self) -> np.random.Generator:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(self.seed, self.step, self.calls)))
        self.calls += 1
        return rng


def _maybe_dropout(x: Tensor, rate: float, seeds: DropoutSeeds | None) -> Tensor:
    if seeds is None or rate <= 0.0:
        return x
    return T.dropout(x, rate, seeds())


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Constant sinusoidal position table [length x d_model]."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    dims = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, dims / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table.astype(np.float32)


def _linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply a [in x out] weight over the last axis via one flat matmul."""
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1]))
    out = T.matmul(flat, weight)
    if bias is not None:
        out = T.add(out, bias)
    return T.reshape(out, lead + (weight.shape[-1],))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None,
                         weights: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Scaled dot-product attention over ``heads`` parallel subspaces.

    ``mask`` is boolean with True marking keys that may be attended to; its
    trailing two axes must be (query length, key length). Rows with no
    allowed key fall back to uniform attention (see tensor.softmax).
    """
    b, len_q, d = q.shape
    len_k = k.shape[1]
    if d != config.d_model or k.shape[-1] != config.d_model or v.shape[-1] != config.d_model:
        raise T.ShapeError(f"attention inputs must have width {config.d_model}")
    if mask is not None:
        if mask.shape[-1] != len_k or mask.shape[-2] not in (1, len_q):
            raise T.ShapeError(
                f"attention mask trailing dims {mask.shape} do not match ({len_q}, {len_k})")
        while mask.ndim < 4:
            mask = mask[None]
    heads, d_head = config.heads, config.d_model // config.heads

    def split(x: Tensor, length: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, length, heads, d_head)), (0, 2, 1, 3))

    qh = split(_linear(q, weights["q"]), len_q)
    kh = split(_linear(k, weights["k"]), len_k)
    vh = split(_linear(v, weights["v"]), len_k)

    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    attn = T.softmax(scores, axis=-1, mask=mask)
    mixed = T.matmul(attn, vh)  # [b, heads, len_q, d_head]
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, len_q, d))
    return _linear(merged, weights["o"])


def _feed_forward(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    hidden = T.relu(_linear(x, weights["w1"], weights["b1"]))
    return _linear(hidden, weights["w2"], weights["b2"])


def _residual_norm(x: Tensor, sublayer_out: Tensor, norm: dict[str, Tensor],
                   rate: float, seeds: DropoutSeeds | None) -> Tensor:
    return T.layer_norm(T.add(x, _maybe_dropout(sublayer_out, rate, seeds)),
                        norm["gain"], norm["bias"])


def encoder_layer_forward(i: int, x: Tensor, self_mask: np.ndarray | None,
                          params: ModelParams, seeds: DropoutSeeds | None = None) -> Tensor:
    cfg = params.config
    base = f"encoder.{i}"
    attended = multi_head_attention(x, x, x, self_mask, params.group(f"{base}.attn"), cfg)
    x = _residual_norm(x, attended, params.group(f"{base}.attn_norm"), cfg.dropout, seeds)
    return _residual_norm(x, _feed_forward(x, params.group(f"{base}.ffn")),
                          params.group(f"{base}.ffn_norm"), cfg.dropout, seeds)


def decoder_layer_forward(j: int, x: Tensor, memory: Tensor, self_mask: np.ndarray | None,
                          cross_mask: np.ndarray | None, params: ModelParams,
                          seeds: DropoutSeeds | None = None) -> Tensor:
    cfg = params.config
    base = f"decoder.{j}"
    attended = multi_head_attention(x, x, x, self_mask, params.group(f"{base}.self_attn"), cfg)
    x = _residual_norm(x, attended, params.group(f"{base}.self_norm"), cfg.dropout, seeds)
    crossed = multi_head_attention(x, memory, memory, cross_mask,
                                   params.group(f"{base}.cross_attn"), cfg)
    x = _residual_norm(x, crossed, params.group(f"{base}.cross_norm"), cfg.dropout, seeds)
    return _residual_norm(x, _feed_forward(x, params.group(f"{base}.ffn")),
                          params.group(f"{base}.ffn_norm"), cfg.dropout, seeds)


def _check_ids(ids, config: ModelConfig, what: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise T.ShapeError(f"{what} ids must be [batch x length], got shape {ids.shape}")
    if ids.shape[1] > config.max_len:
        raise ConfigError(f"{what} length {ids.shape[1]} exceeds max_len {config.max_len}")
    if ids.size and ids.max() >= config.vocab_size:
        raise IndexError(f"{what} id {int(ids.max())} out of range [0, {config.vocab_size})")
    return ids


def embed_tokens(ids: np.ndarray, params: ModelParams,
                 seeds: DropoutSeeds | None = None) -> Tensor:
    """Shared-embedding lookup scaled by sqrt(d_model), plus positions."""
    cfg = params.config
    scaled = T.scale(T.embedding(params.embedding, ids), math.sqrt(cfg.d_model))
    positions = Tensor(positional_encoding(ids.shape[1], cfg.d_model)[None])
    return _maybe_dropout(T.add(scaled, positions), cfg.dropout, seeds)


def key_padding_mask(ids: np.ndarray, pad_id: int) -> np.ndarray:
    """[batch x 1 x 1 x keys] boolean, True where the key is a real token."""
    return (np.asarray(ids) != pad_id)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def encoder_forward(src_ids, n: int, params: ModelParams,
                    seeds: DropoutSeeds | None = None,
                    src_pad_mask: np.ndarray | None = None) -> LayerTaps:
    """Run encoder layers 1..n, returning every intermediate tap.

    ``src_pad_mask`` (boolean [batch x length], True where padding) defaults
    to the positions holding ``pad_id``; passing it explicitly keeps the
    attention pattern fixed regardless of what the padded slots contain.
    """
    cfg = params.config
    src_ids = _check_ids(src_ids, cfg, "source")
    if not 1 <= n <= cfg.encoder_layers:
        raise ConfigError(f"encoder depth {n} out of range 1..{cfg.encoder_layers}")
    if src_pad_mask is None:
        self_mask = key_padding_mask(src_ids, cfg.pad_id)
    else:
        self_mask = ~np.asarray(src_pad_mask, dtype=bool)[:, None, None, :]
    x = embed_tokens(src_ids, params, seeds)
    taps = LayerTaps()
    for i in range(1, n + 1):
        x = encoder_layer_forward(i, x, self_mask, params, seeds)
        taps.taps.append(x)
    return taps


def decoder_forward(tgt_ids, enc_tap: Tensor, m: int, params: ModelParams,
                    src_pad_mask: np.ndarray | None = None,
                    seeds: DropoutSeeds | None = None) -> LayerTaps:
    """Run decoder layers 1..m over one encoder tap, returning every tap.

    Self-attention is causal and skips padded target keys; cross-attention
    reads ``enc_tap`` and skips padded source keys via ``src_pad_mask``
    (boolean [batch x source length], True where padding).
    """
    cfg = params.config
    tgt_ids = _check_ids(tgt_ids, cfg, "target")
    if not 1 <= m <= cfg.decoder_layers:
        raise ConfigError(f"decoder depth {m} out of range 1..{cfg.decoder_layers}")
    length = tgt_ids.shape[1]
    self_mask = causal_mask(length)[None, None] & key_padding_mask(tgt_ids, cfg.pad_id)
    cross_mask = None
    if src_pad_mask is not None:
        cross_mask = ~np.asarray(src_pad_mask, dtype=bool)[:, None, None, :]
    x = embed_tokens(tgt_ids, params, seeds)
    taps = LayerTaps()
    for j in range(1, m + 1):
        x = decoder_layer_forward(j, x, enc_tap, self_mask, cross_mask, params, seeds)
        taps.taps.append(x)
    return taps


def project_logits(tap: Tensor, params: ModelParams) -> Tensor:
    """Score a tap against the vocabulary with the shared embedding matrix."""
    if tap.shape[-1] != params.config.d_model:
        raise T.ShapeError(
            f"tap width {tap.shape[-1]} does not match d_model {params.config.d_model}")
    return T.matmul(tap, T.transpose(params.embedding))
