"""Scikit-learn style wrapper: fit a depth-flexible translator on sentence
pairs, then predict at any (encoder, decoder) depth combination.

Follows the estimator conventions so the model composes with the wider
ecosystem: constructor arguments are stored verbatim, fitted state lives in
trailing-underscore attributes, and ``get_params``/``set_params``/``clone``
work out of the box.
"""

from __future__ import annotations

import tempfile

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Corpus, build_vocab
from .decoding import DecodeConfig, beam_decode
from .errors import ConfigError
from .evaluation import corpus_bleu
from .model import ModelConfig, ModelParams
from .training import TrainConfig, average_checkpoints, train


def _check_sentences(value, name):
    sentences = list(value)
    for idx, sentence in enumerate(sentences):
        if not isinstance(sentence, str):
            raise TypeError(f"{name}[{idx}] must be a whitespace-tokenized string, "
                            f"got {type(sentence).__name__}")
    return sentences


class FlexDepthTranslator(BaseEstimator):
    """Train one encoder-decoder; decode with any (n <= N, m <= M) layers.

    Parameters mirror the library configs: model geometry, optimization
    settings, and the default decode settings used by ``predict``.

    Examples
    --------
    >>> model = FlexDepthTranslator(steps=200, d_model=32, heads=2, d_ff=64)
    >>> model.fit(["a b c", "b c d"], ["a b c", "b c d"])     # doctest: +SKIP
    >>> model.predict(["a b c"], decoder_layers=1)            # doctest: +SKIP
    """

    def __init__(self, encoder_layers=4, decoder_layers=4, d_model=64, heads=4,
                 d_ff=256, max_len=32, dropout=0.1, label_smoothing=0.1,
                 algorithm="nxm", steps=1000, batch_size=32, base_scale=1.0,
                 warmup_steps=400, average_last=5, beam=4, alpha=0.6, seed=0):
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.d_model = d_model
        self.heads = heads
        self.d_ff = d_ff
        self.max_len = max_len
        self.dropout = dropout
        self.label_smoothing = label_smoothing
        self.algorithm = algorithm
        self.steps = steps
        self.batch_size = batch_size
        self.base_scale = base_scale
        self.warmup_steps = warmup_steps
        self.average_last = average_last
        self.beam = beam
        self.alpha = alpha
        self.seed = seed

    def fit(self, X, y):
        """Train on source sentences ``X`` and target sentences ``y``."""
        if y is None:
            raise ValueError("y (target sentences) is required")
        X = _check_sentences(X, "X")
        y = _check_sentences(y, "y")
        if len(X) != len(y):
            raise ValueError(f"X and y lengths differ: {len(X)} vs {len(y)}")
        if not X:
            raise ValueError("at least one sentence pair is required")

        corpus = Corpus(list(zip(X, y)), task="user", seed=self.seed)
        vocab = build_vocab(corpus)
        config = ModelConfig(
            encoder_layers=self.encoder_layers, decoder_layers=self.decoder_layers,
            d_model=self.d_model, heads=self.heads, d_ff=self.d_ff,
            vocab_size=max(len(vocab), 5), max_len=self.max_len,
            dropout=self.dropout, label_smoothing=self.label_smoothing)
        params = ModelParams.initialize(config, seed=self.seed)

        keep = max(1, int(self.average_last))
        train_config = TrainConfig(
            algorithm=self.algorithm, steps=self.steps, batch_size=self.batch_size,
            base_scale=self.base_scale, warmup_steps=self.warmup_steps,
            checkpoint_every=max(1, self.steps // keep) if self.steps else 1,
            keep_last=keep, seed=self.seed)

        with tempfile.TemporaryDirectory(prefix="flexdepth-fit-") as scratch:
            result = train(params, corpus, vocab, train_config, scratch)
            if len(result.checkpoints) > 1:
                params = average_checkpoints(result.checkpoints)

        self.model_params_ = params
        self.model_config_ = config
        self.vocab_ = vocab
        self.loss_history_ = result.losses
        self.n_iter_ = len(result.losses)
        return self

    def predict(self, X, encoder_layers=None, decoder_layers=None, beam=None,
                alpha=None, max_len=None):
        """Translate sentences, optionally at a reduced depth pair."""
        check_is_fitted(self, "model_params_")
        X = _check_sentences(X, "X")
        config = DecodeConfig(
            enc_layers=self.model_config_.encoder_layers if encoder_layers is None else encoder_layers,
            dec_layers=self.model_config_.decoder_layers if decoder_layers is None else decoder_layers,
            beam=self.beam if beam is None else beam,
            alpha=self.alpha if alpha is None else alpha,
            max_len=max_len)
        out = []
        for sentence in X:
            ids = self.vocab_.encode(sentence.split())
            if not ids:
                raise ConfigError("cannot translate an empty sentence")
            out.append(" ".join(self.vocab_.decode(
                beam_decode(self.model_params_, ids, config))))
        return out

    def score(self, X, y, **predict_kwargs):
        """Corpus BLEU of ``predict(X)`` against ``y``, scaled to [0, 1]."""
        check_is_fitted(self, "model_params_")
        y = _check_sentences(y, "y")
        return corpus_bleu(self.predict(X, **predict_kwargs), y).score / 100.0
