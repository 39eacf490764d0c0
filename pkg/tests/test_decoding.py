import numpy as np
import pytest

from flexdepth.data import EOS_ID, build_vocab, generate
from flexdepth.decoding import (
    DecodeConfig,
    beam_decode,
    greedy_decode,
    length_penalty,
    timed_decode_corpus,
)
from flexdepth.checkpoint import save_checkpoint
from flexdepth.errors import ConfigError
from flexdepth.model import ModelConfig, ModelParams
from oracles import enumerate_best_sequence, sequence_log_prob


def eos_rigged_params():
    """All-zero weights except a bias channel that makes EOS win every step."""
    config = ModelConfig(encoder_layers=1, decoder_layers=1, d_model=8, heads=2,
                         d_ff=16, vocab_size=9, max_len=12, dropout=0.0)
    params = ModelParams.zeros(config)
    params.tensor("decoder.1.ffn_norm.bias").data[0] = 1.0
    params.tensor("embedding").data[EOS_ID, 0] = 5.0
    return params


class TestLengthPenalty:
    def test_length_one_is_unity(self):
        for alpha in (0.0, 0.3, 0.6, 1.0):
            assert length_penalty(1, alpha) == 1.0

    def test_zero_alpha_is_unity(self):
        for length in (1, 4, 9, 50):
            assert length_penalty(length, 0.0) == 1.0

    def test_scalar_value(self):
        assert length_penalty(7, 0.6) == pytest.approx(2 ** 0.6, rel=1e-12)

    def test_length_zero_rejected(self):
        with pytest.raises(ConfigError):
            length_penalty(0, 0.6)


class TestGreedy:
    def test_eos_rigged_model_emits_nothing(self):
        params = eos_rigged_params()
        out = greedy_decode(params, [4, 5, 6], DecodeConfig(enc_layers=1, dec_layers=1))
        assert out == []

    def test_empty_source_rejected(self, tiny_params):
        with pytest.raises(ConfigError):
            greedy_decode(tiny_params, [], DecodeConfig(enc_layers=1, dec_layers=1))

    def test_depth_out_of_range(self, tiny_params):
        with pytest.raises(ConfigError):
            greedy_decode(tiny_params, [4], DecodeConfig(enc_layers=7, dec_layers=1))

    def test_respects_length_cap(self, tiny_params):
        out = greedy_decode(tiny_params, [4, 5], DecodeConfig(enc_layers=2, dec_layers=2,
                                                              max_len=3))
        assert len(out) <= 3

    def test_ties_break_to_lowest_id(self, tiny_config):
        # all-zero weights make every logit equal, so each step is a total tie
        params = ModelParams.zeros(tiny_config)
        out = greedy_decode(params, [4, 5], DecodeConfig(enc_layers=2, dec_layers=2,
                                                         max_len=4))
        assert out == [0, 0, 0, 0]
        assert beam_decode(params, [4, 5], DecodeConfig(enc_layers=2, dec_layers=2,
                                                        beam=1, max_len=4)) == out
        # a wider beam keeps the tied EOS candidate and discovers that the
        # shortest sequence maximizes total log-probability
        wide = beam_decode(params, [4, 5], DecodeConfig(enc_layers=2, dec_layers=2,
                                                        beam=3, alpha=0.0, max_len=4))
        assert wide == []


class TestBeam:
    def test_beam_one_equals_greedy(self):
        for seed in range(4):
            config = ModelConfig(encoder_layers=2, decoder_layers=2, d_model=16, heads=2,
                                 d_ff=32, vocab_size=11, max_len=14, dropout=0.0)
            params = ModelParams.initialize(config, seed=seed)
            src = list(np.random.default_rng(seed).integers(4, 11, size=5))
            for alpha in (0.0, 0.6):
                dc = DecodeConfig(enc_layers=2, dec_layers=2, beam=1, alpha=alpha)
                assert beam_decode(params, src, dc) == greedy_decode(params, src, dc)

    def test_deterministic(self, tiny_params):
        dc = DecodeConfig(enc_layers=2, dec_layers=2, beam=3, alpha=0.6)
        a = beam_decode(tiny_params, [4, 5, 6], dc)
        b = beam_decode(tiny_params, [4, 5, 6], dc)
        assert a == b

    def test_matches_exhaustive_enumeration_on_tiny_models(self):
        hits = 0
        for seed in range(6):
            config = ModelConfig(encoder_layers=1, decoder_layers=1, d_model=8, heads=2,
                                 d_ff=16, vocab_size=5, max_len=8, dropout=0.0)
            params = ModelParams.initialize(config, seed=100 + seed)
            src = [4, 3, 4]
            dc = DecodeConfig(enc_layers=1, dec_layers=1, beam=5, alpha=0.0, max_len=4)
            got = beam_decode(params, src, dc)
            want = enumerate_best_sequence(params, src, dc)
            assert got == want, f"seed {seed}: {got} != {want}"
            hits += 1
        assert hits == 6

    def test_beam_never_scores_below_greedy(self):
        for seed in range(5):
            config = ModelConfig(encoder_layers=2, decoder_layers=2, d_model=16, heads=2,
                                 d_ff=32, vocab_size=9, max_len=12, dropout=0.0)
            params = ModelParams.initialize(config, seed=50 + seed)
            src = [4, 5, 6, 7]
            dc = DecodeConfig(enc_layers=2, dec_layers=2, beam=4, alpha=0.6)

            def penalized(seq):
                full = seq + [EOS_ID] if len(seq) < (len(src) + 8) else seq
                score = sequence_log_prob(params, src, full, 2, 2)
                return score / length_penalty(len(full), dc.alpha)

            beam_out = beam_decode(params, src, dc)
            greedy_out = greedy_decode(params, src, dc)
            assert penalized(beam_out) >= penalized(greedy_out) - 1e-6


class TestFlexibleDepthEquivalence:
    def test_truncated_copy_decodes_identically(self, tiny_params):
        src = [4, 5, 6, 7, 8]
        for n in (1, 2):
            for m in (1, 2):
                dc = DecodeConfig(enc_layers=n, dec_layers=m, beam=4, alpha=0.6)
                full = beam_decode(tiny_params, src, dc)
                small = tiny_params.truncate(n, m)
                sub = beam_decode(small, src, DecodeConfig(enc_layers=n, dec_layers=m,
                                                           beam=4, alpha=0.6))
                assert full == sub, (n, m)


@pytest.fixture(scope="module")
def trained_free_setup():
    config = ModelConfig(encoder_layers=2, decoder_layers=2, d_model=16, heads=2,
                         d_ff=32, vocab_size=13, max_len=12, dropout=0.0)
    params = ModelParams.initialize(config, seed=31)
    corpus = generate("copy", 24, (3, 6), config.vocab_size, seed=8)
    vocab = build_vocab(corpus)
    return params, corpus, vocab


class TestTimedDecode:
    def test_counts_and_clock_split(self, trained_free_setup):
        params, corpus, vocab = trained_free_setup
        run = timed_decode_corpus(params, corpus, DecodeConfig(2, 2, beam=2), vocab)
        assert len(run.translations) == len(corpus)
        assert 0 < run.seconds_decode <= run.seconds_total
        report = run.report()
        assert report["n"] == 2 and report["m"] == 2 and report["sentences"] == len(corpus)

    def test_checkpoint_path_is_timed_in_total(self, trained_free_setup, tmp_path):
        params, corpus, vocab = trained_free_setup
        path = save_checkpoint(tmp_path / "m.ckpt", params)
        vocab_path = tmp_path / "vocab.txt"
        vocab.save(vocab_path)
        run = timed_decode_corpus(path, corpus, DecodeConfig(2, 2, beam=2), vocab_path)
        assert len(run.translations) == len(corpus)
        assert run.seconds_total > run.seconds_decode

    def test_decoder_depth_dominates_decode_time(self, trained_free_setup):
        params, corpus, vocab = trained_free_setup
        shallow = timed_decode_corpus(params, corpus, DecodeConfig(2, 1, beam=2), vocab)
        deep = timed_decode_corpus(params, corpus, DecodeConfig(2, 2, beam=2), vocab)
        assert deep.seconds_decode > shallow.seconds_decode

    def test_empty_corpus_rejected(self, trained_free_setup):
        params, _, vocab = trained_free_setup
        with pytest.raises(ConfigError):
            timed_decode_corpus(params, [], DecodeConfig(2, 2), vocab)
