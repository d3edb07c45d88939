import math

import numpy as np
import pytest
from conftest import small_config
from hypothesis import given, settings
from hypothesis import strategies as st

from revlab.model import (
    POS_MODES,
    ModelConfig,
    ModelError,
    all_logprobs,
    batch_loss,
    corpus_nll,
    document_nlls,
    forward_logprobs,
    init_params,
    load_params,
    param_shapes,
    save_params,
    sequence_nll,
    zero_params,
)
from revlab.reparam import ParamMap, apply_param_map
from revlab.seqcore import Corpus
from revlab.tokenizer import char_tokenizer, encode

MODES = [(mode, tie) for mode in POS_MODES for tie in (False, True)]


def flipped(params, cfg):
    return apply_param_map(ParamMap.identity(cfg.vocab_size, flip_positions=True), params, cfg)


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=5, d_model=10, n_heads=3)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=5, pos_mode="sinusoid")
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=5, d_model=6, n_heads=2)  # odd head dim cannot rotate in pairs


def test_param_shapes_follow_options():
    untied = param_shapes(small_config(pos_mode="learned_absolute"))
    assert untied["E"] == (7, 8) and untied["W"] == (7, 8) and untied["P"] == (12, 8)
    tied = param_shapes(small_config(pos_mode="relative_bias", tie=True))
    assert "W" not in tied and "P" not in tied and tied["rel_bias"] == (2, 25)
    assert "blocks.1.mlp.w1" in tied and tied["blocks.1.mlp.w1"] == (8, 32)


def test_init_is_deterministic_and_seed_sensitive():
    cfg = small_config()
    a, b, c = init_params(cfg, 42), init_params(cfg, 42), init_params(cfg, 43)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("mode, tie", MODES)
def test_rows_are_normalized(mode, tie):
    cfg = small_config(pos_mode=mode, tie=tie)
    params = init_params(cfg, 0)
    z = np.random.default_rng(0).integers(0, 7, size=10)
    for direction in ("standard", "mirror"):
        lp = all_logprobs(params, cfg, z, direction)
        lse = np.log(np.exp(lp).sum(axis=1))
        assert np.max(np.abs(lse)) <= 1e-12


@pytest.mark.parametrize("mode, tie", MODES)
def test_single_token_has_nothing_to_predict(mode, tie):
    cfg = small_config(pos_mode=mode, tie=tie)
    params = init_params(cfg, 0)
    for direction in ("standard", "mirror"):
        assert forward_logprobs(params, cfg, [3], direction).shape == (0, 7)
    with pytest.raises(ModelError, match="nothing to predict"):
        sequence_nll(params, cfg, [3])


@pytest.mark.parametrize("mode", POS_MODES)
def test_standard_rows_ignore_the_future(mode):
    cfg = small_config(pos_mode=mode)
    params = init_params(cfg, 1)
    rng = np.random.default_rng(1)
    z = rng.integers(0, 7, size=10)
    for k in range(9):
        w = z.copy()
        w[k + 1 :] = rng.integers(0, 7, size=9 - k)
        a = all_logprobs(params, cfg, z)[: k + 1]
        b = all_logprobs(params, cfg, w)[: k + 1]
        assert np.array_equal(a, b)


@pytest.mark.parametrize("mode", POS_MODES)
def test_mirror_rows_ignore_the_past(mode):
    cfg = small_config(pos_mode=mode)
    params = init_params(cfg, 2)
    rng = np.random.default_rng(2)
    z = rng.integers(0, 7, size=10)
    for k in range(1, 10):
        w = z.copy()
        w[:k] = rng.integers(0, 7, size=k)
        a = all_logprobs(params, cfg, z, "mirror")[k:]
        b = all_logprobs(params, cfg, w, "mirror")[k:]
        assert np.array_equal(a, b)


@pytest.mark.parametrize("mode, tie", MODES)
def test_zero_weights_give_uniform_predictions(mode, tie):
    cfg = small_config(pos_mode=mode, tie=tie)
    params = zero_params(cfg)
    for m in (2, 5, 12):
        z = list(range(m % 7)) + [0] * (m - m % 7)
        for direction in ("standard", "mirror"):
            assert sequence_nll(params, cfg, z, direction) == pytest.approx((m - 1) * math.log(7), abs=1e-12)


@pytest.mark.parametrize("mode, tie", MODES)
def test_mirror_of_reversed_sequence_matches_standard(mode, tie):
    cfg = small_config(pos_mode=mode, tie=tie)
    rng = np.random.default_rng(3)
    for seed in range(4):
        params = init_params(cfg, seed)
        mirror_params = flipped(params, cfg) if mode == "learned_absolute" else params
        z = rng.integers(0, 7, size=int(rng.integers(2, 13)))
        std = all_logprobs(params, cfg, z)
        mir = all_logprobs(mirror_params, cfg, z[::-1], "mirror")
        assert np.max(np.abs(std - mir[::-1])) <= 1e-9
        assert abs(sequence_nll(params, cfg, z) - sequence_nll(mirror_params, cfg, z[::-1], "mirror")) <= 1e-9


def test_absolute_mode_needs_the_flip():
    cfg = small_config(pos_mode="learned_absolute")
    params = init_params(cfg, 0)
    z = [1, 2, 3, 4, 5]
    gap = abs(sequence_nll(params, cfg, z) - sequence_nll(params, cfg, z[::-1], "mirror"))
    assert gap > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=12), st.integers(0, 1000))
def test_nll_is_nonnegative(z, seed):
    cfg = small_config()
    assert sequence_nll(init_params(cfg, seed), cfg, z) >= 0.0


def test_tied_model_uses_embedding_as_output():
    cfg = small_config(tie=True)
    params = init_params(cfg, 5)
    untied_cfg = cfg.replace(tie_embeddings=False)
    untied = dict(params, W=params["E"].copy())
    z = [0, 3, 6, 2, 2, 5]
    assert np.array_equal(all_logprobs(params, cfg, z), all_logprobs(untied, untied_cfg, z))


def test_token_and_length_errors():
    cfg = small_config()
    params = init_params(cfg, 0)
    with pytest.raises(ModelError, match="outside"):
        forward_logprobs(params, cfg, [0, 7])
    with pytest.raises(ModelError, match="max_len"):
        forward_logprobs(params, cfg, [0] * 13)
    with pytest.raises(ModelError):
        forward_logprobs(params, cfg, [0, 1], direction="sideways")


# ---------------------------------------------------------------- corpus level


def test_corpus_nll_examples():
    d = Corpus(("abca", "cb"))
    t = char_tokenizer(d)
    cfg = small_config(vocab_size=t.vocab_size)
    params = init_params(cfg, 0)
    single = Corpus(("abca",))
    assert corpus_nll(params, cfg, t, single) == sequence_nll(params, cfg, encode(t, "abca"))
    assert corpus_nll(params, cfg, t, Corpus(("abca", "abca"))) == pytest.approx(
        corpus_nll(params, cfg, t, single), abs=1e-15
    )
    uniform = zero_params(cfg)
    assert corpus_nll(uniform, cfg, t, d) == pytest.approx((3 + 1) / 2 * math.log(3), abs=1e-12)
    assert document_nlls(uniform, cfg, t, d)[1] == pytest.approx(math.log(3), abs=1e-12)


def test_corpus_nll_errors():
    d = Corpus(("ab", "a"))
    t = char_tokenizer(d)
    cfg = small_config(vocab_size=t.vocab_size)
    params = init_params(cfg, 0)
    with pytest.raises(ModelError, match="document 1"):
        corpus_nll(params, cfg, t, d)
    with pytest.raises(ModelError, match="empty"):
        corpus_nll(params, cfg, t, Corpus(()))
    with pytest.raises(ModelError, match="document 0"):
        corpus_nll(params, cfg, t, Corpus(("az",)))


def test_batch_loss_is_mean_per_predicted_token():
    cfg = small_config()
    params = init_params(cfg, 0)
    seqs = [(0, 1, 2), (3, 4, 5, 6, 0)]
    total = sum(sequence_nll(params, cfg, z) for z in seqs)
    assert batch_loss(params, cfg, seqs) == pytest.approx(total / 6, abs=1e-14)


@pytest.mark.parametrize("mode, tie", MODES)
def test_params_round_trip(tmp_path, mode, tie):
    cfg = small_config(pos_mode=mode, tie=tie)
    params = init_params(cfg, 9)
    bin_path, meta_path = save_params(params, cfg, tmp_path / "theta")
    assert bin_path.suffix == ".bin" and meta_path.suffix == ".json"
    back, back_cfg = load_params(tmp_path / "theta")
    assert back_cfg == cfg
    assert set(back) == set(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
