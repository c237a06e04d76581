"""Model assembly: embeddings, windowing, dropout sites, loss, sizing."""

import math

import numpy as np
import pytest

from moglm import cells, model, numerics as nm
from moglm.errors import ConfigError, DataError, DimensionError
from moglm.model import DropoutMasks, LanguageModel, ModelConfig


def small_config(**kw):
    base = dict(depth=1, hidden_size=4, vocab_size=5, tie_embeddings=True)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# embed


def test_embed_without_dropout_returns_rows():
    table = nm.parameter(np.arange(15, dtype=np.float64).reshape(5, 3))
    out = model.embed(np.array([[1, 4], [0, 2]]), table)
    np.testing.assert_array_equal(out[0].data, table.data[[1, 4]])
    np.testing.assert_array_equal(out[1].data, table.data[[0, 2]])


def test_embed_zeroed_mask_row_blanks_embedding():
    table = nm.parameter(np.ones((5, 3)))
    mask = nm.constant(np.array([[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]]))
    out = model.embed(np.array([[1, 2]]), table, mask)
    np.testing.assert_array_equal(out[0].data, [[0, 0, 0], [2, 2, 2]])


def test_embed_out_of_range_id():
    table = nm.parameter(np.ones((5, 3)))
    with pytest.raises(DataError):
        model.embed(np.array([[7]]), table)


def test_tied_output_shares_embedding_storage():
    lm = LanguageModel(small_config(), nm.Rng(0), dtype=np.float64)
    tokens = np.array([[1]])
    states = lm.initial_state(1)
    before, _ = lm.forward_window(tokens, states)
    lm.embedding.data[2, :] += 1.0  # perturb a row: logits must move
    after, _ = lm.forward_window(tokens, lm.initial_state(1))
    assert not np.allclose(before.array(), after.array())
    assert lm.output_matrix() is lm.embedding


# ---------------------------------------------------------------------------
# forward_window


def manual_unroll(lm, tokens, states):
    """Per-step reference chain for depth-1, no-dropout models."""
    outs = []
    st = states[0]
    for t in range(tokens.shape[0]):
        x = nm.embedding_lookup(lm.embedding, tokens[t])
        st = cells.cell_forward(lm.config.cell_kind, x, st, lm.layers[0])
        logits = nm.affine(lm.output_matrix(), st.h, lm.output_bias)
        outs.append(logits.data)
    return np.stack(outs)


def test_forward_window_matches_manual_chain():
    lm = LanguageModel(small_config(), nm.Rng(1), dtype=np.float64)
    tokens = nm.Rng(2).integers(0, 5, shape=(6, 3))
    got, _ = lm.forward_window(tokens, lm.initial_state(3))
    want = manual_unroll(lm, tokens, lm.initial_state(3))
    np.testing.assert_allclose(got.array(), want, rtol=1e-14)


def test_windowing_consistency_split_vs_full():
    lm = LanguageModel(small_config(depth=2, hidden_size=6), nm.Rng(3), dtype=np.float64)
    tokens = nm.Rng(4).integers(0, 5, shape=(6, 2))
    full, _ = lm.forward_window(tokens, lm.initial_state(2))

    states = lm.initial_state(2)
    parts = []
    for chunk in (tokens[:3], tokens[3:]):
        logits, states = lm.forward_window(chunk, states)
        states = lm.detach_states(states)
        parts.append(logits.array())
    split = np.concatenate(parts, axis=0)
    assert np.max(np.abs(split - full.array())) < 1e-10


def test_zero_length_window_rejected():
    lm = LanguageModel(small_config(), nm.Rng(5))
    with pytest.raises(DimensionError):
        lm.forward_window(np.zeros((0, 2), dtype=int), lm.initial_state(2))


def test_state_depth_mismatch_rejected():
    lm = LanguageModel(small_config(depth=2), nm.Rng(6))
    with pytest.raises(DimensionError):
        lm.forward_window(np.zeros((1, 2), dtype=int), lm.initial_state(2)[:1])


def test_dropout_off_ignores_mask_argument():
    lm = LanguageModel(small_config(), nm.Rng(7), dtype=np.float64)
    tokens = np.array([[0, 1], [2, 3]])
    masks = model.sample_masks(lm.config, 2, nm.Rng(8).substream("drop"), np.float64)
    a, _ = lm.forward_window(tokens, lm.initial_state(2))
    b, _ = lm.forward_window(tokens, lm.initial_state(2), masks)
    np.testing.assert_array_equal(a.array(), b.array())
    assert masks.input is None and masks.output is None


def test_variational_masks_reused_every_step():
    cfg = small_config(depth=2, hidden_size=5, state_dropout=0.5, input_dropout=0.3,
                       inter_layer_dropout=0.4, output_dropout=0.2)
    lm = LanguageModel(cfg, nm.Rng(9), dtype=np.float64)
    B, T = 3, 4
    masks = model.sample_masks(cfg, B, nm.Rng(10).substream("drop"), np.float64)
    tokens = nm.Rng(11).integers(0, 5, shape=(T, B))
    got, _ = lm.forward_window(tokens, lm.initial_state(B), masks)

    # Reference chain applying the same per-window masks at every step.
    states = lm.initial_state(B)
    want = []
    for t in range(T):
        x = nm.hadamard(nm.embedding_lookup(lm.embedding, tokens[t]), masks.input)
        for layer, w in enumerate(lm.layers):
            prev = states[layer]
            h_in = nm.hadamard(prev.h, masks.state[layer])
            out = cells.cell_forward(cfg.cell_kind, x, cells.CellState(prev.c, h_in), w)
            states[layer] = out
            x = out.h
            if layer < cfg.depth - 1:
                x = nm.hadamard(x, masks.inter[layer])
        top = nm.hadamard(x, masks.output)
        want.append(nm.affine(lm.output_matrix(), top, lm.output_bias).data)
    np.testing.assert_allclose(got.array(), np.stack(want), rtol=1e-14)


def test_mask_entries_are_zero_or_inverted_keep():
    cfg = small_config(state_dropout=0.25)
    masks = model.sample_masks(cfg, 64, nm.Rng(12).substream("drop"), np.float64)
    vals = np.unique(masks.state[0].data)
    assert set(np.round(vals, 12)) <= {0.0, round(1 / 0.75, 12)}


def test_projection_applied_when_ratio_below_one():
    cfg = small_config(hidden_size=8, input_embedding_ratio=0.5)
    lm = LanguageModel(cfg, nm.Rng(13), dtype=np.float64)
    assert cfg.embedding_size() == 4
    assert lm.projection is not None and lm.projection.shape == (4, 8)
    logits, _ = lm.forward_window(np.array([[1, 2]]), lm.initial_state(2))
    assert logits.array().shape == (1, 2, 5)


# ---------------------------------------------------------------------------
# loss and metrics


def test_loss_uniform_logits_is_log_vocab():
    logits = model.Logits([nm.constant(np.zeros((3, 7))), nm.constant(np.zeros((3, 7)))])
    targets = np.array([[0, 1, 2], [3, 4, 5]])
    assert model.loss(logits, targets).item() == pytest.approx(math.log(7), rel=1e-12)


def test_loss_temperature_equals_prescaled_logits():
    rng = nm.Rng(14)
    raw = rng.uniform(-2, 2, shape=(4, 6))
    targets = np.array([[0, 5, 2, 3]])
    a = model.loss(model.Logits([nm.constant(raw)]), targets, temperature=2.5).item()
    b = model.loss(model.Logits([nm.constant(raw / 2.5)]), targets, temperature=1.0).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_two_class_hand_value():
    logits = model.Logits([nm.constant(np.array([[math.log(3.0), 0.0]]))])
    got = model.loss(logits, np.array([[0]])).item()
    assert got == pytest.approx(-math.log(0.75), abs=1e-10)


def test_loss_rejects_nonpositive_temperature():
    logits = model.Logits([nm.constant(np.zeros((1, 2)))])
    with pytest.raises(ConfigError):
        model.loss(logits, np.array([[0]]), temperature=0.0)


def test_loss_tends_to_log_vocab_at_high_temperature():
    rng = nm.Rng(15)
    logits = model.Logits([nm.constant(rng.uniform(-3, 3, shape=(5, 9)))])
    targets = rng.integers(0, 9, shape=(1, 5))
    hot = model.loss(logits, targets, temperature=1e7).item()
    assert hot == pytest.approx(math.log(9), abs=1e-5)


def test_metrics_conversions():
    assert model.metrics(0.0) == {"perplexity": 1.0, "bits_per_character": 0.0}
    m = model.metrics(4.02163)
    assert abs(m["perplexity"] - 55.80) <= 0.01
    m2 = model.metrics(0.80641)
    assert abs(m2["bits_per_character"] - 1.1634) <= 0.0001


# ---------------------------------------------------------------------------
# parameter counting and sizing


def test_parameter_count_minimal_untied_registry():
    # depth 1, untied, V=2, e=n=1, r=0:
    #   embedding 2x1 = 2; four gates 4*(1+1) = 8 plus biases 4 -> 12;
    #   output embedding 2x1 = 2; output bias 2. Total 18.
    cfg = ModelConfig(depth=1, hidden_size=1, vocab_size=2, tie_embeddings=False)
    assert model.parameter_count(cfg) == 18
    lm = LanguageModel(cfg, nm.Rng(16))
    assert lm.params.total_size() == 18


def test_parameter_count_matches_built_model():
    cfg = ModelConfig(depth=2, hidden_size=7, vocab_size=11, tie_embeddings=True,
                      cell_kind="mogrifier", mogrifier_rounds=5, mogrifier_rank=2,
                      input_embedding_ratio=0.6)
    lm = LanguageModel(cfg, nm.Rng(17))
    assert model.parameter_count(cfg) == lm.params.total_size()


def test_full_rank_round_pair_adds_two_matrices():
    base = dict(depth=1, hidden_size=6, vocab_size=4, cell_kind="mogrifier",
                mogrifier_rank=0, input_embedding_ratio=0.5)
    m_, n_ = 3, 6  # embedding 0.5 * 6, hidden 6
    c2 = model.parameter_count(ModelConfig(mogrifier_rounds=2, **base))
    c4 = model.parameter_count(ModelConfig(mogrifier_rounds=4, **base))
    assert c4 - c2 == m_ * n_ + n_ * m_


def test_tied_head_costs_only_bias():
    tied = model.parameter_count(small_config(tie_embeddings=True))
    untied = model.parameter_count(small_config(tie_embeddings=False))
    assert untied - tied == 5 * 4  # V x n output matrix


def test_size_to_budget_fixed_point_and_monotonicity():
    cfg = small_config(hidden_size=12)
    count = model.parameter_count(cfg)
    assert model.size_to_budget(count, cfg) == 12
    assert model.size_to_budget(count - 1, cfg) < 12
    with pytest.raises(ConfigError):
        model.size_to_budget(3, cfg)


def test_negative_rank_builds_unfactored_matrices():
    cfg = ModelConfig(depth=1, hidden_size=4, vocab_size=3, cell_kind="mogrifier",
                      mogrifier_rounds=2, mogrifier_rank=-7)
    lm = LanguageModel(cfg, nm.Rng(18))
    assert lm.layers[0].q[0].full is not None
    assert lm.layers[0].q[0].left is None


def test_headless_model_has_no_output_parameters():
    cfg = small_config(tie_embeddings=False)
    enc = LanguageModel(cfg, nm.Rng(19), with_head=False)
    assert "output_bias" not in enc.params
    assert "output_embedding" not in enc.params
    logits, states = enc.forward_window(np.array([[0, 1]]), enc.initial_state(2))
    assert logits.steps == [] and len(states) == cfg.depth


def test_full_model_gradients_match_central_differences():
    cfg = ModelConfig(depth=2, hidden_size=3, vocab_size=4, tie_embeddings=True,
                      cell_kind="mogrifier", mogrifier_rounds=3, mogrifier_rank=2,
                      input_embedding_ratio=0.7)
    lm = LanguageModel(cfg, nm.Rng(20), dtype=np.float64)
    tokens = nm.Rng(21).integers(0, 4, shape=(5, 2))
    targets = nm.Rng(22).integers(0, 4, shape=(5, 2))

    def f(_):
        logits, _ = lm.forward_window(tokens, lm.initial_state(2))
        return model.loss(logits, targets)

    assert nm.finite_difference_check(f, lm.params, step=1e-5) < 1e-5
