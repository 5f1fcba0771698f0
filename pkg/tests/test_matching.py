import numpy as np
import pytest

from ptcpcfg.autodiff import Tensor, constant, no_grad
from ptcpcfg.grammar import CompoundParams, GrammarConfig
from ptcpcfg.matching import (
    ClipFeatures,
    MatchConfig,
    encode_span_ptc,
    encode_video_ptc,
    expert_weights,
    gated_embedding,
    init_matching_params,
    matching_loss,
    mmc_score,
    sample_clips,
    span_representations_mmc,
    span_representations_ptc,
    triplet_hinge,
)

GRAMMAR = GrammarConfig(2, 2, 6, 3, 2, 3)


def ptc_params(seed=0, **kw):
    cfg = MatchConfig(video_dim=3, word_dim=3, span_hidden=4, embed_dim=2, **kw)
    p = CompoundParams.init(GRAMMAR, np.random.default_rng(seed))
    init_matching_params(p, cfg, np.random.default_rng(seed + 1))
    return p


def mmc_params(seed=0, experts=(("rgb", 3), ("audio", 2))):
    cfg = MatchConfig(mode="mmc", word_dim=3, span_hidden=2, embed_dim=4, experts=experts)
    p = CompoundParams.init(GRAMMAR, np.random.default_rng(seed))
    init_matching_params(p, cfg, np.random.default_rng(seed + 1))
    return p


def rows(n, d=2):
    return ClipFeatures(np.arange(n * d, dtype=float).reshape(n, d))


# -- clip sampling -----------------------------------------------------------------


def test_sample_identity():
    assert np.array_equal(sample_clips(rows(8), 8), rows(8).clips)


def test_sample_even_interval():
    picked = sample_clips(rows(16), 8)[:, 0] / 2
    assert picked.tolist() == [0, 2, 4, 6, 8, 10, 12, 14]


def test_sample_cyclic_fill():
    picked = sample_clips(rows(3), 8)[:, 0] / 2
    assert picked.tolist() == [0, 1, 2, 0, 1, 2, 0, 1]


def test_empty_features_rejected():
    with pytest.raises(ValueError):
        ClipFeatures(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        sample_clips(rows(3), 0)


# -- video encoder ----------------------------------------------------------------------


def test_identical_rows_give_single_row_embedding():
    p = ptc_params()
    row = np.array([0.3, -1.0, 2.0])
    v = encode_video_ptc(np.tile(row, (4, 1)), p)
    single = row @ p["video_f.W"].data + p["video_f.b"].data
    assert np.allclose(v.data, single)


def test_zero_video_head_gives_zero():
    p = ptc_params()
    p["video_f.W"].data[...] = 0
    p["video_f.b"].data[...] = 0
    assert np.array_equal(encode_video_ptc(np.ones((3, 3)), p).data, np.zeros(2))


def test_video_hand_arithmetic():
    p = ptc_params()
    p["video_f.W"].data[...] = [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]
    p["video_f.b"].data[...] = [0.5, -0.5]
    x = np.array([[1.0, 2.0, 3.0], [3.0, 0.0, -1.0]])
    # rows map to (4.5, 6.5) and (2.5, -1.5); their mean is (3.5, 2.5)
    assert np.allclose(encode_video_ptc(x, p).data, [3.5, 2.5])


def test_video_dim_mismatch():
    with pytest.raises(ValueError):
        encode_video_ptc(np.ones((2, 5)), ptc_params())


# -- span encoder -------------------------------------------------------------------------


def _reference_span(p, tokens, post):
    h = np.maximum(p["span_emb"].data[tokens] @ p["span_f0.W"].data + p["span_f0.b"].data, 0)
    tau = h.max(axis=0)
    heads = [tau @ p["span_heads.W"].data[k] + p["span_heads.b"].data[k] for k in range(len(post))]
    return sum(w * h for w, h in zip(post, heads))


def test_repeated_word_pools_to_single_activation():
    p = ptc_params()
    post = np.array([0.3, 0.7])
    assert np.allclose(encode_span_ptc(p, [4, 4], post).data, _reference_span(p, [4], post))


def test_one_hot_posterior_selects_head():
    p = ptc_params()
    tau = np.maximum(p["span_emb"].data[[1, 2]] @ p["span_f0.W"].data + p["span_f0.b"].data, 0).max(0)
    head = tau @ p["span_heads.W"].data[1] + p["span_heads.b"].data[1]
    assert np.allclose(encode_span_ptc(p, [1, 2], [0.0, 1.0]).data, head)


def test_uniform_posterior_matches_reference():
    p = ptc_params(seed=4)
    assert np.allclose(encode_span_ptc(p, [3, 0, 5], [0.5, 0.5]).data, _reference_span(p, [3, 0, 5], [0.5, 0.5]))


def test_span_encoder_permutation_invariant():
    p = ptc_params(seed=5)
    post = [0.2, 0.8]
    assert np.allclose(encode_span_ptc(p, [1, 3, 5], post).data, encode_span_ptc(p, [5, 1, 3], post).data)


def test_all_span_representations_match_single_span_encoder():
    p = ptc_params(seed=6)
    tokens = np.array([[1, 4, 2, 5]])
    spans = [(i, i + w - 1) for w in range(2, 5) for i in range(1, 4 - w + 2)]
    post = np.random.default_rng(0).dirichlet([1, 1], size=(1, len(spans)))
    reps = span_representations_ptc(p, tokens, constant(post))
    for k, (i, j) in enumerate(spans):
        single = encode_span_ptc(p, tokens[0, i - 1 : j], post[0, k])
        assert np.allclose(reps.data[0, k], single.data)


# -- hinge and loss ----------------------------------------------------------------------


def _hinge(cv, cpv, cvp, margin=0.2):
    # vectors in 2-d chosen so that the dot products take the given values
    c = Tensor([1.0, 0.0])
    v = Tensor([cv, 0.0])
    c_neg = Tensor([cpv / cv if cv else 0.0, 0.0]) if cv else Tensor([0.0, 0.0])
    v_neg = Tensor([cvp, 0.0])
    return triplet_hinge(c, v, c_neg, v_neg, margin).item()


def test_hinge_satisfied_margins():
    assert _hinge(1.0, 0.0, 0.0) == 0.0


def test_hinge_ties_give_twice_margin():
    c = Tensor([1.0, 1.0])
    assert triplet_hinge(c, c, c, c, 0.2).item() == pytest.approx(0.4)


def test_hinge_hand_arithmetic():
    assert _hinge(0.5, 0.4, 0.45) == pytest.approx(0.25)


def test_hinge_dimension_mismatch():
    with pytest.raises(ValueError):
        triplet_hinge(Tensor([1.0, 0.0]), Tensor([1.0]), Tensor([1.0, 0.0]), Tensor([1.0, 0.0]), 0.2)


def test_matching_loss_arithmetic_and_linearity():
    marg = Tensor([0.5, 0.5])
    hinges = Tensor([0.2, 0.4])
    assert matching_loss(marg, hinges).item() == pytest.approx(0.3)
    assert matching_loss(marg, hinges * 2.0).item() == pytest.approx(0.6)
    assert matching_loss(marg, Tensor([0.0, 0.0])).item() == 0.0


# -- MMC ------------------------------------------------------------------------------------


def test_zero_gate_weights_give_half_gate():
    p = mmc_params()
    p["mmc_gate0.W2"].data[...] = 0
    p["mmc_gate0.b2"].data[...] = 0
    c = Tensor(np.random.default_rng(0).normal(size=4))
    projected = c.data @ p["mmc_gate0.W1"].data + p["mmc_gate0.b1"].data
    expected = 0.5 * projected / np.linalg.norm(0.5 * projected)
    assert np.allclose(gated_embedding(p, c, 0).data, expected)


def test_gated_embedding_is_unit_norm_and_matches_reference():
    p = mmc_params(seed=3)
    c = np.random.default_rng(1).normal(size=(5, 4))
    out = gated_embedding(p, Tensor(c), 1).data
    assert np.allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-6)
    proj = c @ p["mmc_gate1.W1"].data + p["mmc_gate1.b1"].data
    gate = 1 / (1 + np.exp(-(proj @ p["mmc_gate1.W2"].data + p["mmc_gate1.b2"].data)))
    ref = proj * gate
    assert np.allclose(out, ref / np.linalg.norm(ref, axis=-1, keepdims=True))


def test_gated_embedding_needs_mmc_mode():
    with pytest.raises(ValueError):
        gated_embedding(ptc_params(), Tensor(np.ones(2)), 0)


def test_expert_weights_sum_to_one():
    p = mmc_params()
    w = expert_weights(p, Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    assert np.allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_single_expert_score_is_cosine():
    xi, psi = Tensor([1.0, 2.0, 0.5]), Tensor([0.3, -1.0, 2.0])
    cos = np.dot(xi.data, psi.data) / np.linalg.norm(xi.data) / np.linalg.norm(psi.data)
    assert mmc_score([xi], [psi], Tensor([1.0])).item() == pytest.approx(cos, abs=1e-12)


def test_identical_experts_score_one():
    xs = [Tensor([1.0, 2.0]), Tensor([-0.5, 0.1])]
    assert mmc_score(xs, xs, Tensor([0.3, 0.7])).item() == pytest.approx(1.0)


def test_expert_count_mismatch():
    with pytest.raises(ValueError):
        mmc_score([Tensor([1.0])], [Tensor([1.0]), Tensor([1.0])], Tensor([1.0]))


def test_mmc_span_representations_shape():
    p = mmc_params()
    with no_grad():
        reps = span_representations_mmc(p, np.array([[1, 2, 3]]), constant(np.full((1, 3, 2), 0.5)))
    assert reps.shape == (1, 3, 4)


def test_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(margin=0.0)
    with pytest.raises(ValueError):
        MatchConfig(mode="mmc")
    with pytest.raises(ValueError):
        MatchConfig(mode="other")
