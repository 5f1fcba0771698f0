import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force, fully_explicit_log_z, random_grammar
from ptcpcfg.autodiff import Tensor, backward
from ptcpcfg.chart import SpanSet, cyk_viterbi, inside, marginals_by_gradient, span_marginals
from ptcpcfg.grammar import CompoundParams, GrammarConfig, RuleTable, rule_log_probs


def table(root, binary, term, grad=False):
    return RuleTable(
        Tensor(root[None], requires_grad=grad),
        Tensor(binary[None], requires_grad=grad),
        Tensor(term[None], requires_grad=grad),
    )


def test_uniform_two_word_sentence():
    cfg = GrammarConfig(1, 1, 2, 2, 2, 2)
    p = CompoundParams.init(cfg, np.random.default_rng(0))
    for t in p.tensors.values():
        t.data[...] = 0.0
    chart = inside(rule_log_probs(p, np.zeros(2), [0, 1]))
    # root 1, binary rule A -> T T at 1/4, each word 1/2
    expected = math.log(1.0 * 0.25 * 0.5 * 0.5)
    assert chart.log_likelihood.item() == pytest.approx(expected, abs=1e-12)


def test_inside_matches_brute_force_five_words():
    root, binary, term = random_grammar(np.random.default_rng(5), 3, 4, 5)
    log_z = brute_force(root, binary, term)[0]
    assert inside(table(root, binary, term)).log_likelihood.item() == pytest.approx(log_z, abs=1e-9)


def test_brute_force_oracle_agrees_with_full_enumeration():
    root, binary, term = random_grammar(np.random.default_rng(6), 2, 2, 3)
    assert brute_force(root, binary, term)[0] == pytest.approx(fully_explicit_log_z(root, binary, term), abs=1e-12)


def test_marginals_match_brute_force_four_words():
    root, binary, term = random_grammar(np.random.default_rng(7), 3, 4, 4)
    marg = brute_force(root, binary, term)[4]
    chart = span_marginals(table(root, binary, term))
    for w in range(2, 5):
        joint = chart.label_posteriors[w].data[0] * chart.span_marginals[w].data[0][:, None]
        for i in range(4 - w + 1):
            assert np.allclose(joint[i], marg[(i + 1, i + w)], atol=1e-9)


def test_outside_and_gradient_marginals_agree():
    root, binary, term = random_grammar(np.random.default_rng(8), 3, 4, 6, scale=2.0)
    rules = table(root, binary, term)
    chart = span_marginals(rules)
    grads = marginals_by_gradient(rules)
    for w in range(2, 7):
        joint = chart.label_posteriors[w].data * chart.span_marginals[w].data[..., None]
        assert np.allclose(joint, grads[w], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 6))
def test_marginal_identities(seed, n):
    root, binary, term = random_grammar(np.random.default_rng(seed), 3, 4, n, scale=1.5)
    chart = span_marginals(table(root, binary, term))
    assert sum(chart.span_marginals[w].data.sum() for w in range(2, n + 1)) == pytest.approx(n - 1, abs=1e-6)
    assert chart.span_probability(0, 1, n) == pytest.approx(1.0, abs=1e-6)
    for w in range(2, n + 1):
        assert np.allclose(chart.label_posteriors[w].data.sum(-1), 1.0, atol=1e-6)
        m = chart.span_marginals[w].data
        assert ((m >= -1e-12) & (m <= 1 + 1e-12)).all()
    assert chart.log_likelihood.item() <= 0


def test_marginals_are_differentiable():
    root, binary, term = random_grammar(np.random.default_rng(9), 2, 3, 4)
    rules = table(root, binary, term, grad=True)
    chart = span_marginals(rules)
    backward((chart.flat_marginals() * Tensor(np.arange(6.0))).sum())
    assert rules.binary.grad is not None and np.abs(rules.binary.grad).sum() > 0


def test_cyk_two_words():
    root, binary, term = random_grammar(np.random.default_rng(10), 3, 4, 2)
    (spans, _), = cyk_viterbi(table(root, binary, term))
    assert spans.unlabeled() == {(1, 2)}


def test_cyk_matches_brute_force_five_words():
    rng = np.random.default_rng(11)
    root, binary, term = random_grammar(rng, 3, 4, 5, scale=2.0)
    _, best, best_spans, unique, _ = brute_force(root, binary, term)
    (spans, logp), = cyk_viterbi(table(root, binary, term))
    assert logp == pytest.approx(best, abs=1e-9)
    assert unique
    assert spans.unlabeled() == best_spans


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 7))
def test_cyk_is_valid_and_bounded(seed, n):
    root, binary, term = random_grammar(np.random.default_rng(seed), 3, 4, n)
    rules = table(root, binary, term)
    (spans, logp), = cyk_viterbi(rules)
    assert spans.is_binary_bracketing()
    assert logp <= inside(rules).log_likelihood.item() + 1e-9


def test_cyk_ties_prefer_smallest_split():
    # all-zero log tables: every tree scores exactly 0, so the smallest split
    # at every node yields the right-branching tree
    nt, t, n = 2, 2, 4
    s = nt + t
    root = np.zeros(nt)
    binary = np.zeros((nt, s, s))
    term = np.zeros((n, t))
    (spans, _), = cyk_viterbi(table(root, binary, term))
    assert spans.unlabeled() == {(1, 4), (2, 4), (3, 4)}
    assert [lab for _, _, lab in spans.spans] == [0, 0, 0]


def test_batched_inside_equals_per_sentence():
    rng = np.random.default_rng(12)
    items = [random_grammar(rng, 3, 4, 4) for _ in range(3)]
    batch = RuleTable(*(Tensor(np.stack([it[k] for it in items])) for k in range(3)))
    batched = inside(batch).log_likelihood.data
    for b, it in enumerate(items):
        assert batched[b] == pytest.approx(inside(table(*it)).log_likelihood.item(), abs=1e-12)
    assert [s.unlabeled() for s, _ in cyk_viterbi(batch)] == [
        cyk_viterbi(table(*it))[0][0].unlabeled() for it in items
    ]


def test_single_word_rejected():
    root, binary, term = random_grammar(np.random.default_rng(13), 2, 2, 1)
    with pytest.raises(ValueError):
        inside(table(root, binary, term))
    with pytest.raises(ValueError):
        cyk_viterbi(table(root, binary, term))


def test_spanset_bracket_rendering():
    spans = SpanSet(2, [(1, 2, 0)])
    assert spans.to_bracket(["w1", "w2"]) == "(X (X w1) (X w2))"
    assert SpanSet(3, [(1, 3, None), (1, 2, None)]).to_bracket("abc") == "(X (X (X a) (X b)) (X c))"


def test_spanset_bracketing_validity():
    assert SpanSet(4, [(1, 4, None), (1, 2, None), (3, 4, None)]).is_binary_bracketing()
    assert not SpanSet(4, [(1, 4, None), (1, 3, None), (2, 4, None)]).is_binary_bracketing()
    assert not SpanSet(4, [(1, 4, None), (1, 2, None)]).is_binary_bracketing()
