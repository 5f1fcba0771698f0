"""Inside/outside dynamic programs and CYK decoding over a :class:`RuleTable`.

Cells are stored per span width ``w`` as (B, N - w + 1, S) tensors indexed by
start position, over the full symbol set (nonterminals first). Symbols that
cannot head a cell of that width (nonterminals over one word, preterminals
over longer spans) hold the finite sentinel ``NEG``, which vanishes under
exponentiation.

Spans are reported 1-based and inclusive: span ``(i, j)`` of width
``w = j - i + 1`` lives at position ``i - 1`` of the width-``w`` cell.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, concat, constant, logsumexp, stack
from .grammar import RuleTable

log = logging.getLogger(__name__)

NEG = -1e9


@dataclass
class Chart:
    """Inside scores plus (optionally) span and span-label marginals.

    ``inside[w]`` is (B, N-w+1, S); ``span_marginals[w]`` is (B, N-w+1) and
    ``label_posteriors[w]`` is (B, N-w+1, NT), both for widths ``w >= 2``.
    """

    inside: dict[int, Tensor]
    log_likelihood: Tensor
    outside: dict[int, Tensor] = field(default_factory=dict)
    span_marginals: dict[int, Tensor] = field(default_factory=dict)
    label_posteriors: dict[int, Tensor] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return max(self.inside)

    def span_probability(self, b: int, i: int, j: int) -> float:
        return float(self.span_marginals[j - i + 1].data[b, i - 1])

    def spans(self) -> list[tuple[int, int]]:
        n = self.length
        return [(i, i + w - 1) for w in range(2, n + 1) for i in range(1, n - w + 2)]

    def flat_marginals(self) -> Tensor:
        """(B, n_spans) span marginals ordered as :meth:`spans`."""
        return concat([self.span_marginals[w] for w in range(2, self.length + 1)], axis=1)

    def flat_posteriors(self) -> Tensor:
        """(B, n_spans, NT) label posteriors ordered as :meth:`spans`."""
        return concat([self.label_posteriors[w] for w in range(2, self.length + 1)], axis=1)


@dataclass
class SpanSet:
    """Constituents of one sentence as 1-based inclusive ``(i, j, label)``."""

    length: int
    spans: list[tuple[int, int, object]]

    def unlabeled(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.spans}

    def is_binary_bracketing(self) -> bool:
        brackets = sorted(self.unlabeled())
        n = self.length
        if len(brackets) != n - 1 or (n >= 2 and (1, n) not in brackets):
            return False
        for a, b in brackets:
            if not 1 <= a < b <= n:
                return False
        for x in brackets:
            for y in brackets:
                overlap = not (x[1] < y[0] or y[1] < x[0])
                nested = (x[0] <= y[0] and y[1] <= x[1]) or (y[0] <= x[0] and x[1] <= y[1])
                if overlap and not nested:
                    return False
        return True

    def to_bracket(self, words, label: str = "X") -> str:
        """Render as a bracketed string with placeholder labels."""
        words = list(words)
        if len(words) != self.length:
            raise ValueError("word count does not match span set length")
        children: dict[tuple[int, int], tuple[int, int]] = {}
        brackets = self.unlabeled()
        for i, j in brackets:
            for k in range(i, j):
                left, right = (i, k), (k + 1, j)
                if (left in brackets or k == i) and (right in brackets or k + 1 == j):
                    children[(i, j)] = (left, right)
                    break

        def render(i: int, j: int) -> str:
            if i == j:
                return f"({label} {words[i - 1]})"
            left, right = children[(i, j)]
            return f"({label} {render(*left)} {render(*right)})"

        if self.length == 1:
            return render(1, 1)
        return render(1, self.length)


def _check_length(n: int) -> None:
    if n < 2:
        raise ValueError(f"sentence of length {n} cannot be derived (need at least 2 words)")


def inside(rules: RuleTable, span_scores: dict[int, Tensor] | None = None) -> Chart:
    """Log-space inside pass for a batch of equal-length sentences.

    ``span_scores[w]`` (B, N-w+1, NT), when given, is added to the nonterminal
    inside scores of width-``w`` cells; the gradient of the log-likelihood
    with respect to it equals the span-label marginals.
    """
    b, n, t = rules.term.shape
    nt = rules.num_nonterminals
    s = nt + t
    _check_length(n)

    binary = rules.binary.reshape(b, nt, s * s)
    rule_shift = binary.data.max(axis=-1, keepdims=True)  # (B, NT, 1)
    rule_exp = (binary - constant(rule_shift)).exp().swapaxes(1, 2)  # (B, S*S, NT)
    rule_shift = rule_shift.reshape(b, 1, 1, nt)

    beta: dict[int, Tensor] = {1: concat([constant(np.full((b, n, nt), NEG)), rules.term], axis=-1)}
    for w in range(2, n + 1):
        k = n - w + 1
        left = stack([beta[l][:, 0:k, :] for l in range(1, w)], axis=2)  # (B, K, w-1, S)
        right = stack([beta[w - l][:, l : l + k, :] for l in range(1, w)], axis=2)
        l_shift = left.data.max(axis=-1, keepdims=True)
        r_shift = right.data.max(axis=-1, keepdims=True)
        l_exp = (left - constant(l_shift)).exp()
        r_exp = (right - constant(r_shift)).exp()
        pairs = (l_exp.reshape(b, k, w - 1, s, 1) * r_exp.reshape(b, k, w - 1, 1, s)).reshape(
            b, k * (w - 1), s * s
        )
        scores = (pairs @ rule_exp).log().reshape(b, k, w - 1, nt)
        scores = scores + constant(l_shift + r_shift) + constant(rule_shift)
        cell = logsumexp(scores, axis=2)
        if span_scores is not None and w in span_scores:
            cell = cell + span_scores[w]
        beta[w] = concat([cell, constant(np.full((b, k, t), NEG))], axis=-1)

    log_z = logsumexp(rules.root + beta[n][:, 0, :nt], axis=-1)
    return Chart(beta, log_z)


def outside(rules: RuleTable, chart: Chart) -> dict[int, Tensor]:
    """Log-space outside scores, built from recorded ops so they stay differentiable."""
    b, n, t = rules.term.shape
    nt = rules.num_nonterminals
    s = nt + t
    beta = chart.inside

    binary = rules.binary.reshape(b, nt, s * s)
    rule_max = binary.data.max(axis=(1, 2), keepdims=True)  # (B, 1, 1)
    rule_exp = (binary - constant(rule_max)).exp()  # (B, NT, S*S)
    rule_max = rule_max.reshape(b, 1, 1)

    alpha: dict[int, Tensor] = {
        n: concat([rules.root.reshape(b, 1, nt), constant(np.full((b, 1, t), NEG))], axis=-1)
    }
    for l in range(n - 1, 0, -1):
        k_child = n - l + 1
        contributions = []
        for w in range(l + 1, n + 1):
            k = n - w + 1
            gap = w - l
            parent = alpha[w][:, :, :nt]
            p_shift = parent.data.max(axis=-1, keepdims=True)
            through = ((parent - constant(p_shift)).exp() @ rule_exp).reshape(b, k, s, s)

            # child is the left daughter; sibling on the right
            sib = beta[gap][:, l : l + k, :]
            s_shift = sib.data.max(axis=-1, keepdims=True)
            as_left = (through * (sib - constant(s_shift)).exp().reshape(b, k, 1, s)).sum(-1)
            as_left = as_left.log() + constant(p_shift + s_shift) + constant(rule_max)
            contributions.append(
                concat([as_left, constant(np.full((b, gap, s), NEG))], axis=1)
            )

            # child is the right daughter; sibling on the left
            sib = beta[gap][:, 0:k, :]
            s_shift = sib.data.max(axis=-1, keepdims=True)
            as_right = (through * (sib - constant(s_shift)).exp().reshape(b, k, s, 1)).sum(-2)
            as_right = as_right.log() + constant(p_shift + s_shift) + constant(rule_max)
            contributions.append(
                concat([constant(np.full((b, gap, s), NEG)), as_right], axis=1)
            )
        alpha[l] = logsumexp(stack(contributions, axis=0), axis=0)
        assert alpha[l].shape == (b, k_child, s)
    return alpha


def span_marginals(rules: RuleTable, chart: Chart | None = None) -> Chart:
    """Fill span marginals p(c|sentence) and label posteriors p(k|c, sentence).

    Uses the explicit outside pass; the result is differentiable with respect
    to the rule table.
    """
    if chart is None:
        chart = inside(rules)
    nt = rules.num_nonterminals
    n = rules.length
    alpha = outside(rules, chart)
    chart.outside = alpha
    log_z = chart.log_likelihood.reshape(-1, 1, 1)
    for w in range(2, n + 1):
        mu = (alpha[w][:, :, :nt] + chart.inside[w][:, :, :nt] - log_z).exp()
        total = mu.sum(axis=-1)
        chart.span_marginals[w] = total
        chart.label_posteriors[w] = mu / total.reshape(*total.shape, 1)
    return chart


def marginals_by_gradient(rules: RuleTable) -> dict[int, np.ndarray]:
    """Span-label marginals mu[w] (B, N-w+1, NT) as d log Z / d span score."""
    rules = rules.detach()
    b, n = rules.batch_size, rules.length
    nt = rules.num_nonterminals
    scores = {w: Tensor(np.zeros((b, n - w + 1, nt)), requires_grad=True) for w in range(2, n + 1)}
    chart = inside(rules, span_scores=scores)
    backward(chart.log_likelihood.sum())
    return {w: scores[w].grad for w in scores}


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def cyk_viterbi(rules: RuleTable) -> list[tuple[SpanSet, float]]:
    """Highest-probability tree per sentence in the batch.

    Ties prefer the smaller split point, then the smaller child symbols, and
    at the root the smaller nonterminal index.
    """
    root, binary, term = _as_array(rules.root), _as_array(rules.binary), _as_array(rules.term)
    bsz, n, t = term.shape
    nt = root.shape[1]
    s = nt + t
    _check_length(n)
    results = []
    for b in range(bsz):
        rule = binary[b]  # (NT, S, S)
        delta = {1: np.concatenate([np.full((n, nt), NEG), term[b]], axis=-1)}
        back: dict[int, np.ndarray] = {}
        for w in range(2, n + 1):
            k = n - w + 1
            left = np.stack([delta[l][0:k] for l in range(1, w)], axis=1)  # (K, w-1, S)
            right = np.stack([delta[w - l][l : l + k] for l in range(1, w)], axis=1)
            total = (
                rule[None, :, None, :, :]
                + left[:, None, :, :, None]
                + right[:, None, :, None, :]
            )  # (K, NT, w-1, S, S)
            flat = total.reshape(k, nt, -1)
            best = flat.argmax(axis=-1)
            score = np.take_along_axis(flat, best[..., None], axis=-1)[..., 0]
            delta[w] = np.concatenate([score, np.full((k, t), NEG)], axis=-1)
            back[w] = best
        top = root[b] + delta[n][0, :nt]
        label = int(np.argmax(top))
        spans: list[tuple[int, int, object]] = []

        def follow(i: int, w: int, sym: int) -> None:
            if w == 1:
                return
            spans.append((i + 1, i + w, sym))
            split, rest = divmod(int(back[w][i, sym]), s * s)
            left_sym, right_sym = divmod(rest, s)
            l = split + 1
            follow(i, l, left_sym)
            follow(i + l, w - l, right_sym)

        follow(0, n, label)
        results.append((SpanSet(n, sorted(spans, key=lambda x: (x[0], -x[1]))), float(top[label])))
    return results
