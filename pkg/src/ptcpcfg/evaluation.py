"""Unlabeled bracketing evaluation: preprocessing, span extraction, F1, label recall."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .chart import SpanSet

log = logging.getLogger(__name__)

NUM_TOKEN = "<num>"
REPORTED_LABELS = ("NP", "VP", "PP", "SBAR", "ADJP", "ADVP")

_NUMERIC = re.compile(r"^[+-]?[0-9.,]*[0-9][0-9.,]*$")
_ALNUM = re.compile(r"\w", re.UNICODE)

Span = tuple[int, int]


def is_punctuation(token: str) -> bool:
    """True for tokens with no letters or digits."""
    return _ALNUM.search(token.replace("_", "")) is None


def is_numeric(token: str) -> bool:
    return _NUMERIC.match(token) is not None


def preprocess_tokens(tokens: Sequence[str]) -> list[str]:
    """Drop punctuation, lowercase, and replace numbers with ``<num>``."""
    out = []
    for tok in tokens:
        if tok == NUM_TOKEN:
            out.append(tok)
        elif is_punctuation(tok):
            continue
        elif is_numeric(tok):
            out.append(NUM_TOKEN)
        else:
            out.append(tok.lower())
    return out


# -- bracketed trees ------------------------------------------------------


@dataclass
class Tree:
    label: str
    children: list["Tree"] = field(default_factory=list)
    word: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.word is not None


_BRACKET_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse_bracketed(text: str) -> Tree:
    """Read a PTB-style tree. ``(TAG word)`` nodes are leaves.

    An unlabeled outer wrapper such as ``( (S ...) )`` is unwrapped.
    """
    toks = _BRACKET_TOKEN.findall(text)
    pos = 0

    def node() -> Tree:
        nonlocal pos
        if pos >= len(toks) or toks[pos] != "(":
            raise ValueError(f"malformed bracketing: expected '(' at token {pos}")
        pos += 1
        label = ""
        if pos < len(toks) and toks[pos] not in "()":
            label = toks[pos]
            pos += 1
        if pos < len(toks) and toks[pos] not in "()":
            word = toks[pos]
            pos += 1
            if pos >= len(toks) or toks[pos] != ")":
                raise ValueError("malformed bracketing: leaf with more than one word")
            pos += 1
            return Tree(label, word=word)
        children = []
        while pos < len(toks) and toks[pos] == "(":
            children.append(node())
        if pos >= len(toks) or toks[pos] != ")":
            raise ValueError("malformed bracketing: unbalanced parentheses")
        pos += 1
        if not children:
            raise ValueError("malformed bracketing: empty constituent")
        return Tree(label, children)

    tree = node()
    if pos != len(toks):
        raise ValueError("malformed bracketing: trailing material")
    while not tree.label and len(tree.children) == 1 and not tree.is_leaf:
        tree = tree.children[0]
    return tree


def _strip_punctuation(tree: Tree) -> Tree | None:
    if tree.is_leaf:
        return None if is_punctuation(tree.word) else tree
    kept = [c for c in (_strip_punctuation(c) for c in tree.children) if c is not None]
    return Tree(tree.label, kept) if kept else None


def tree_spans(tree: Tree) -> tuple[list[str], list[tuple[int, int, str]]]:
    """Words and labeled constituents (1-based inclusive), punctuation leaves removed."""
    stripped = _strip_punctuation(tree)
    if stripped is None:
        return [], []
    words: list[str] = []
    spans: list[tuple[int, int, str]] = []

    def visit(t: Tree) -> None:
        if t.is_leaf:
            words.append(t.word)
            return
        start = len(words) + 1
        for c in t.children:
            visit(c)
        spans.append((start, len(words), t.label.split("-")[0].split("=")[0]))

    visit(stripped)
    return words, spans


def tree_to_eval_spans(tree: SpanSet | str | Tree, length: int | None = None) -> dict[Span, set[str]]:
    """Non-trivial spans (width > 1, not the whole sentence) mapped to their labels."""
    if isinstance(tree, SpanSet):
        n, raw = tree.length, tree.spans
    else:
        if isinstance(tree, str):
            tree = parse_bracketed(tree)
        words, raw = tree_spans(tree)
        n = len(words)
    if length is not None and length != n:
        raise ValueError(f"tree covers {n} words, expected {length}")
    out: dict[Span, set[str]] = {}
    for i, j, label in raw:
        if not 1 <= i <= j <= n:
            raise ValueError(f"span ({i}, {j}) outside a {n}-word sentence")
        if j == i or (i, j) == (1, n):
            continue
        labels = out.setdefault((i, j), set())
        if label is not None:
            labels.add(str(label))
    seen = [(i, j) for i, j, _ in raw if j > i and (i, j) != (1, n)]
    if len(seen) != len(set(seen)):
        log.warning("duplicate spans in tree; keeping one of each")
    return out


# -- scores --------------------------------------------------------------


def sentence_f1(pred: set[Span], gold: set[Span]) -> float:
    hit = len(pred & gold)
    if hit == 0:
        return 0.0
    p, r = hit / len(pred), hit / len(gold)
    return 2 * p * r / (p + r)


def f1_scores(
    predictions: Mapping[str, set[Span]] | Sequence[set[Span]],
    golds: Mapping[str, set[Span]] | Sequence[set[Span]],
) -> tuple[float, float, int]:
    """(S-F1, C-F1, counted sentences) in percent; gold-empty sentences are excluded."""
    if isinstance(predictions, Mapping) != isinstance(golds, Mapping):
        raise TypeError("predictions and golds must both be mappings or both sequences")
    if isinstance(predictions, Mapping):
        if set(predictions) != set(golds):
            raise ValueError("prediction and gold sentence ids differ")
        keys = sorted(golds)
        pairs = [(set(predictions[k]), set(golds[k])) for k in keys]
    else:
        if len(predictions) != len(golds):
            raise ValueError("prediction and gold counts differ")
        pairs = [(set(p), set(g)) for p, g in zip(predictions, golds)]
    total_f1 = 0.0
    hit = n_pred = n_gold = counted = 0
    for pred, gold in pairs:
        if not gold:
            continue
        counted += 1
        total_f1 += sentence_f1(pred, gold)
        hit += len(pred & gold)
        n_pred += len(pred)
        n_gold += len(gold)
    if counted == 0:
        return 0.0, 0.0, 0
    s_f1 = 100.0 * total_f1 / counted
    c_f1 = 0.0 if hit == 0 else 100.0 * 2 * hit / (n_pred + n_gold)
    return s_f1, c_f1, counted


def label_recall(
    predictions: Sequence[set[Span]],
    golds: Sequence[Mapping[Span, set[str]]],
    labels: Sequence[str] | None = REPORTED_LABELS,
) -> dict[str, float]:
    """Recall per gold label; labels with no gold spans are omitted."""
    found: dict[str, int] = {}
    total: dict[str, int] = {}
    for pred, gold in zip(predictions, golds):
        for span, span_labels in gold.items():
            for label in span_labels:
                if labels is not None and label not in labels:
                    continue
                total[label] = total.get(label, 0) + 1
                found[label] = found.get(label, 0) + (span in pred)
    return {lab: 100.0 * found[lab] / total[lab] for lab in sorted(total)}


@dataclass
class EvalReport:
    s_f1: float
    c_f1: float
    label_recall: dict[str, float]
    counted_sentences: int
    skipped_sentences: int

    def as_dict(self) -> dict:
        return {
            "s_f1": self.s_f1,
            "c_f1": self.c_f1,
            "label_recall": dict(self.label_recall),
            "counted_sentences": self.counted_sentences,
            "skipped_sentences": self.skipped_sentences,
        }


def evaluate(
    predictions: Mapping[str, SpanSet | str | None],
    golds: Mapping[str, str | SpanSet | None],
) -> EvalReport:
    """Score predicted trees against gold trees, both keyed by sentence id.

    A sentence is skipped when its gold tree is missing or has no non-trivial
    span; a missing prediction for a counted sentence scores zero.
    """
    unknown = set(predictions) - set(golds)
    if unknown:
        raise ValueError(f"predictions for unknown sentence ids: {sorted(unknown)[:5]}")
    pred_sets: list[set[Span]] = []
    gold_sets: list[dict[Span, set[str]]] = []
    skipped = 0
    for key in sorted(golds):
        gold = golds[key]
        if gold is None:
            skipped += 1
            continue
        gold_spans = tree_to_eval_spans(gold)
        if not gold_spans:
            skipped += 1
            continue
        pred = predictions.get(key)
        pred_spans = set(tree_to_eval_spans(pred)) if pred is not None else set()
        pred_sets.append(pred_spans)
        gold_sets.append(gold_spans)
    s_f1, c_f1, counted = f1_scores(pred_sets, [set(g) for g in gold_sets])
    return EvalReport(s_f1, c_f1, label_recall(pred_sets, gold_sets), counted, skipped)
