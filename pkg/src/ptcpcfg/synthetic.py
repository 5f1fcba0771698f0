"""Synthetic corpora with known trees, for training checks and demos."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .chart import SpanSet

# Five noun classes. Determiners agree with their noun, and adjectives agree
# with the noun they modify (a noun phrase with an adjective takes a neutral
# determiner). Agreement only ever holds between sibling preterminals, so a
# bracketing that separates such a pair needs class-specific nonterminals,
# which a small symbol budget cannot afford.
_CLASSES = ("A", "B", "C", "D", "E")

# Nonterminal -> list of (left, right, probability). Preterminals are the keys
# of LEXICON; every other symbol is a nonterminal.
RULES: dict[str, list[tuple[str, str, float]]] = {
    "S": [("NP", "VP", 1.0)],
    "VP": [("V", "NP", 0.7), ("VP", "PP", 0.3)],
    "PP": [("P", "NP", 1.0)],
    "NP": [(f"DET_{c}", f"N_{c}", 0.6 / 5) for c in _CLASSES] + [("DET", "NB", 0.4)],
    "NB": [(f"ADJ_{c}", f"N_{c}", 1 / 5) for c in _CLASSES],
}

_NOUNS = {
    "A": ["onion", "potato", "carrot", "tomato"],
    "B": ["dog", "cat", "horse", "goat"],
    "C": ["knife", "pan", "bowl", "spoon"],
    "D": ["car", "truck", "bike", "train"],
    "E": ["shirt", "coat", "hat", "scarf"],
}
_ADJECTIVES = {
    "A": ["fresh", "raw", "ripe"],
    "B": ["young", "wild", "tame"],
    "C": ["sharp", "clean", "heavy"],
    "D": ["fast", "old", "red"],
    "E": ["warm", "wool", "torn"],
}
_DETERMINERS = {
    "A": ["le", "un"],
    "B": ["la", "une"],
    "C": ["lo", "uno"],
    "D": ["der", "ein"],
    "E": ["die", "eine"],
}

LEXICON: dict[str, list[str]] = {
    **{f"DET_{c}": _DETERMINERS[c] for c in _CLASSES},
    **{f"N_{c}": _NOUNS[c] for c in _CLASSES},
    **{f"ADJ_{c}": _ADJECTIVES[c] for c in _CLASSES},
    "DET": ["the", "a"],
    "V": ["chops", "feeds", "holds", "washes", "grabs", "sees"],
    "P": ["with", "near", "on", "under"],
}


@dataclass
class SyntheticSentence:
    words: list[str]
    pos: tuple[str, ...]
    tree: SpanSet  # constituents labelled with their nonterminal names

    def bracket(self) -> str:
        """PTB-style string with the generating labels."""
        labels = {(i, j): lab for i, j, lab in self.tree.spans}

        def render(i: int, j: int) -> str:
            if i == j:
                return f"({self.pos[i - 1]} {self.words[i - 1]})"
            for k in range(i, j):
                left, right = (i, k), (k + 1, j)
                if (k == i or left in labels) and (k + 1 == j or right in labels):
                    return f"({labels[(i, j)]} {render(*left)} {render(*right)})"
            raise ValueError("not a binary tree")

        return render(1, len(self.words))


def _expand(symbol: str, rng: np.random.Generator, words: list, pos: list, spans: list, depth: int) -> None:
    if symbol in LEXICON:
        options = LEXICON[symbol]
        words.append(options[int(rng.integers(len(options)))])
        pos.append(symbol)
        return
    if depth > 12:
        raise RecursionError
    options = RULES[symbol]
    probs = np.array([p for _, _, p in options])
    left, right, _ = options[int(rng.choice(len(options), p=probs / probs.sum()))]
    start = len(words) + 1
    _expand(left, rng, words, pos, spans, depth + 1)
    _expand(right, rng, words, pos, spans, depth + 1)
    spans.append((start, len(words), symbol))


def generate_corpus(
    count: int, rng: np.random.Generator, min_length: int = 5, max_length: int = 10
) -> list[SyntheticSentence]:
    """Sample sentences from the fixed grammar, rejecting lengths outside the bounds."""
    out = []
    while len(out) < count:
        words: list[str] = []
        pos: list[str] = []
        spans: list = []
        try:
            _expand("S", rng, words, pos, spans, 0)
        except RecursionError:
            continue
        if min_length <= len(words) <= max_length:
            out.append(SyntheticSentence(words, tuple(pos), SpanSet(len(words), sorted(spans))))
    return out


@lru_cache(maxsize=None)
def _catalan(n: int) -> int:
    if n <= 1:
        return 1
    return sum(_catalan(k) * _catalan(n - 1 - k) for k in range(n))


def random_binary_tree(n: int, rng: np.random.Generator) -> SpanSet:
    """A binary bracketing of ``n`` words drawn uniformly over all shapes."""
    spans: list[tuple[int, int, object]] = []

    def build(i: int, j: int) -> None:
        if i == j:
            return
        spans.append((i, j, None))
        size = j - i + 1
        weights = np.array(
            [_catalan(k - i) * _catalan(j - k - 1) for k in range(i, j)], dtype=np.float64
        )
        k = i + int(rng.choice(size - 1, p=weights / weights.sum()))
        build(i, k)
        build(k + 1, j)

    build(1, n)
    return SpanSet(n, spans)


def bag_of_words_features(
    sentences: list[list[int]],
    vocab_size: int,
    dim: int,
    clips: int,
    rng: np.random.Generator,
    noise: float = 0.1,
) -> list[np.ndarray]:
    """Per sentence, ``clips`` rows each equal to a noisy bag of its word vectors."""
    table = rng.normal(size=(vocab_size, dim)) / np.sqrt(dim)
    out = []
    for ids in sentences:
        bag = table[np.asarray(ids)].sum(axis=0) / np.sqrt(len(ids))
        out.append(bag[None, :] + noise * rng.normal(size=(clips, dim)))
    return out
