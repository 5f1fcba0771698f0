"""Subtitle harvesting, vocabulary, and corpus files.

Harvesting turns timed subtitle cues into (sentence, clip time span) pairs:
punctuation is restored over the concatenated cue tokens, the stream is split
into sentences at terminal punctuation, each cue's words share its duration
equally, and a sentence's clip runs from its first word's start to its last
word's end.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import webvtt

from .evaluation import NUM_TOKEN, is_punctuation, preprocess_tokens
from .grammar import NUM_ID, UNK_ID

log = logging.getLogger(__name__)

TERMINALS = frozenset({".", "?", "!"})
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"\d+(?:[.,]\d+)*|\w+(?:['’]\w+)*|[^\w\s]")


@dataclass
class SubtitleBlock:
    text: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("subtitle block has no text")
        if not self.end_s > self.start_s:
            raise ValueError(f"subtitle block ends ({self.end_s}) before it starts ({self.start_s})")

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)

    @property
    def words(self) -> list[str]:
        return [t for t in self.tokens if not is_punctuation(t)]


@dataclass
class SentenceClip:
    id: str
    video_id: str
    tokens: list[str]
    start_s: float
    end_s: float
    gold_tree: str | None = None

    def to_json(self) -> str:
        row = asdict(self)
        if row["gold_tree"] is None:
            del row["gold_tree"]
        return json.dumps(row, ensure_ascii=False)

    @classmethod
    def from_dict(cls, row: Mapping) -> "SentenceClip":
        missing = {"id", "tokens"} - set(row)
        if missing:
            raise ValueError(f"corpus record missing fields {sorted(missing)}")
        return cls(
            str(row["id"]),
            str(row.get("video_id", "")),
            list(row["tokens"]),
            float(row.get("start_s", 0.0)),
            float(row.get("end_s", 0.0)),
            row.get("gold_tree"),
        )


def tokenize(text: str) -> list[str]:
    """Split words from punctuation; decimals and contractions stay whole."""
    return _TOKEN_RE.findall(text)


def _seconds(ts) -> float:
    return ts.hours * 3600 + ts.minutes * 60 + ts.seconds + ts.milliseconds / 1000.0


def read_subtitles(path: str | Path) -> list[SubtitleBlock]:
    """Parse a WebVTT file into blocks, skipping cues with no text."""
    blocks = []
    for cue in webvtt.read(str(path)):
        text = " ".join(cue.text.split())
        if text:
            blocks.append(SubtitleBlock(text, _seconds(cue.start_time), _seconds(cue.end_time)))
    return blocks


# -- punctuation restoration --------------------------------------------


class PunctuationRestorer(Protocol):
    def __call__(self, blocks: Sequence[SubtitleBlock]) -> list[list[str]]:
        """Return each block's tokens, with punctuation tokens inserted."""


@dataclass
class RuleBasedRestorer:
    """Insert "." at a block boundary when the next block opens with a
    capitalised word or follows a silence of at least ``gap_s`` seconds.

    Streams that already carry terminal punctuation are returned unchanged.
    """

    gap_s: float = 1.5

    def __call__(self, blocks: Sequence[SubtitleBlock]) -> list[list[str]]:
        tokens = [b.tokens for b in blocks]
        if any(t in TERMINALS for toks in tokens for t in toks):
            return tokens
        out = [list(t) for t in tokens]
        for k in range(len(blocks) - 1):
            nxt = blocks[k + 1].words
            capital = bool(nxt) and nxt[0][:1].isupper()
            gap = blocks[k + 1].start_s - blocks[k].end_s >= self.gap_s
            if (capital or gap) and out[k] and out[k][-1] not in TERMINALS:
                out[k].append(".")
        return out


def restore_punctuation(blocks: Sequence[SubtitleBlock], gap_s: float = 1.5) -> list[list[str]]:
    return RuleBasedRestorer(gap_s)(blocks)


def segment_sentences(tokens: Sequence, key: Callable = lambda t: t) -> list[list]:
    """Split at ".", "?" and "!" (dropped); an unterminated tail is discarded."""
    sentences: list[list] = []
    current: list = []
    for tok in tokens:
        if key(tok) in TERMINALS:
            if current:
                sentences.append(current)
            current = []
        else:
            current.append(tok)
    return sentences


def assign_word_times(block: SubtitleBlock, count: int | None = None) -> list[tuple[float, float]]:
    """Equal-duration intervals for the block's words, partitioning it exactly."""
    n = len(block.words) if count is None else count
    if n < 1:
        raise ValueError("block has no words")
    step = (block.end_s - block.start_s) / n
    bounds = [block.start_s + k * step for k in range(n)] + [block.end_s]
    return list(zip(bounds[:-1], bounds[1:]))


def extract_clip_span(timed_words: Sequence[tuple[str, float, float]]) -> tuple[float, float]:
    if not timed_words:
        raise ValueError("sentence has no words")
    return timed_words[0][1], timed_words[-1][2]


@dataclass
class HarvestReport:
    videos: int = 0
    excluded: list[str] = field(default_factory=list)
    too_long: int = 0
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def skipped(self) -> int:
        return len(self.excluded) + len(self.errors)


def harvest_video(
    video_id: str,
    blocks: Sequence[SubtitleBlock],
    restorer: PunctuationRestorer | None = None,
    max_length: int = 40,
) -> tuple[list[SentenceClip], int]:
    """Sentence clips for one video, plus the number dropped for length."""
    restorer = restorer or RuleBasedRestorer()
    timed: list[tuple[str, float | None, float | None]] = []
    for block, tokens in zip(blocks, restorer(blocks)):
        words = [t for t in tokens if not is_punctuation(t)]
        times = iter(assign_word_times(block, len(words))) if words else iter(())
        for tok in tokens:
            if tok in TERMINALS:
                timed.append((tok, None, None))
            elif not is_punctuation(tok):
                timed.append((tok, *next(times)))
    records = []
    dropped = 0
    for sentence in segment_sentences(timed, key=lambda t: t[0]):
        if len(sentence) >= max_length:
            dropped += 1
            continue
        start, end = extract_clip_span(sentence)
        records.append(
            SentenceClip(
                f"{video_id}_{len(records):04d}",
                video_id,
                [w for w, _, _ in sentence],
                start,
                end,
            )
        )
    return records, dropped


def harvest(
    subtitle_files: Mapping[str, str | Path],
    exclusions: Iterable[str] = (),
    restorer: PunctuationRestorer | None = None,
    max_length: int = 40,
) -> tuple[list[SentenceClip], HarvestReport]:
    """Harvest every video not on the exclusion list; bad files are reported, not fatal."""
    excluded = set(exclusions)
    report = HarvestReport()
    records: list[SentenceClip] = []
    for video_id in sorted(subtitle_files):
        report.videos += 1
        if video_id in excluded:
            report.excluded.append(video_id)
            continue
        try:
            blocks = read_subtitles(subtitle_files[video_id])
            found, dropped = harvest_video(video_id, blocks, restorer, max_length)
        except (webvtt.errors.MalformedFileError, ValueError, OSError) as exc:
            log.warning("skipping %s: %s", video_id, exc)
            report.errors[video_id] = str(exc)
            continue
        report.too_long += dropped
        records.extend(found)
    records.sort(key=lambda r: (r.video_id, r.start_s))
    return records, report


def read_exclusions(path: str | Path) -> set[str]:
    return {line.strip() for line in Path(path).read_text().splitlines() if line.strip()}


# -- corpus and vocabulary ----------------------------------------------


def read_corpus(path: str | Path) -> list[SentenceClip]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(SentenceClip.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_corpus(records: Iterable[SentenceClip], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


@dataclass
class Vocabulary:
    """Token ids with two reserved entries: UNK (0) and NUM (1)."""

    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:2] != [UNK_TOKEN, NUM_TOKEN]:
            self.tokens = [UNK_TOKEN, NUM_TOKEN] + [
                t for t in self.tokens if t not in (UNK_TOKEN, NUM_TOKEN)
            ]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Ids of already-preprocessed tokens; unknown tokens map to UNK."""
        return [self.index.get(t, UNK_ID) for t in tokens]

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(list(json.loads(text)["tokens"]))


assert NUM_ID == 1 and UNK_ID == 0


def build_vocab(sentences: Iterable[Sequence[str]], size: int) -> Vocabulary:
    """The ``size`` most frequent preprocessed tokens; ties break lexicographically."""
    if size < 1:
        raise ValueError("vocabulary size must be at least 1")
    counts: Counter[str] = Counter()
    seen = False
    for sent in sentences:
        seen = True
        counts.update(t for t in preprocess_tokens(sent) if t not in (NUM_TOKEN, UNK_TOKEN))
    if not seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:size]
    return Vocabulary([UNK_TOKEN, NUM_TOKEN] + [t for t, _ in ranked])
