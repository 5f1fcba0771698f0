import json

import pytest

from ptcpcfg.data import (
    SentenceClip,
    SubtitleBlock,
    Vocabulary,
    assign_word_times,
    build_vocab,
    extract_clip_span,
    harvest,
    harvest_video,
    read_corpus,
    read_exclusions,
    restore_punctuation,
    segment_sentences,
    tokenize,
    write_corpus,
)


def vtt(*cues):
    body = "\n".join(f"{a} --> {b}\n{text}\n" for a, b, text in cues)
    return "WEBVTT\n\n" + body


# -- tokenizing and punctuation ----------------------------------------------------


def test_tokenize_keeps_numbers_and_contractions():
    assert tokenize("Don't add 2.5 cups, ok?") == ["Don't", "add", "2.5", "cups", ",", "ok", "?"]


def test_restore_leaves_punctuated_text_alone():
    blocks = [SubtitleBlock("cut it.", 0, 1), SubtitleBlock("Now stir", 5, 6)]
    assert restore_punctuation(blocks) == [["cut", "it", "."], ["Now", "stir"]]


def test_restore_inserts_at_long_gap():
    blocks = [SubtitleBlock("cut the onion", 0, 1), SubtitleBlock("then stir", 3, 4)]
    assert restore_punctuation(blocks) == [["cut", "the", "onion", "."], ["then", "stir"]]


def test_restore_inserts_before_capital():
    blocks = [SubtitleBlock("cut the onion", 0, 1), SubtitleBlock("Then stir", 1, 2)]
    assert restore_punctuation(blocks)[0][-1] == "."


def test_restore_single_block_no_trigger():
    assert restore_punctuation([SubtitleBlock("mix the flour", 0, 2)]) == [["mix", "the", "flour"]]


def test_restore_is_idempotent_on_its_output():
    blocks = [SubtitleBlock("cut the onion", 0, 1), SubtitleBlock("then stir", 3, 4)]
    once = restore_punctuation(blocks)
    rebuilt = [SubtitleBlock(" ".join(t), b.start_s, b.end_s) for t, b in zip(once, blocks)]
    assert restore_punctuation(rebuilt) == once


def test_segment_two_sentences():
    toks = "hello world . how are you ?".split()
    assert segment_sentences(toks) == [["hello", "world"], ["how", "are", "you"]]


def test_segment_drops_fragment():
    assert segment_sentences(["mix", "the", "flour"]) == []


# -- timing --------------------------------------------------------------------------


def test_word_times_unit_division():
    assert assign_word_times(SubtitleBlock("a b c d", 0.0, 4.0)) == [(0, 1), (1, 2), (2, 3), (3, 4)]


def test_word_times_hand_arithmetic():
    assert assign_word_times(SubtitleBlock("x y z", 10.0, 11.5)) == [(10, 10.5), (10.5, 11), (11, 11.5)]


def test_word_times_single_word_and_exact_end():
    assert assign_word_times(SubtitleBlock("hi", 1.0, 2.3)) == [(1.0, 2.3)]
    # the last bound is the block end even when the division is inexact
    assert assign_word_times(SubtitleBlock("a b c", 0.0, 1.0))[-1][1] == 1.0


def test_clip_span_crossing_blocks():
    words = [("a", 2.0, 3.0), ("b", 3.0, 4.0), ("c", 4.0, 6.0)]
    assert extract_clip_span(words) == (2.0, 6.0)
    with pytest.raises(ValueError):
        extract_clip_span([])


def test_block_validation():
    with pytest.raises(ValueError):
        SubtitleBlock("   ", 0, 1)
    with pytest.raises(ValueError):
        SubtitleBlock("x", 2, 1)


def test_sentence_crossing_block_boundary():
    blocks = [SubtitleBlock("put it", 0.0, 4.0), SubtitleBlock("down. ok", 4.0, 8.0)]
    (rec,), dropped = harvest_video("v", blocks)
    assert rec.tokens == ["put", "it", "down"]
    assert (rec.start_s, rec.end_s) == (0.0, 6.0)
    assert dropped == 0


def test_long_sentence_dropped():
    text = " ".join(f"w{k}" for k in range(45)) + "."
    records, dropped = harvest_video("v", [SubtitleBlock(text, 0, 45)])
    assert records == [] and dropped == 1


# -- harvest over files ----------------------------------------------------------------


def test_harvest_exclusion_and_bad_file(tmp_path):
    good = tmp_path / "a.vtt"
    good.write_text(vtt(("00:00:00.000", "00:00:02.000", "stir it well.")))
    bad = tmp_path / "b.vtt"
    bad.write_text("not a subtitle file")
    skip = tmp_path / "c.vtt"
    skip.write_text(good.read_text())
    records, report = harvest({"a": good, "b": bad, "c": skip}, exclusions={"c"})
    assert [r.id for r in records] == ["a_0000"]
    assert report.videos == 3 and report.excluded == ["c"] and set(report.errors) == {"b"}
    assert report.skipped == 2


def test_harvest_millisecond_timestamps(tmp_path):
    f = tmp_path / "v.vtt"
    f.write_text(vtt(("00:01:02.250", "00:01:03.750", "go now.")))
    (rec,), _ = harvest({"v": f})
    assert (rec.start_s, rec.end_s) == (62.25, 63.75)


def test_exclusion_file(tmp_path):
    f = tmp_path / "ex.txt"
    f.write_text("a\n\n  b \n")
    assert read_exclusions(f) == {"a", "b"}


def test_corpus_round_trip(tmp_path):
    recs = [
        SentenceClip("v_0000", "v", ["a", "b"], 0.0, 1.5),
        SentenceClip("v_0001", "v", ["c", "d"], 1.5, 2.0, "(S (A a) (B b))"),
    ]
    path = tmp_path / "c.jsonl"
    write_corpus(recs, path)
    assert read_corpus(path) == recs
    assert "gold_tree" not in json.loads(path.read_text().splitlines()[0])


def test_corpus_error_names_line(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"id": "x", "tokens": ["a"]}\n{"id": "y"}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_corpus(path)


# -- vocabulary ------------------------------------------------------------------------------


def test_vocab_counts():
    v = build_vocab([["a", "a", "b"], ["a", "b", "c"]], 2)
    assert "a" in v and "b" in v and "c" not in v
    assert v.encode(["c"]) == [0]


def test_vocab_tie_breaks_lexicographically():
    v = build_vocab([["a"] * 3 + ["c"] * 2 + ["b"] * 2], 2)
    assert "b" in v and "c" not in v


def test_vocab_large_k_has_no_unknowns():
    v = build_vocab([["x", "y"], ["z"]], 100)
    assert 0 not in v.encode(["x", "y", "z"])


def test_vocab_reserved_ids_and_json():
    v = build_vocab([["The", "3", "dogs", "!"]], 10)
    assert v.encode(["the", "<num>", "zebra"]) == [v.encode(["the"])[0], 1, 0]
    assert Vocabulary.from_json(v.to_json()).tokens == v.tokens
