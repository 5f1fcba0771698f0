"""Command line: ``ptcpcfg {harvest,train,parse,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import data, formats
from .estimator import GrammarInducer, prepare_videos
from .evaluation import evaluate, preprocess_tokens
from .grammar import GrammarConfig
from .matching import ClipFeatures, MatchConfig
from .training import MODELS, TrainConfig, train

log = logging.getLogger("ptcpcfg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class Paths:
    subtitles: str | None = None
    exclusions: str | None = None
    corpus: str | None = None
    features: str | None = None
    checkpoint: str | None = None
    metrics: str | None = None
    predictions: str | None = None
    report: str | None = None


@dataclass
class RunConfig:
    model: str = "ptc"
    vocab_size: int = 20000
    gap_s: float = 1.5
    grammar: dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    match: dict[str, Any] = field(default_factory=dict)
    paths: Paths = field(default_factory=Paths)

    def grammar_config(self, vocab_len: int) -> GrammarConfig:
        return GrammarConfig(**{**self.grammar, "vocab_size": vocab_len})

    def match_config(self) -> MatchConfig | None:
        if self.model == "cpcfg":
            return None
        opts = dict(self.match)
        opts["experts"] = tuple((str(n), int(d)) for n, d in opts.get("experts", ()))
        return MatchConfig(**{**opts, "mode": self.model})

    @classmethod
    def full_scale(cls) -> "RunConfig":
        grammar = dataclasses.asdict(GrammarConfig.full_scale())
        del grammar["vocab_size"]
        match = dataclasses.asdict(MatchConfig.full_scale())
        del match["mode"]
        return cls(grammar=grammar, match=match)

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "vocab_size": self.vocab_size,
            "gap_s": self.gap_s,
            "grammar": dict(self.grammar),
            "train": dataclasses.asdict(self.train),
            "match": {k: (list(map(list, v)) if k == "experts" else v) for k, v in self.match.items()},
            "paths": {k: v for k, v in dataclasses.asdict(self.paths).items() if v is not None},
        }


_GRAMMAR_KEYS = {f.name for f in dataclasses.fields(GrammarConfig)} - {"vocab_size"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_MATCH_KEYS = {f.name for f in dataclasses.fields(MatchConfig)} - {"mode"}
_PATH_KEYS = {f.name for f in dataclasses.fields(Paths)}


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")


def build_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Typed config from a parsed TOML mapping plus command-line overrides."""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for key, value in (overrides or {}).items():
        section, _, name = key.rpartition(".")
        target = raw.setdefault(section, {}) if section else raw
        target[name] = value
    _check_keys("top level", {k: v for k, v in raw.items() if not isinstance(v, dict)},
                {"model", "vocab_size", "gap_s"})
    _check_keys("sections", {k: v for k, v in raw.items() if isinstance(v, dict)},
                {"grammar", "train", "match", "paths"})
    grammar, train_opts = raw.get("grammar", {}), raw.get("train", {})
    match, paths = raw.get("match", {}), raw.get("paths", {})
    _check_keys("grammar", grammar, _GRAMMAR_KEYS)
    _check_keys("train", train_opts, _TRAIN_KEYS)
    _check_keys("match", match, _MATCH_KEYS)
    _check_keys("paths", paths, _PATH_KEYS)
    model = raw.get("model", "ptc")
    if model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {model!r}")
    try:
        cfg = RunConfig(
            model=model,
            vocab_size=int(raw.get("vocab_size", 20000)),
            gap_s=float(raw.get("gap_s", 1.5)),
            grammar=grammar,
            train=TrainConfig(**train_opts),
            match=match,
            paths=Paths(**{k: str(v) for k, v in paths.items()}),
        )
        cfg.grammar_config(2)
        cfg.match_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.vocab_size < 1:
        raise ConfigError("vocab_size must be positive")
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return build_config(raw, overrides)


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _require(cfg: RunConfig, *names: str) -> list[str]:
    values = [getattr(cfg.paths, n) for n in names]
    missing = [n for n, v in zip(names, values) if v is None]
    if missing:
        raise ConfigError(f"missing path setting(s): {', '.join('paths.' + m for m in missing)}")
    return values


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {path}")
    return p


def _read_corpus(path: str) -> list[data.SentenceClip]:
    try:
        return data.read_corpus(_existing(path, "corpus"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# -- commands ------------------------------------------------------------


def cmd_harvest(cfg: RunConfig) -> int:
    subtitles, corpus = _require(cfg, "subtitles", "corpus")
    directory = _existing(subtitles, "subtitle directory")
    if not directory.is_dir():
        raise DataError(f"subtitle directory is not a directory: {subtitles}")
    files = {p.stem: p for p in sorted(directory.glob("*.vtt"))}
    exclusions = set()
    if cfg.paths.exclusions is not None:
        exclusions = data.read_exclusions(_existing(cfg.paths.exclusions, "exclusion list"))
    records, report = data.harvest(
        files, exclusions, data.RuleBasedRestorer(cfg.gap_s), cfg.train.max_sentence_length
    )
    data.write_corpus(records, corpus)
    summary = {
        "records": len(records),
        "videos": report.videos,
        "skipped": report.skipped,
        "excluded": report.excluded,
        "errors": report.errors,
        "too_long": report.too_long,
    }
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def clip_window(features: ClipFeatures, start_s: float, end_s: float) -> ClipFeatures:
    """Rows of the clips overlapping [start_s, end_s]; the whole video if none do."""
    first = max(0, int(math.floor(start_s / features.seconds_per_clip)))
    last = min(features.clips.shape[0], int(math.ceil(end_s / features.seconds_per_clip)))
    if last <= first:
        return features
    return ClipFeatures(features.clips[first:last], features.seconds_per_clip, features.source_id)


def load_videos(records: list[data.SentenceClip], cfg: RunConfig, match: MatchConfig) -> list:
    (features,) = _require(cfg, "features")
    directory = _existing(features, "features directory")
    cache: dict[tuple[str, str | None], ClipFeatures] = {}

    def get(video_id: str, expert: str | None) -> ClipFeatures:
        key = (video_id, expert)
        if key not in cache:
            path = formats.feature_path(directory, video_id, expert)
            try:
                cache[key] = formats.read_features(_existing(str(path), "feature file"), video_id)
            except formats.FormatError as exc:
                raise DataError(str(exc)) from exc
        return cache[key]

    videos = []
    for rec in records:
        if match.mode == "ptc":
            feats = get(rec.video_id, None)
            if feats.dim != match.video_dim:
                raise DataError(f"{rec.video_id}: feature dim {feats.dim}, expected {match.video_dim}")
            videos.append(clip_window(feats, rec.start_s, rec.end_s))
        else:
            streams = {}
            for name, dim in match.experts:
                feats = get(rec.video_id, name)
                if feats.dim != dim:
                    raise DataError(f"{rec.video_id}.{name}: feature dim {feats.dim}, expected {dim}")
                streams[name] = clip_window(feats, rec.start_s, rec.end_s)
            videos.append(streams)
    return videos


def cmd_train(cfg: RunConfig) -> int:
    corpus, checkpoint = _require(cfg, "corpus", "checkpoint")
    records = _read_corpus(corpus)
    if not records:
        raise DataError(f"corpus is empty: {corpus}")
    sentences = [rec.tokens for rec in records]
    vocab = data.build_vocab(sentences, cfg.vocab_size)
    ids = [np.asarray(vocab.encode(preprocess_tokens(s)), dtype=np.int64) for s in sentences]
    match = cfg.match_config()
    videos = None
    if match is not None and cfg.train.alpha > 0:
        videos = prepare_videos(load_videos(records, cfg, match), match)
    log_fh = open(cfg.paths.metrics, "w") if cfg.paths.metrics else None
    try:
        result = train(
            ids, cfg.grammar_config(len(vocab)), cfg.train, videos, match, cfg.model,
            metrics_log=log_fh,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    finally:
        if log_fh is not None:
            log_fh.close()
    formats.save_checkpoint(result.params, checkpoint)
    formats.vocab_path(checkpoint).write_text(vocab.to_json())
    print(json.dumps({"steps": len(result.history), "skipped": result.skipped}), file=sys.stderr)
    return EXIT_OK


def cmd_parse(cfg: RunConfig) -> int:
    corpus, checkpoint = _require(cfg, "corpus", "checkpoint")
    records = _read_corpus(corpus)
    try:
        params = formats.load_checkpoint(_existing(checkpoint, "checkpoint"))
        vocab_text = _existing(str(formats.vocab_path(checkpoint)), "vocabulary sidecar").read_text()
        vocab = data.Vocabulary.from_json(vocab_text)
        parser = GrammarInducer.from_params(params, vocab)
    except (formats.FormatError, ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    out = open(cfg.paths.predictions, "w") if cfg.paths.predictions else sys.stdout
    try:
        for rec, tree in zip(records, parser.predict([r.tokens for r in records])):
            if tree is None:
                print(f"warning: skipping {rec.id}: fewer than two words", file=sys.stderr)
                continue
            out.write(f"{rec.id}\t{tree}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def read_predictions(path: str) -> dict[str, str]:
    out = {}
    with open(_existing(path, "predictions"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            key, sep, tree = line.rstrip("\n").partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected '<id>\\t<tree>'")
            out[key] = tree
    return out


def cmd_eval(cfg: RunConfig) -> int:
    predictions, corpus = _require(cfg, "predictions", "corpus")
    preds = read_predictions(predictions)
    golds = {rec.id: rec.gold_tree for rec in _read_corpus(corpus)}
    try:
        report = evaluate(preds, golds)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    if cfg.paths.report:
        Path(cfg.paths.report).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


COMMANDS = {"harvest": cmd_harvest, "train": cmd_train, "parse": cmd_parse, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptcpcfg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML file with [grammar], [train], [match], [paths]")
    parser.add_argument("--seed", type=int, help="overrides train.seed")
    parser.add_argument("--model", choices=MODELS, help="overrides model")
    for name in sorted(_PATH_KEYS):
        parser.add_argument(f"--{name}", help=f"overrides paths.{name}")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any setting, e.g. train.epochs=3 (repeatable)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides: dict[str, Any] = {}
    try:
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = _parse_value(value.strip())
        if args.seed is not None:
            overrides["train.seed"] = args.seed
        if args.model is not None:
            overrides["model"] = args.model
        for name in _PATH_KEYS:
            if getattr(args, name) is not None:
                overrides[f"paths.{name}"] = getattr(args, name)
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
