"""Scikit-learn style wrapper: fit on tokenized sentences, predict bracketings."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import no_grad
from .chart import SpanSet, cyk_viterbi
from .data import Vocabulary, build_vocab
from .evaluation import evaluate, preprocess_tokens
from .grammar import CompoundParams, GrammarConfig, encode_posterior, rule_log_probs
from .matching import ClipFeatures, MatchConfig, sample_clips
from .training import MODELS, TrainConfig, TrainResult, train
from .validation import check_positive_int, check_sentences, check_videos

log = logging.getLogger(__name__)


def prepare_videos(videos, match_config: MatchConfig) -> list:
    """Sample a fixed number of clips per video (and per expert for mmc)."""
    out = []
    for video in videos:
        if match_config.mode == "ptc":
            if not isinstance(video, ClipFeatures):
                video = ClipFeatures(video)
            out.append(sample_clips(video, match_config.clips_to_sample))
        else:
            streams = []
            for name, _ in match_config.experts:
                if name not in video:
                    raise ValueError(f"video is missing expert {name!r}")
                feats = video[name]
                if not isinstance(feats, ClipFeatures):
                    feats = ClipFeatures(feats)
                streams.append(sample_clips(feats, match_config.clips_to_sample))
            out.append(streams)
    return out


def decode(params: CompoundParams, ids: np.ndarray) -> tuple[SpanSet, float]:
    """Viterbi tree under the posterior mean of z; no video is involved."""
    with no_grad():
        q = encode_posterior(params, ids[None])
        rules = rule_log_probs(params, q.mean, ids[None])
        return cyk_viterbi(rules)[0]


class GrammarInducer(BaseEstimator):
    """Unsupervised constituency parser trained from sentences, optionally with video.

    ``fit`` builds a vocabulary from the training text, then optimizes the
    compound PCFG (``model="cpcfg"``) or the grammar plus a video-text matcher
    (``"ptc"`` or ``"mmc"``). ``predict`` returns bracketed trees with the
    placeholder label ``X``; one-word sentences get ``None``.
    """

    def __init__(
        self,
        model: str = "cpcfg",
        num_nonterminals: int = 10,
        num_preterminals: int = 20,
        vocab_size: int = 20000,
        symbol_dim: int = 64,
        z_dim: int = 16,
        hidden_dim: int = 128,
        learning_rate: float = 0.001,
        beta1: float = 0.75,
        beta2: float = 0.999,
        batch_size: int = 32,
        epochs: int = 1,
        alpha: float = 1.0,
        max_sentence_length: int = 40,
        clip_grad_norm: float | None = 5.0,
        match_config: MatchConfig | None = None,
        seed: int = 0,
    ):
        self.model = model
        self.num_nonterminals = num_nonterminals
        self.num_preterminals = num_preterminals
        self.vocab_size = vocab_size
        self.symbol_dim = symbol_dim
        self.z_dim = z_dim
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.alpha = alpha
        self.max_sentence_length = max_sentence_length
        self.clip_grad_norm = clip_grad_norm
        self.match_config = match_config
        self.seed = seed

    def _configs(self, vocab_len: int) -> tuple[GrammarConfig, TrainConfig, MatchConfig | None]:
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        check_positive_int(self.vocab_size, "vocab_size")
        grammar = GrammarConfig(
            self.num_nonterminals, self.num_preterminals, vocab_len,
            self.symbol_dim, self.z_dim, self.hidden_dim,
        )
        trainer = TrainConfig(
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            batch_size=self.batch_size, epochs=self.epochs, alpha=self.alpha,
            max_sentence_length=self.max_sentence_length, seed=self.seed,
            clip_grad_norm=self.clip_grad_norm,
        )
        match = None
        if self.model != "cpcfg":
            match = self.match_config or MatchConfig(mode=self.model)
            if match.mode != self.model:
                raise ValueError(f"match_config.mode {match.mode!r} differs from model {self.model!r}")
        return grammar, trainer, match

    def encode(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        return [
            np.asarray(self.vocabulary_.encode(preprocess_tokens(s)), dtype=np.int64)
            for s in check_sentences(X)
        ]

    def fit(self, X, y=None, videos=None, metrics_log=None) -> "GrammarInducer":
        """Train on token lists ``X``; ``videos[i]`` accompanies ``X[i]``.

        ``y`` is ignored. Videos are :class:`ClipFeatures` (ptc) or mappings
        from expert name to :class:`ClipFeatures` (mmc).
        """
        sentences = check_sentences(X)
        videos = check_videos(videos, len(sentences), self.model)
        vocab = build_vocab(sentences, self.vocab_size)
        grammar, trainer, match = self._configs(len(vocab))
        self.vocabulary_ = vocab
        ids = [np.asarray(vocab.encode(preprocess_tokens(s)), dtype=np.int64) for s in sentences]
        sampled = prepare_videos(videos, match) if videos is not None else None
        result: TrainResult = train(
            ids, grammar, trainer, sampled, match, self.model, metrics_log=metrics_log
        )
        self.params_ = result.params
        self.history_ = result.history
        self.skipped_ = result.skipped
        return self

    @classmethod
    def from_params(cls, params: CompoundParams, vocabulary: Vocabulary, **kwargs) -> "GrammarInducer":
        """Wrap trained parameters (for example from a checkpoint) for prediction."""
        cfg = params.config
        est = cls(
            num_nonterminals=cfg.num_nonterminals, num_preterminals=cfg.num_preterminals,
            symbol_dim=cfg.symbol_dim, z_dim=cfg.z_dim, hidden_dim=cfg.hidden_dim, **kwargs,
        )
        if len(vocabulary) != cfg.vocab_size:
            raise ValueError(
                f"vocabulary has {len(vocabulary)} entries, checkpoint expects {cfg.vocab_size}"
            )
        est.vocabulary_ = vocabulary
        est.params_ = params
        return est

    def predict_spans(self, X) -> list[SpanSet | None]:
        out = []
        for ids in self.encode(X):
            if len(ids) < 2:
                out.append(None)
                continue
            spans, _ = decode(self.params_, ids)
            out.append(spans)
        return out

    def predict(self, X) -> list[str | None]:
        """Bracketed trees over the preprocessed words of each sentence."""
        sentences = check_sentences(X)
        trees = self.predict_spans(sentences)
        return [
            None if t is None else t.to_bracket(preprocess_tokens(s))
            for s, t in zip(sentences, trees)
        ]

    def score(self, X, y) -> float:
        """Sentence-level F1 (percent) against gold bracketed trees ``y``."""
        predictions = self.predict(X)
        if len(y) != len(predictions):
            raise ValueError("X and y differ in length")
        keys = [f"{k:08d}" for k in range(len(y))]
        report = evaluate(dict(zip(keys, predictions)), dict(zip(keys, y)))
        return report.s_f1
