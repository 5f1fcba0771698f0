"""Video and span encoders and the video-span matching losses.

Two variants share the same loss skeleton, ``sum_c p(c|sentence) * h(v, c)``:

* ``ptc``: a frozen-feature video head averaged over sampled clips, and a span
  encoder (word embedding, ``f0``, ReLU, max-pool, one output head per
  nonterminal mixed by the span's label posteriors). Similarity is a dot
  product.
* ``mmc``: several expert feature streams, each pooled over time and
  projected; spans are mean-pooled BiLSTM states mixed over label heads,
  projected per expert with a gated embedding. Similarity is an expert-weighted
  sum of cosines.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    constant,
    cosine_similarity,
    hinge,
    l2_normalize,
    stack,
    take,
)
from .grammar import CompoundParams, bilstm_states, linear, xavier_uniform

log = logging.getLogger(__name__)

MODES = ("ptc", "mmc")


@dataclass(frozen=True)
class MatchConfig:
    margin: float = 0.2
    clips_to_sample: int = 8
    frames_per_clip: int = 16
    mode: str = "ptc"
    video_dim: int = 64
    word_dim: int = 32
    span_hidden: int = 64
    embed_dim: int = 32
    experts: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("clips_to_sample", "frames_per_clip", "video_dim", "word_dim",
                     "span_hidden", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode == "mmc" and not self.experts:
            raise ValueError("mmc mode needs at least one expert")

    @classmethod
    def full_scale(cls, mode: str = "ptc", experts=()) -> "MatchConfig":
        return cls(0.2, 8, 16, mode, 1024, 300, 2048, 512, tuple(experts))


@dataclass
class ClipFeatures:
    """Precomputed per-clip embeddings of one video, one row per clip."""

    clips: np.ndarray
    seconds_per_clip: float = 1.0
    source_id: str = ""

    def __post_init__(self):
        self.clips = np.atleast_2d(np.asarray(self.clips, dtype=np.float64))
        if self.clips.shape[0] < 1:
            raise ValueError(f"no clips in features for {self.source_id!r}")
        if not np.isfinite(self.clips).all():
            raise ValueError(f"non-finite clip features for {self.source_id!r}")
        if self.seconds_per_clip <= 0:
            raise ValueError("seconds_per_clip must be positive")

    @property
    def dim(self) -> int:
        return self.clips.shape[1]


# Expert name -> features, for the multi-expert variant.
ExpertFeatures = dict


def sample_clips(features: ClipFeatures, count: int) -> np.ndarray:
    """``count`` rows at equal intervals; short videos repeat cyclically."""
    if count < 1:
        raise ValueError("count must be at least 1")
    clips = features.clips
    available = clips.shape[0]
    if available == 0:
        raise ValueError("empty features")
    if available >= count:
        index = (np.arange(count) * available) // count
    else:
        index = np.arange(count) % available
    return clips[index]


def init_matching_params(params: CompoundParams, config: MatchConfig, rng: np.random.Generator) -> None:
    """Add the matcher's tensors to ``params`` (seeded stand-ins for pretrained weights)."""
    v, nt = params.config.vocab_size, params.config.num_nonterminals
    e, h, d = config.embed_dim, config.span_hidden, config.word_dim
    if config.mode == "ptc":
        params.add("span_emb", xavier_uniform(rng, (v, d)))
        params.add("span_f0.W", xavier_uniform(rng, (d, h)))
        params.add("span_f0.b", np.zeros(h))
        params.add("span_heads.W", xavier_uniform(rng, (nt, h, e)))
        params.add("span_heads.b", np.zeros((nt, e)))
        params.add("video_f.W", xavier_uniform(rng, (config.video_dim, e)))
        params.add("video_f.b", np.zeros(e))
        return
    params.add("mmc_emb", xavier_uniform(rng, (v, d)))
    for direction in ("fwd", "bwd"):
        params.add(f"mmc_{direction}.W", xavier_uniform(rng, (d + h, 4 * h)))
        params.add(f"mmc_{direction}.b", np.zeros(4 * h))
    params.add("mmc_heads.W", xavier_uniform(rng, (nt, 2 * h, e)))
    params.add("mmc_heads.b", np.zeros((nt, e)))
    params.add("mmc_expert_weights", xavier_uniform(rng, (len(config.experts), e)))
    for k, (_, dim) in enumerate(config.experts):
        params.add(f"mmc_video{k}.W", xavier_uniform(rng, (dim, e)))
        params.add(f"mmc_video{k}.b", np.zeros(e))
        params.add(f"mmc_gate{k}.W1", xavier_uniform(rng, (e, e)))
        params.add(f"mmc_gate{k}.b1", np.zeros(e))
        params.add(f"mmc_gate{k}.W2", xavier_uniform(rng, (e, e)))
        params.add(f"mmc_gate{k}.b2", np.zeros(e))


# -- PTC ---------------------------------------------------------------------


def encode_video_ptc(sampled, params: CompoundParams) -> Tensor:
    """Mean over clips of the trainable head applied to frozen clip features."""
    x = constant(sampled)
    w = params["video_f.W"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"feature dim {x.shape[-1]} does not match video head input {w.shape[0]}")
    return (x @ w + params["video_f.b"]).mean(axis=-2)


def _mix_heads(x: Tensor, params: CompoundParams, prefix: str, posteriors: Tensor) -> Tensor:
    """sum_k p(k) * head_k(x) for x (..., H) and posteriors (..., NT)."""
    w = params[f"{prefix}.W"]
    nt, hdim, e = w.shape
    flat = w.transpose(1, 0, 2).reshape(hdim, nt * e)
    lead = x.shape[:-1]
    heads = (x @ flat).reshape(*lead, nt, e) + params[f"{prefix}.b"]
    return (heads * posteriors.reshape(*lead, nt, 1)).sum(axis=-2)


def encode_span_ptc(params: CompoundParams, span_tokens, posteriors) -> Tensor:
    """Representation of a single span from its token ids and label posteriors."""
    span_tokens = np.asarray(span_tokens, dtype=np.int64)
    if span_tokens.ndim != 1 or span_tokens.size < 1:
        raise ValueError("span must be a non-empty 1-D sequence of token ids")
    posteriors = posteriors if isinstance(posteriors, Tensor) else constant(posteriors)
    hidden = linear(take(params["span_emb"], span_tokens), params, "span_f0").relu()
    tau = hidden.max(axis=0)
    return _mix_heads(tau, params, "span_heads", posteriors)


def span_representations_ptc(params: CompoundParams, tokens, posteriors: Tensor) -> Tensor:
    """(B, n_spans, E) for every span of width >= 2, ordered as ``Chart.spans``.

    ``posteriors`` is the matching (B, n_spans, NT) label-posterior tensor.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    b, n = tokens.shape
    hidden = linear(take(params["span_emb"], tokens), params, "span_f0").relu()  # (B, N, H)
    pooled = []
    tau = hidden
    for w in range(2, n + 1):
        k = n - w + 1
        tau = stack([tau[:, 0:k, :], hidden[:, w - 1 :, :]], axis=-1).max(axis=-1)
        pooled.append(tau)
    return _mix_heads(concat(pooled, axis=1), params, "span_heads", posteriors)


def triplet_hinge(c: Tensor, v: Tensor, c_neg: Tensor, v_neg: Tensor, margin: float) -> Tensor:
    """[c'.v - c.v + margin]_+ + [c.v' - c.v + margin]_+ over the last axis."""
    dims = {c.shape[-1], v.shape[-1], c_neg.shape[-1], v_neg.shape[-1]}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch in triplet hinge: {sorted(dims)}")
    positive = (c * v).sum(-1)
    return hinge((c_neg * v).sum(-1) - positive + margin) + hinge(
        (c * v_neg).sum(-1) - positive + margin
    )


def matching_loss(marginals: Tensor, hinges: Tensor) -> Tensor:
    """sum over spans of p(c|sentence) * h(v, c)."""
    return (marginals * hinges).sum()


def matching_loss_ptc(
    video: Tensor,
    spans: Tensor,
    marginals: Tensor,
    neg_video: Tensor,
    neg_spans: Tensor,
    margin: float,
) -> Tensor:
    """s(v, sentence) for one sentence's (n_spans, E) span vectors."""
    return matching_loss(marginals, triplet_hinge(spans, video, neg_spans, neg_video, margin))


# -- MMC ---------------------------------------------------------------------


def span_representations_mmc(params: CompoundParams, tokens, posteriors: Tensor) -> Tensor:
    """(B, n_spans, E): label-mixed heads over mean-pooled BiLSTM word states."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, n = tokens.shape
    states = bilstm_states(take(params["mmc_emb"], tokens), params, "mmc")
    pooled = []
    running = states
    for w in range(2, n + 1):
        k = n - w + 1
        running = running[:, 0:k, :] + states[:, w - 1 :, :]
        pooled.append(running * (1.0 / w))
    return _mix_heads(concat(pooled, axis=1), params, "mmc_heads", posteriors)


def _check_expert(params: CompoundParams, expert: int) -> None:
    if f"mmc_gate{expert}.W1" not in params:
        raise ValueError(f"no gated embedding for expert {expert}; is the matcher in mmc mode?")


def gated_embedding(params: CompoundParams, c: Tensor, expert: int) -> Tensor:
    """Linear map, sigmoid gate from a second linear map, then L2 normalisation."""
    _check_expert(params, expert)
    projected = c @ params[f"mmc_gate{expert}.W1"] + params[f"mmc_gate{expert}.b1"]
    gate = (projected @ params[f"mmc_gate{expert}.W2"] + params[f"mmc_gate{expert}.b2"]).sigmoid()
    return l2_normalize(projected * gate)


def expert_video_embedding(params: CompoundParams, sampled, expert: int) -> Tensor:
    """Temporal mean of one expert's sampled clips, then a learned projection."""
    _check_expert(params, expert)
    pooled = constant(np.asarray(sampled, dtype=np.float64).mean(axis=-2))
    return pooled @ params[f"mmc_video{expert}.W"] + params[f"mmc_video{expert}.b"]


def expert_weights(params: CompoundParams, c: Tensor) -> Tensor:
    """omega_i(c): softmax over experts of u_i . c."""
    return (c @ params["mmc_expert_weights"].transpose()).log_softmax(-1).exp()


def mmc_score(xis: list[Tensor], psis: list[Tensor], weights: Tensor) -> Tensor:
    """sum_i omega_i * cos(xi_i, psi_i)."""
    if len(xis) != len(psis) or len(xis) != weights.shape[-1]:
        raise ValueError(
            f"expert count mismatch: {len(xis)} span, {len(psis)} video, {weights.shape[-1]} weights"
        )
    cosines = stack([cosine_similarity(x, p) for x, p in zip(xis, psis)], axis=-1)
    return (weights * cosines).sum(-1)


def mmc_hinge(score: Tensor, score_neg_span: Tensor, score_neg_video: Tensor, margin: float) -> Tensor:
    return hinge(score_neg_span - score + margin) + hinge(score_neg_video - score + margin)


def matching_loss_mmc(
    params: CompoundParams,
    spans: Tensor,
    marginals: Tensor,
    videos: list[Tensor],
    neg_spans: Tensor,
    neg_videos: list[Tensor],
    margin: float,
) -> Tensor:
    """s_mm(v, sentence) with per-expert video embeddings ``videos``."""
    m = len(videos)
    xis = [gated_embedding(params, spans, i) for i in range(m)]
    xis_neg = [gated_embedding(params, neg_spans, i) for i in range(m)]
    score = mmc_score(xis, videos, expert_weights(params, spans))
    score_neg_span = mmc_score(xis_neg, videos, expert_weights(params, neg_spans))
    score_neg_video = mmc_score(xis, neg_videos, expert_weights(params, spans))
    return matching_loss(marginals, mmc_hinge(score, score_neg_span, score_neg_video, margin))
