"""ELBO, the joint ELBO + matching objective, Adam, and the training loop."""
from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, stack
from .chart import Chart, inside, span_marginals
from .grammar import (
    CompoundParams,
    DiagGaussian,
    GrammarConfig,
    RuleTable,
    encode_posterior,
    kl_diag_gaussians,
    rule_log_probs,
    sample_z,
)
from .matching import (
    MatchConfig,
    encode_video_ptc,
    expert_video_embedding,
    init_matching_params,
    matching_loss_mmc,
    matching_loss_ptc,
    span_representations_mmc,
    span_representations_ptc,
)

log = logging.getLogger(__name__)

MODELS = ("cpcfg", "ptc", "mmc")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.75
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    alpha: float = 1.0
    max_sentence_length: int = 40
    seed: int = 0
    clip_grad_norm: float | None = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.max_sentence_length < 3:
            raise ValueError("batch_size and epochs must be positive, max_sentence_length > 2")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


@dataclass
class StepReport:
    elbo: float
    kl: float
    log_likelihood: float
    matching_loss: float
    total: float
    grad_norm: float = 0.0


@dataclass
class Example:
    """One training pair: token ids plus its video (sampled clips, or expert list)."""

    tokens: np.ndarray
    video: np.ndarray | list[np.ndarray] | None = None
    id: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Negatives:
    """Indices into the batch: a negative video, a negative sentence, and for
    each span of the positive sentence the span of the negative sentence used
    as its counterpart."""

    video: int
    sentence: int
    spans: np.ndarray


@dataclass
class ElboResult:
    elbo: Tensor
    log_likelihood: Tensor
    kl: Tensor
    posterior: DiagGaussian
    z: Tensor
    rules: RuleTable
    chart: Chart


def usable_length(n: int, max_length: int) -> bool:
    """Sentences need two words (CNF) and fewer than ``max_length`` words."""
    return 2 <= n < max_length


def elbo(params: CompoundParams, tokens, noise, max_length: int | None = None) -> ElboResult:
    """Single-sample ELBO for a batch of equal-length sentences."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    n = tokens.shape[1]
    if n < 2 or (max_length is not None and n >= max_length):
        raise ValueError(f"sentence length {n} outside [2, {max_length})")
    q = encode_posterior(params, tokens)
    z = sample_z(q, np.asarray(noise, dtype=np.float64).reshape(q.mean.shape))
    rules = rule_log_probs(params, z, tokens)
    chart = inside(rules)
    kl = kl_diag_gaussians(q)
    return ElboResult(chart.log_likelihood - kl, chart.log_likelihood, kl, q, z, rules, chart)


def sample_negatives(lengths: Sequence[int], rng: np.random.Generator) -> list[Negatives] | None:
    """One negative video and one negative sentence per item, uniformly from the
    rest of the batch; each span is paired with a uniformly drawn span of the
    negative sentence. ``None`` for a batch of one."""
    b = len(lengths)
    if b < 2:
        return None
    out = []
    for i, n in enumerate(lengths):
        video = int(rng.integers(b - 1))
        video += video >= i
        sentence = int(rng.integers(b - 1))
        sentence += sentence >= i
        m = lengths[sentence]
        spans = rng.integers(m * (m - 1) // 2, size=n * (n - 1) // 2)
        out.append(Negatives(video, sentence, spans))
    return out


def total_loss(
    params: CompoundParams,
    batch: Sequence[Example],
    noises: np.ndarray,
    config: TrainConfig,
    match_config: MatchConfig | None = None,
    model: str = "ptc",
    negatives: list[Negatives] | None = None,
) -> tuple[Tensor, list[StepReport]]:
    """Sum over the batch of ``-ELBO + alpha * s(v, sentence)``."""
    if not batch:
        raise ValueError("empty batch")
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    alpha = 0.0 if model == "cpcfg" else config.alpha
    use_matching = alpha > 0
    if use_matching and negatives is None:
        log.warning("batch of one has no negatives; matching term skipped")
        use_matching = False
    if use_matching and match_config is None:
        raise ValueError("matching needs a MatchConfig")
    noises = np.asarray(noises, dtype=np.float64)

    groups: dict[int, list[int]] = defaultdict(list)
    for i, ex in enumerate(batch):
        groups[len(ex)].append(i)

    item_elbo: dict[int, Tensor] = {}
    item_ll: dict[int, Tensor] = {}
    item_kl: dict[int, Tensor] = {}
    item_spans: dict[int, Tensor] = {}
    item_marg: dict[int, Tensor] = {}
    for n in sorted(groups):
        idx = groups[n]
        tokens = np.stack([batch[i].tokens for i in idx])
        res = elbo(params, tokens, noises[idx], config.max_sentence_length)
        if use_matching:
            chart = span_marginals(res.rules, res.chart)
            posteriors = chart.flat_posteriors()
            if match_config.mode == "ptc":
                reps = span_representations_ptc(params, tokens, posteriors)
            else:
                reps = span_representations_mmc(params, tokens, posteriors)
            marginals = chart.flat_marginals()
        for g, i in enumerate(idx):
            item_elbo[i] = res.elbo[g]
            item_ll[i] = res.log_likelihood[g]
            item_kl[i] = res.kl[g]
            if use_matching:
                item_spans[i] = reps[g]
                item_marg[i] = marginals[g]

    item_match: dict[int, Tensor] = {}
    if use_matching:
        margin = match_config.margin
        if match_config.mode == "ptc":
            videos = encode_video_ptc(np.stack([ex.video for ex in batch]), params)
            for i, neg in enumerate(negatives):
                item_match[i] = matching_loss_ptc(
                    videos[i], item_spans[i], item_marg[i], videos[neg.video],
                    item_spans[neg.sentence][neg.spans], margin,
                )
        else:
            experts = len(match_config.experts)
            videos = [
                [expert_video_embedding(params, ex.video[k], k) for k in range(experts)]
                for ex in batch
            ]
            for i, neg in enumerate(negatives):
                item_match[i] = matching_loss_mmc(
                    params, item_spans[i], item_marg[i], videos[i],
                    item_spans[neg.sentence][neg.spans], videos[neg.video], margin,
                )

    terms = []
    reports = []
    for i in range(len(batch)):
        term = -item_elbo[i]
        matched = 0.0
        if i in item_match:
            term = term + item_match[i] * alpha
            matched = item_match[i].item()
        terms.append(term)
        e = item_elbo[i].item()
        reports.append(
            StepReport(e, item_kl[i].item(), item_ll[i].item(), matched, -e + alpha * matched)
        )
    return stack(terms).sum(), reports


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: CompoundParams | dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    config: TrainConfig,
) -> AdamState:
    """Bias-corrected Adam, in place. Parameters without a gradient are left alone."""
    tensors = params.tensors if isinstance(params, CompoundParams) else params
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, g in grads.items():
        if g is None:
            continue
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        tensors[name].data -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon_adam)
    return state


def clip_gradients(grads: dict[str, np.ndarray | None], max_norm: float | None) -> float:
    """Scale gradients in place to ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return norm


@dataclass
class TrainResult:
    params: CompoundParams
    history: list[dict]
    skipped: dict[str, int]

    def epoch_means(self, key: str) -> list[float]:
        by_epoch: dict[int, list[float]] = defaultdict(list)
        for row in self.history:
            by_epoch[row["epoch"]].append(row[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(
    sentences: Sequence[np.ndarray],
    grammar_config: GrammarConfig,
    config: TrainConfig,
    videos: Sequence | None = None,
    match_config: MatchConfig | None = None,
    model: str = "ptc",
    params: CompoundParams | None = None,
    metrics_log=None,
    on_epoch: Callable[[int, CompoundParams], None] | None = None,
) -> TrainResult:
    """Seeded minibatch training of the compound PCFG, with or without matching.

    ``videos[i]`` is the sampled clip matrix for sentence ``i`` (ptc) or a list
    of per-expert sampled matrices (mmc). ``metrics_log`` is an open text file
    receiving one JSON object per step.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    matching = model != "cpcfg" and config.alpha > 0
    if matching and videos is None:
        raise ValueError(f"model {model!r} with alpha > 0 needs video features")
    if model != "cpcfg" and match_config is None:
        match_config = MatchConfig(mode=model)

    skipped = {"too_short": 0, "too_long": 0}
    examples = []
    for i, toks in enumerate(sentences):
        n = len(toks)
        if n < 2:
            skipped["too_short"] += 1
            continue
        if n >= config.max_sentence_length:
            skipped["too_long"] += 1
            continue
        video = videos[i] if videos is not None else None
        examples.append(Example(np.asarray(toks, dtype=np.int64), video, str(i)))
    if skipped["too_short"] or skipped["too_long"]:
        log.warning("skipped sentences outside length bounds: %s", skipped)
    if not examples:
        raise ValueError("no usable sentences")

    rng = np.random.default_rng(config.seed)
    if params is None:
        params = CompoundParams.init(grammar_config, rng)
        if model != "cpcfg":
            init_matching_params(params, match_config, rng)
    state = AdamState()
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            started = time.perf_counter()
            batch = [examples[k] for k in order[start : start + config.batch_size]]
            noises = rng.standard_normal((len(batch), grammar_config.z_dim))
            negatives = sample_negatives([len(ex) for ex in batch], rng) if matching else None
            loss, reports = total_loss(
                params, batch, noises, config, match_config, model, negatives
            )
            params.zero_grad()
            backward(loss)
            grads = {name: t.grad for name, t in params.items()}
            grad_norm = clip_gradients(grads, config.clip_grad_norm)
            adam_step(params, grads, state, config)
            step += 1
            row = {
                "step": step,
                "epoch": epoch,
                **{
                    k: float(np.mean([getattr(r, k) for r in reports]))
                    for k in ("elbo", "kl", "log_likelihood", "matching_loss", "total")
                },
                "grad_norm": grad_norm,
                "wall_ms": round(1000 * (time.perf_counter() - started), 3),
            }
            history.append(row)
            if metrics_log is not None:
                metrics_log.write(json.dumps(row) + "\n")
        if on_epoch is not None:
            on_epoch(epoch, params)
    return TrainResult(params, history, skipped)
