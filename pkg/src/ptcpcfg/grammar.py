"""Compound PCFG parameterization.

Rule probabilities for one sentence are produced from a latent vector ``z``:

* start rules ``S -> A`` score ``u_A . f_s([w_S; z])``,
* binary rules ``A -> B C`` score ``u_BC . [w_A; z]``,
* terminal rules ``T -> w`` score ``u_w . f_t([w_T; z])``,

each normalised with a softmax over its right-hand sides. Symbol order in
every table is nonterminals first, then preterminals.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Tensor, as_tensor, concat, constant, stack, take

UNK_ID = 0
NUM_ID = 1


@dataclass(frozen=True)
class GrammarConfig:
    num_nonterminals: int = 10
    num_preterminals: int = 20
    vocab_size: int = 20002
    symbol_dim: int = 64
    z_dim: int = 16
    hidden_dim: int = 128

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{f.name} must be a positive integer, got {value!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for the UNK and NUM ids")

    @property
    def num_symbols(self) -> int:
        return self.num_nonterminals + self.num_preterminals

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @classmethod
    def full_scale(cls, vocab_size: int = 20002) -> "GrammarConfig":
        return cls(30, 60, vocab_size, 256, 64, 512)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    if len(shape) > 2:
        receptive = int(np.prod(shape[:-2]))
        fan_in, fan_out = fan_in * receptive, fan_out * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class CompoundParams:
    """Named learnable tensors for the grammar, its posterior and the matcher."""

    config: GrammarConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.tensors[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "CompoundParams":
        out = CompoundParams(self.config)
        for name, t in self.tensors.items():
            out.add(name, t.data.copy())
        return out

    @classmethod
    def init(cls, config: GrammarConfig, rng: np.random.Generator) -> "CompoundParams":
        """Xavier-uniform weights and embeddings, zero biases."""
        p = cls(config)
        d, z, h = config.symbol_dim, config.z_dim, config.hidden_dim
        nt, t, v, s = (
            config.num_nonterminals,
            config.num_preterminals,
            config.vocab_size,
            config.num_symbols,
        )
        p.add("root_emb", xavier_uniform(rng, (1, d)))
        p.add("nonterm_emb", xavier_uniform(rng, (nt, d)))
        p.add("term_emb", xavier_uniform(rng, (t, d)))
        for prefix in ("root", "term"):
            p.add(f"{prefix}_in.W", xavier_uniform(rng, (d + z, d)))
            p.add(f"{prefix}_in.b", np.zeros(d))
            for k in (1, 2):
                p.add(f"{prefix}_res{k}.W", xavier_uniform(rng, (d, d)))
                p.add(f"{prefix}_res{k}.b", np.zeros(d))
        p.add("root_out", xavier_uniform(rng, (nt, d)))
        p.add("rule_out", xavier_uniform(rng, (s * s, d + z)))
        p.add("term_out", xavier_uniform(rng, (v, d)))
        p.add("enc_emb", xavier_uniform(rng, (v, d)))
        for direction in ("fwd", "bwd"):
            p.add(f"enc_{direction}.W", xavier_uniform(rng, (d + h, 4 * h)))
            p.add(f"enc_{direction}.b", np.zeros(4 * h))
        for head in ("mean", "lvar"):
            p.add(f"enc_{head}.W", xavier_uniform(rng, (2 * h, z)))
            p.add(f"enc_{head}.b", np.zeros(z))
        return p

    def grammar_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith(("span_", "video_", "mmc_"))]

    def matching_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(("span_", "video_", "mmc_"))]


@dataclass
class DiagGaussian:
    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_variance = as_tensor(self.log_variance)
        if self.mean.shape != self.log_variance.shape:
            raise ValueError("mean and log_variance shapes differ")

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        return cls(constant(np.zeros(shape)), constant(np.zeros(shape)))


@dataclass
class RuleTable:
    """Log rule probabilities for a batch of equal-length sentences.

    root: (B, NT); binary: (B, NT, S, S) with S = NT + T; term: (B, N, T).
    """

    root: Tensor
    binary: Tensor
    term: Tensor

    @property
    def batch_size(self) -> int:
        return self.root.shape[0]

    @property
    def length(self) -> int:
        return self.term.shape[1]

    @property
    def num_nonterminals(self) -> int:
        return self.root.shape[1]

    @property
    def num_preterminals(self) -> int:
        return self.term.shape[2]

    def detach(self) -> "RuleTable":
        return RuleTable(self.root.detach(), self.binary.detach(), self.term.detach())

    def select(self, b: int) -> "RuleTable":
        return RuleTable(self.root[b : b + 1], self.binary[b : b + 1], self.term[b : b + 1])


def linear(x: Tensor, params: CompoundParams, name: str) -> Tensor:
    return x @ params[f"{name}.W"] + params[f"{name}.b"]


def residual_mlp(x: Tensor, params: CompoundParams, prefix: str) -> Tensor:
    h = linear(x, params, f"{prefix}_in")
    inner = linear(linear(h, params, f"{prefix}_res1").relu(), params, f"{prefix}_res2").relu()
    return h + inner


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError("token ids must be a (batch, length) array")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise IndexError(f"token id out of range for vocabulary of size {vocab_size}")
    return tokens


def rule_log_probs(params: CompoundParams, z, tokens) -> RuleTable:
    """Per-sentence rule log-probabilities for latent vectors ``z`` (B, z_dim)."""
    cfg = params.config
    tokens = _check_tokens(tokens, cfg.vocab_size)
    z = as_tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    b, n = tokens.shape
    if z.shape != (b, cfg.z_dim):
        raise ValueError(f"z must have shape {(b, cfg.z_dim)}, got {z.shape}")
    nt, t, s, d = cfg.num_nonterminals, cfg.num_preterminals, cfg.num_symbols, cfg.symbol_dim

    root_in = concat([params["root_emb"].expand(b, d), z], axis=-1)
    root = (residual_mlp(root_in, params, "root") @ params["root_out"].transpose()).log_softmax(-1)

    z_nt = z.reshape(b, 1, cfg.z_dim).expand(b, nt, cfg.z_dim)
    rule_in = concat([params["nonterm_emb"].expand(b, nt, d), z_nt], axis=-1)
    binary = (rule_in @ params["rule_out"].transpose()).log_softmax(-1).reshape(b, nt, s, s)

    z_t = z.reshape(b, 1, cfg.z_dim).expand(b, t, cfg.z_dim)
    term_in = concat([params["term_emb"].expand(b, t, d), z_t], axis=-1)
    emit = (residual_mlp(term_in, params, "term") @ params["term_out"].transpose()).log_softmax(-1)
    term = emit[
        np.arange(b)[:, None, None], np.arange(t)[None, None, :], tokens[:, :, None]
    ]
    return RuleTable(root, binary, term)


def lstm(x: Tensor, params: CompoundParams, name: str, reverse: bool = False) -> list[Tensor]:
    """Single-layer LSTM over (B, N, D) inputs; returns the N hidden states."""
    b, n, _ = x.shape
    hidden = params[f"{name}.W"].shape[1] // 4
    h = constant(np.zeros((b, hidden)))
    c = constant(np.zeros((b, hidden)))
    steps = range(n - 1, -1, -1) if reverse else range(n)
    outputs: list[Tensor] = [None] * n  # type: ignore[list-item]
    for i in steps:
        gates = linear(concat([x[:, i, :], h], axis=-1), params, name)
        in_gate = gates[:, :hidden].sigmoid()
        forget = gates[:, hidden : 2 * hidden].sigmoid()
        cell = gates[:, 2 * hidden : 3 * hidden].tanh()
        out_gate = gates[:, 3 * hidden :].sigmoid()
        c = forget * c + in_gate * cell
        h = out_gate * c.tanh()
        outputs[i] = h
    return outputs


def bilstm_states(x: Tensor, params: CompoundParams, prefix: str) -> Tensor:
    """(B, N, 2H) concatenated forward/backward states."""
    fwd = lstm(x, params, f"{prefix}_fwd")
    bwd = lstm(x, params, f"{prefix}_bwd", reverse=True)
    return stack([concat([f, r], axis=-1) for f, r in zip(fwd, bwd)], axis=1)


def encode_posterior(params: CompoundParams, tokens) -> DiagGaussian:
    """q(z | sentence): BiLSTM, max-pool over time, two affine heads."""
    cfg = params.config
    tokens = _check_tokens(tokens, cfg.vocab_size)
    if tokens.shape[1] == 0:
        raise ValueError("cannot encode an empty sentence")
    states = bilstm_states(take(params["enc_emb"], tokens), params, "enc")
    pooled = states.max(axis=1)
    return DiagGaussian(linear(pooled, params, "enc_mean"), linear(pooled, params, "enc_lvar"))


def sample_z(q: DiagGaussian, noise) -> Tensor:
    """Reparameterised sample ``mu + exp(log_var / 2) * noise``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.mean.shape:
        noise = noise.reshape(q.mean.shape)
    return q.mean + (q.log_variance * 0.5).exp() * constant(noise)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian | None = None) -> Tensor:
    """KL(q || p) summed over the last axis; ``p`` defaults to N(0, I)."""
    if p is None:
        p = DiagGaussian.standard(q.mean.shape)
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError(
            f"dimension mismatch: {q.mean.shape[-1]} vs {p.mean.shape[-1]}"
        )
    diff = q.mean - p.mean
    terms = (
        p.log_variance
        - q.log_variance
        + (q.log_variance - p.log_variance).exp()
        + diff * diff / p.log_variance.exp()
        - 1.0
    )
    return terms.sum(axis=-1) * 0.5
