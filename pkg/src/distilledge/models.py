"""Differentiable model components.

A single-layer masked LSTM classifier over learned embeddings, an optional
aspect-attention head, feature-compression autoencoders, parameter
accounting, and a finite-difference gradient checker. PyTorch supplies the
reverse-mode differentiation; the LSTM cell is hand-rolled so the parameter
count is exactly 4*H*((d+1)+H): per gate one input weight matrix (H x d),
one recurrent matrix (H x H), and one bias vector (H).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import EncodedExample
from .errors import ConfigError
from .utils import new_generator

INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int
    embedding_dim: int = 10
    hidden_size: int = 10
    num_aspects: int = 0
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.embedding_dim < 1 or self.hidden_size < 1:
            raise ConfigError("embedding_dim and hidden_size must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover at least PAD and UNK")
        if self.num_aspects == 1:
            raise ConfigError("num_aspects must be 0 (disabled) or >= 2")
        if self.num_aspects >= 2 and self.embedding_dim != self.hidden_size:
            raise ConfigError("the aspect head requires embedding_dim == hidden_size")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    @property
    def has_aspect_head(self) -> bool:
        return self.num_aspects >= 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ForwardTrace:
    """Per-example forward artifacts, sliced to the true (non-PAD) length."""
    embeddings: torch.Tensor        # (n, embedding_dim)
    hidden_seq: torch.Tensor        # (n, hidden_size)
    hidden: torch.Tensor            # (hidden_size,)
    logits: torch.Tensor            # (num_classes,)
    attention: torch.Tensor | None = None       # (num_aspects, n)
    aspect_feature: torch.Tensor | None = None  # (embedding_dim,)


@dataclass
class BatchTrace:
    """Batched forward artifacts; sequences keep their PAD positions."""
    embeddings: torch.Tensor        # (B, n, embedding_dim)
    hidden_seq: torch.Tensor        # (B, n, hidden_size)
    hidden: torch.Tensor            # (B, hidden_size)
    logits: torch.Tensor            # (B, num_classes)
    attention: torch.Tensor | None = None       # (B, num_aspects, n), PAD columns zeroed
    aspect_feature: torch.Tensor | None = None  # (B, embedding_dim)


def masked_aspect_attention(
    hidden_seq: torch.Tensor,
    aspect_embeddings: torch.Tensor,
    lengths: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token attention over aspects plus the recombined aspect feature.

    For token i, score_ji = h_i . a_j; a softmax across aspects gives the
    attention column for that token. Sentence weights average the columns
    over non-PAD tokens, and the aspect feature is their weighted sum of
    aspect embeddings.
    """
    if aspect_embeddings.shape[0] < 2:
        raise ConfigError("aspect attention requires at least 2 aspects")
    scores = torch.einsum("bnh,mh->bmn", hidden_seq, aspect_embeddings)
    alpha = torch.softmax(scores, dim=1)
    n = hidden_seq.shape[1]
    live = (torch.arange(n, device=hidden_seq.device)[None, :] < lengths[:, None])
    alpha = alpha * live[:, None, :].to(alpha.dtype)
    denom = lengths.clamp_min(1).to(alpha.dtype)
    sentence_weights = alpha.sum(dim=2) / denom[:, None]
    aspect_feature = sentence_weights @ aspect_embeddings
    return alpha, aspect_feature


def aspect_attention(
    hidden_seq: torch.Tensor, aspect_embeddings: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-example form of masked_aspect_attention (no PAD positions)."""
    n = hidden_seq.shape[0]
    lengths = torch.tensor([n], device=hidden_seq.device)
    alpha, feat = masked_aspect_attention(hidden_seq[None], aspect_embeddings, lengths)
    return alpha[0], feat[0]


class SequenceClassifier(nn.Module):
    """Embedding -> masked LSTM -> affine head, with optional aspect attention.

    PAD positions are masked out of the recurrence: the state is carried
    through unchanged, so the final hidden state is the one after the last
    real token.
    """

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        g = generator if generator is not None else new_generator(config.seed)

        def init(*shape):
            t = torch.empty(*shape)
            t.uniform_(-INIT_SCALE, INIT_SCALE, generator=g)
            return nn.Parameter(t)

        d, h = config.embedding_dim, config.hidden_size
        self.embedding = init(config.vocab_size, d)
        # packed gate order: input, forget, cell, output
        self.w_input = init(4 * h, d)
        self.w_recurrent = init(4 * h, h)
        self.bias = init(4 * h)
        self.head_weight = init(config.num_classes, h)
        self.head_bias = init(config.num_classes)
        if config.has_aspect_head:
            self.aspect_embeddings = init(config.num_aspects, d)
        else:
            self.aspect_embeddings = None

    def _recurrence(self, emb: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        batch, n, _ = emb.shape
        h = emb.new_zeros(batch, self.config.hidden_size)
        c = emb.new_zeros(batch, self.config.hidden_size)
        steps = []
        for t in range(n):
            gates = emb[:, t] @ self.w_input.T + h @ self.w_recurrent.T + self.bias
            gi, gf, gc, go = gates.chunk(4, dim=1)
            gi, gf, go = torch.sigmoid(gi), torch.sigmoid(gf), torch.sigmoid(go)
            gc = torch.tanh(gc)
            c_t = gf * c + gi * gc
            h_t = go * torch.tanh(c_t)
            live = (lengths > t).unsqueeze(1)
            h = torch.where(live, h_t, h)
            c = torch.where(live, c_t, c)
            steps.append(h)
        return torch.stack(steps, dim=1), h

    def _head(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.head_weight.T + self.head_bias

    def forward(
        self, token_ids: torch.Tensor, lengths: torch.Tensor, with_aspects: bool = False
    ) -> BatchTrace:
        emb = F.embedding(token_ids, self.embedding)
        hidden_seq, hidden = self._recurrence(emb, lengths)
        logits = self._head(hidden)
        attention = aspect_feature = None
        if with_aspects:
            if not self.config.has_aspect_head:
                raise ConfigError("model has no aspect head (num_aspects < 2)")
            attention, aspect_feature = masked_aspect_attention(
                hidden_seq, self.aspect_embeddings, lengths
            )
        return BatchTrace(emb, hidden_seq, hidden, logits, attention, aspect_feature)

    def trace(self, example: EncodedExample, with_aspects: bool = False) -> ForwardTrace:
        """Forward a single encoded example; results sliced to its length."""
        ids = torch.tensor([example.token_ids], dtype=torch.long)
        lengths = torch.tensor([example.length], dtype=torch.long)
        with torch.no_grad():
            out = self.forward(ids, lengths, with_aspects=with_aspects)
        n = example.length
        return ForwardTrace(
            embeddings=out.embeddings[0, :n].clone(),
            hidden_seq=out.hidden_seq[0, :n].clone(),
            hidden=out.hidden[0].clone(),
            logits=out.logits[0].clone(),
            attention=None if out.attention is None else out.attention[0, :, :n].clone(),
            aspect_feature=None if out.aspect_feature is None else out.aspect_feature[0].clone(),
        )

    @torch.no_grad()
    def predict_logits(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.forward(token_ids, lengths).logits

    @torch.no_grad()
    def predict_proba(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(token_ids, lengths).logits, dim=-1)

    def input_gradients(
        self, token_ids: torch.Tensor, lengths: torch.Tensor, labels: torch.Tensor
    ) -> torch.Tensor:
        """Gradient of the summed CE loss w.r.t. the token embeddings.

        Returns a (B, n, d) tensor; PAD positions come out exactly zero
        because they never enter the recurrence.
        """
        emb = F.embedding(token_ids, self.embedding).detach().requires_grad_(True)
        _, hidden = self._recurrence(emb, lengths)
        loss = F.cross_entropy(self._head(hidden), labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, emb)
        return grad


class Autoencoder(nn.Module):
    """Affine encoder with tanh into the compressed space; linear decoder back."""

    def __init__(self, high_dim: int, low_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if high_dim < 1 or low_dim < 1:
            raise ConfigError("autoencoder dimensions must be >= 1")
        self.high_dim = high_dim
        self.low_dim = low_dim
        g = generator if generator is not None else new_generator(0)

        def init(*shape):
            t = torch.empty(*shape)
            t.uniform_(-INIT_SCALE, INIT_SCALE, generator=g)
            return nn.Parameter(t)

        self.enc_weight = init(low_dim, high_dim)
        self.enc_bias = init(low_dim)
        self.dec_weight = init(high_dim, low_dim)
        self.dec_bias = init(high_dim)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.high_dim:
            raise ValueError(f"expected last dim {self.high_dim}, got {x.shape[-1]}")
        return torch.tanh(x @ self.enc_weight.T + self.enc_bias)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.low_dim:
            raise ValueError(f"expected last dim {self.low_dim}, got {z.shape[-1]}")
        return z @ self.dec_weight.T + self.dec_bias

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.encode(x)
        return z, self.decode(z)


def param_count(config: ModelConfig) -> dict[str, int]:
    """Exact parameter accounting; lstm follows 4*H*((d+1)+H)."""
    d, h = config.embedding_dim, config.hidden_size
    lstm = 4 * h * ((d + 1) + h)
    embedding = config.vocab_size * d
    heads = (h + 1) * config.num_classes
    if config.has_aspect_head:
        heads += config.num_aspects * d
    return {
        "embedding": embedding,
        "lstm": lstm,
        "heads": heads,
        "total": embedding + lstm + heads,
    }


@dataclass
class GradCheckEntry:
    param: str
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    num_checked: int
    worst: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    loss_fn,
    params: dict[str, torch.Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    num_samples: int = 50,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences against autograd for sampled parameters.

    ``loss_fn`` is a zero-argument callable returning a scalar; ``params``
    maps names to the leaf tensors the loss depends on. Run the model in
    float64 when a tight tolerance matters.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError("eps must be in (0, 1e-2]")
    names = list(params)
    tensors = [params[n] for n in names]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite at the evaluation point")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    rng = random.Random(seed)
    picks = rng.sample(range(total), min(num_samples, total))

    entries = []
    for flat in picks:
        k = 0
        while flat >= sizes[k]:
            flat -= sizes[k]
            k += 1
        t = tensors[k]
        idx = []
        rem = flat
        for s in reversed(t.shape):
            idx.append(rem % s)
            rem //= s
        idx = tuple(reversed(idx)) if t.dim() else ()
        with torch.no_grad():
            orig = t[idx].item()
            t[idx] = orig + eps
            loss_plus = float(loss_fn())
            t[idx] = orig - eps
            loss_minus = float(loss_fn())
            t[idx] = orig
        numeric = (loss_plus - loss_minus) / (2 * eps)
        analytic = 0.0 if grads[k] is None else float(grads[k][idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        entries.append(GradCheckEntry(names[k], flat, analytic, numeric, rel))

    entries.sort(key=lambda e: -e.rel_error)
    max_rel = entries[0].rel_error if entries else 0.0
    return GradCheckReport(max_rel, tol, len(entries), entries[:5])
