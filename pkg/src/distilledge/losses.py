"""Training objectives.

Task losses (CE and guided complement entropy), feature-mapping MSEs,
temperature-scaled KL label distillation, autoencoder reconstruction, the
interpretable loss, and the weighted composite. All losses use natural
logarithms and mean reduction over the batch; the distillation KL carries
no T^2 rescaling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

GCE_EPS = 1e-12


class GceDegeneracyWarning(UserWarning):
    """Emitted when GCE collapses because the complement has a single class."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.2
    lambda2: float = 0.8
    lambda3: float = 0.5
    lambda4: float = 0.5
    temperature: float = 80.0
    alpha: float = 1.0  # GCE guidance exponent

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")


@dataclass
class LossBreakdown:
    task: torch.Tensor | float
    embedding_map: torch.Tensor | float
    latent_map: torch.Tensor | float
    label_distill: torch.Tensor | float
    autoencoder: torch.Tensor | float
    interpretable: torch.Tensor | float
    total: torch.Tensor | float

    TERMS = ("task", "embedding_map", "latent_map", "label_distill",
             "autoencoder", "interpretable", "total")

    def floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.TERMS}


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy, natural log."""
    return F.cross_entropy(logits, labels)


def gce_per_sample(logits: torch.Tensor, labels: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Per-sample guided complement entropy terms, each in [-1, 0].

    term = -p_true^alpha * H(complement) / log(K-1), where the complement
    distribution renormalizes the false-class probabilities by
    max(1 - p_true, eps) and 0*log(0) counts as 0.
    """
    num_classes = logits.shape[-1]
    if num_classes < 2:
        raise ValueError("GCE requires at least 2 classes")
    if num_classes == 2:
        warnings.warn(
            "GCE is degenerate for K=2 (the complement holds a single class); "
            "returning 0", GceDegeneracyWarning, stacklevel=2,
        )
        return logits.new_zeros(logits.shape[0])
    probs = torch.softmax(logits, dim=-1)
    p_true = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    comp = probs / (1.0 - p_true).clamp_min(GCE_EPS).unsqueeze(1)
    is_comp = torch.ones_like(probs, dtype=torch.bool)
    is_comp.scatter_(1, labels.unsqueeze(1), False)
    # route the true-class column to a constant so no -inf gradient leaks in
    comp_safe = torch.where(is_comp, comp, comp.new_ones(()))
    entropy = -torch.special.xlogy(comp_safe, comp_safe).sum(dim=1)
    return -(p_true ** alpha) * entropy / math.log(num_classes - 1)


def gce_loss(logits: torch.Tensor, labels: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Mean guided complement entropy loss over the batch."""
    return gce_per_sample(logits, labels, alpha).mean()


def feature_map_loss(mapped_full: torch.Tensor, compressed: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between mapped teacher and student features."""
    if mapped_full.shape != compressed.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(mapped_full.shape)} vs {tuple(compressed.shape)}"
        )
    return ((mapped_full - compressed) ** 2).mean()


def distill_loss(
    teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float
) -> torch.Tensor:
    """KL(teacher || student) at temperature T, mean over the batch.

    The teacher side is detached; there is no T^2 rescaling.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    t_log = torch.log_softmax(teacher_logits.detach() / temperature, dim=-1)
    s_log = torch.log_softmax(student_logits / temperature, dim=-1)
    t_prob = t_log.exp()
    return (t_prob * (t_log - s_log)).sum(dim=-1).mean()


def ae_loss(
    e_full: torch.Tensor, e_rec: torch.Tensor, h_full: torch.Tensor, h_rec: torch.Tensor
) -> torch.Tensor:
    """Summed reconstruction MSE for the embedding and latent autoencoders."""
    return feature_map_loss(e_full, e_rec) + feature_map_loss(h_full, h_rec)


def interpretable_loss(
    aspect_feature: torch.Tensor, hidden: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """MSE between the recombined aspect feature and the latent feature.

    ``mask`` selects the rows that carry an aspect annotation; a batch with
    no annotated rows contributes exactly 0.
    """
    if aspect_feature.shape != hidden.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(aspect_feature.shape)} vs {tuple(hidden.shape)}"
        )
    if mask is not None:
        if not bool(mask.any()):
            return hidden.new_zeros(())
        aspect_feature = aspect_feature[mask]
        hidden = hidden[mask]
    return ((aspect_feature - hidden) ** 2).mean()


def composite_loss(
    task, embedding_map, latent_map, label_distill, autoencoder, interpretable,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of the six objectives.

    total = l1*task + l2*(embedding_map + latent_map + label_distill)
          + l3*autoencoder + l4*interpretable
    """
    total = (
        weights.lambda1 * task
        + weights.lambda2 * (embedding_map + latent_map + label_distill)
        + weights.lambda3 * autoencoder
        + weights.lambda4 * interpretable
    )
    return LossBreakdown(task, embedding_map, latent_map, label_distill,
                         autoencoder, interpretable, total)
