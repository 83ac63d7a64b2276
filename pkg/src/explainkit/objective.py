"""The four training loss terms and their weighted combination.

Terms: classifier cross-entropy over option scores, generator token-level
MLE, cross-entropy on the generator's pooled label logits, and the KL
distillation bridge between the two label distributions.

The per-sample sums are averaged by default so the loss weights stay
scale-free across batch sizes; ``reduction="sum"`` restores literal sums
(required for exact gradient-accumulation equivalence).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import LossError


@dataclass
class LossWeights:
    """Weights for the four loss terms plus the distillation temperature."""

    ce: float = 1.0
    mle: float = 1.0
    ce_g: float = 1.0
    dis: float = 1.0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise LossError(f"temperature must be > 0, got {self.temperature}")
        for name in ("ce", "mle", "ce_g", "dis"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be non-negative")


@dataclass
class LossReport:
    ce: float
    mle: float
    ce_g: float
    dis: float
    total: float
    token_count: int = 0
    sample_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _answers_to_indices(answers: Tensor) -> Tensor:
    if answers.dim() == 2:  # one-hot rows
        return answers.argmax(dim=-1)
    return answers.long()


def classification_loss(
    scores: Tensor, answers: Tensor, reduction: str = "mean"
) -> Tensor:
    """Cross-entropy of softmax-normalized option scores, (N, K) inputs.

    ``answers`` may be index form (N,) or one-hot (N, K).
    """
    indices = _answers_to_indices(answers)
    if scores.size(-1) != answers.size(-1) and answers.dim() == 2:
        raise LossError(
            f"K mismatch: scores {scores.size(-1)} vs answers {answers.size(-1)}"
        )
    return F.cross_entropy(scores, indices, reduction=reduction)


def mle_loss(
    logits: Tensor, targets: Tensor, mask: Tensor, reduction: str = "mean"
) -> Tensor:
    """Teacher-forced token negative log-likelihood.

    ``mask`` marks real (non-pad) target positions; PAD positions
    contribute exactly zero. Mean reduction divides by the number of
    unmasked tokens; sum reduction leaves the raw sum.
    """
    mask = mask.to(logits.dtype)
    total = mask.sum()
    if total.item() == 0:
        raise LossError("mle_loss needs at least one unmasked target position")
    log_probs = F.log_softmax(logits, dim=-1)
    token_nll = -log_probs.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    summed = (token_nll * mask).sum()
    if reduction == "sum":
        return summed
    return summed / total


def generator_label_loss(
    label_logits: Tensor, answers: Tensor, reduction: str = "mean"
) -> Tensor:
    """Cross-entropy on the generator's pooled label logits (same contract
    as classification_loss)."""
    return classification_loss(label_logits, answers, reduction=reduction)


def distillation_loss(
    classifier_logits: Tensor,
    generator_logits: Tensor,
    temperature: float = 1.0,
    detach_target: bool = False,
    rescale_by_temperature_sq: bool = False,
    reduction: str = "mean",
) -> Tensor:
    """KL(generator distribution || classifier distribution) at temperature.

    The generator side acts as the target distribution; the classifier
    side is consumed in log space. Gradients flow into both sides by
    default; ``detach_target`` stops them at the generator. The optional
    temperature-squared rescaling is off by default (a no-op at the
    default temperature 1.0).
    """
    if temperature <= 0:
        raise LossError(f"temperature must be > 0, got {temperature}")
    log_p = F.log_softmax(classifier_logits / temperature, dim=-1)
    log_g = F.log_softmax(generator_logits / temperature, dim=-1)
    if detach_target:
        log_g = log_g.detach()
    target = log_g.exp()
    per_sample = (target * (log_g - log_p)).sum(dim=-1)
    value = per_sample.sum() if reduction == "sum" else per_sample.mean()
    if rescale_by_temperature_sq:
        value = value * temperature**2
    return value


def total_loss(
    ce: Tensor, mle: Tensor, ce_g: Tensor, dis: Tensor, weights: LossWeights
) -> Tensor:
    """Weighted combination of the four terms."""
    parts = (ce, mle, ce_g, dis)
    if any(not torch.isfinite(torch.as_tensor(p)).all() for p in parts):
        raise LossError("non-finite loss part")
    return (
        weights.ce * ce
        + weights.mle * mle
        + weights.ce_g * ce_g
        + weights.dis * dis
    )
