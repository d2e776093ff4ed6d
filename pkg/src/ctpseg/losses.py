"""Training losses: weighted synthesis terms and attention-weighted segmentation terms.

Every function accepts torch tensors of any float dtype and stays
differentiable, so the same code runs in float64 for finite-difference
checking and float32 for training.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

PROB_FLOOR = 1e-7
CLASS_WEIGHT_EPS = 1e-6
DICE_EPS = 1e-5

SYNTH_WEIGHT = 1.0
EXTRACT_WEIGHT = 1.0
CONTEXT_WEIGHT = 1.2


def weighted_l2(pred: torch.Tensor, target: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Root mean square of the attention-weighted residual."""
    diff = weights * (pred - target)
    return torch.sqrt((diff**2).sum() / diff.numel())


def contextual_l1(pred: torch.Tensor, target: torch.Tensor, encoder) -> torch.Tensor:
    """Mean absolute difference between context embeddings of the two images."""
    return (encoder(pred) - encoder(target)).abs().mean()


def synthesis_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    weights: torch.Tensor,
    encoder,
    context_weight: float = CONTEXT_WEIGHT,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted L2 plus weighted contextual L1; returns (total, l2, l1)."""
    l2 = weighted_l2(pred, target, weights)
    l1 = contextual_l1(pred, target, encoder)
    return l2 + context_weight * l1, l2, l1


def _one_hot(mask: torch.Tensor, n_classes: int) -> torch.Tensor:
    """(N,H,W) binary mask -> (N,C,H,W) one-hot, background first."""
    fg = mask.to(dtype=torch.get_default_dtype() if not mask.is_floating_point() else mask.dtype)
    if n_classes != 2:
        raise ValueError(f"only binary segmentation supported, got {n_classes} classes")
    return torch.stack([1.0 - fg, fg], dim=1)


def weighted_cross_entropy(
    probs: torch.Tensor, mask: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Attention-weighted cross entropy on class probabilities.

    probs: (N,C,H,W) softmax output; mask: (N,H,W) binary foreground;
    weights: (N,H,W). Probabilities are clamped away from 0 and 1 before the
    log. Normalized by the total weight, so a uniform weight map reduces to
    plain mean cross entropy.
    """
    p = probs.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    onehot = _one_hot(mask, probs.shape[1]).to(p.dtype)
    ce = -(onehot * torch.log(p)).sum(dim=1)
    return (weights * ce).sum() / weights.sum()


def _dice_ratio(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """2*(weighted intersection + eps) / (weighted total + eps), i.e. 1 - L_GD."""
    onehot = _one_hot(mask, probs.shape[1]).to(probs.dtype)
    axes = (0, 2, 3)
    y_sum = onehot.sum(axes)
    m = 1.0 / (y_sum**2 + CLASS_WEIGHT_EPS)
    intersect = (m * (probs * onehot).sum(axes)).sum()
    total = (m * (probs + onehot).sum(axes)).sum()
    return 2.0 * (intersect + DICE_EPS) / (total + DICE_EPS)


def generalized_dice(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Generalized Dice loss with inverse-square-volume class weights.

    Class weight m_c = 1 / ((sum Y_c)^2 + 1e-6); numerator and denominator
    both get a 1e-5 smoothing term. The raw value dips a hair below zero at
    perfect overlap because of the smoothing, so it is clamped to [0, 1).
    """
    return (1.0 - _dice_ratio(probs, mask)).clamp(min=0.0)


def hardness_from_gd(gd: torch.Tensor) -> torch.Tensor:
    """-log(1 - L_GD): blows up as the Dice loss approaches 1."""
    return -torch.log(1.0 - gd)


def hardness_generalized_dice(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Same value as hardness_from_gd(generalized_dice(...)), computed from the
    ratio directly: a batch with empty masks can drive 1 - L_GD below float32
    resolution, where the subtraction would round to zero and the log to inf.
    The clamp at 1 mirrors the loss's clamp at 0."""
    return -torch.log(_dice_ratio(probs, mask).clamp(max=1.0))


def segmentation_loss(
    probs: torch.Tensor, mask: torch.Tensor, weights: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted cross entropy plus hardness-scaled Dice; returns (total, wce, hgd)."""
    wce = weighted_cross_entropy(probs, mask, weights)
    hgd = hardness_generalized_dice(probs, mask)
    return wce + hgd, wce, hgd


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar values of every loss term at one training step."""

    total: float
    seg: float
    wce: float
    hgd: float
    synth: float
    synth_l2: float
    synth_l1: float
    extract: float

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.field_names()}


def overall_loss(
    probs: torch.Tensor,
    mask: torch.Tensor,
    weights: torch.Tensor,
    pseudo: torch.Tensor | None = None,
    high_level: torch.Tensor | None = None,
    dwi: torch.Tensor | None = None,
    encoder=None,
    synth_weight: float = SYNTH_WEIGHT,
    extract_weight: float = EXTRACT_WEIGHT,
    context_weight: float = CONTEXT_WEIGHT,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Composite objective: segmentation + weighted synthesis and extraction terms.

    Returns the differentiable total plus a float breakdown of every term.
    The synthesis term compares the pseudo-DWI to the real DWI, the extraction
    term compares the extractor's high-level map to the same DWI; pipelines
    without those stages pass None and the terms contribute zero.
    """
    w4 = weights.unsqueeze(1) if weights.dim() == 3 else weights
    seg_total, wce, hgd = segmentation_loss(probs, mask, weights)
    total = seg_total
    synth_total = synth_l2 = synth_l1 = None
    extract_total = None
    if pseudo is not None:
        synth_total, synth_l2, synth_l1 = synthesis_loss(
            pseudo, dwi, w4, encoder, context_weight
        )
        total = total + synth_weight * synth_total
    if high_level is not None:
        extract_total, _, _ = synthesis_loss(high_level, dwi, w4, encoder, context_weight)
        total = total + extract_weight * extract_total

    def item(t):
        return float(t.detach()) if t is not None else 0.0

    breakdown = LossBreakdown(
        total=item(total),
        seg=item(seg_total),
        wce=item(wce),
        hgd=item(hgd),
        synth=item(synth_total),
        synth_l2=item(synth_l2),
        synth_l1=item(synth_l1),
        extract=item(extract_total),
    )
    return total, breakdown
