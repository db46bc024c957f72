"""Pair, adversarial, classification and cyclic-reconstruction losses and their weighted sums."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import torch
import torch.nn.functional as F

from ucan.core import ShapeMismatchError, TrainConfig, TrainingDivergenceError, TracerId

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    pair: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    clsf_real: float = 0.0
    clsf_fake: float = 0.0
    rec: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


PART_NAMES = ("pair", "adv_g", "adv_d", "clsf_real", "clsf_fake", "rec")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def pair_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the synthesized and the ground-truth target volume."""
    _check_shapes(pred, gt)
    return (pred - gt).abs().mean()


def cyclic_reconstruction_loss(x_pet: torch.Tensor, x_cyc: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the input volume and its round-trip translation."""
    _check_shapes(x_pet, x_cyc)
    return (x_pet - x_cyc).abs().mean()


def adversarial_losses(
    d_real: torch.Tensor, d_fake: torch.Tensor, mode: str = "non_saturating"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy GAN losses on post-sigmoid score maps.

    Returns ``(adv_d, adv_g)``. The discriminator term is
    ``-mean(log d_real) - mean(log(1 - d_fake))``. In ``non_saturating`` mode
    the generator minimizes ``-mean(log d_fake)``; in ``saturating`` mode it
    minimizes ``mean(log(1 - d_fake))``, i.e. maximizes the discriminator's
    fake term directly.
    """
    d_real = d_real.clamp(SCORE_EPS, 1 - SCORE_EPS)
    d_fake_c = d_fake.clamp(SCORE_EPS, 1 - SCORE_EPS)
    adv_d = -torch.log(d_real).mean() - torch.log1p(-d_fake_c).mean()
    return adv_d, generator_adversarial_loss(d_fake, mode)


def generator_adversarial_loss(d_fake: torch.Tensor, mode: str = "non_saturating") -> torch.Tensor:
    d_fake = d_fake.clamp(SCORE_EPS, 1 - SCORE_EPS)
    if mode == "non_saturating":
        return -torch.log(d_fake).mean()
    if mode == "saturating":
        return torch.log1p(-d_fake).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def classification_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean negative log-softmax probability of the target tracer class.

    ``logits`` is (N, 3) or a single 3-vector; ``target`` is a tensor of class
    indices, a single index, or a :class:`TracerId`.
    """
    if logits.dim() == 1:
        logits = logits[None]
    if isinstance(target, TracerId):
        target = target.ordinal
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(target)
    target = target.to(device=logits.device, dtype=torch.long).reshape(-1)
    if target.numel() == 1 and logits.shape[0] > 1:
        target = target.expand(logits.shape[0])
    return F.cross_entropy(logits, target)


def combine(parts: Mapping[str, float], cfg: TrainConfig) -> LossBreakdown:
    """Weighted generator and discriminator objectives from the individual terms.

    Missing parts count as zero. Raises :class:`TrainingDivergenceError`
    naming the first non-finite term.
    """
    unknown = set(parts) - set(PART_NAMES)
    if unknown:
        raise KeyError(f"unknown loss parts {sorted(unknown)}")
    vals = {k: float(parts.get(k, 0.0)) for k in PART_NAMES}
    for k in PART_NAMES:
        if not math.isfinite(vals[k]):
            raise TrainingDivergenceError(k, vals[k])
    # fsum: correctly rounded, so unit parts give exactly 1.7 / 0.2 at the default weights
    total_g = math.fsum(
        [vals["pair"], cfg.alpha_rec * vals["rec"], cfg.alpha_adv * vals["adv_g"], cfg.alpha_clsf * vals["clsf_fake"]]
    )
    total_d = math.fsum([cfg.alpha_adv * vals["adv_d"], cfg.alpha_clsf * vals["clsf_real"]])
    return LossBreakdown(**vals, total_g=total_g, total_d=total_d)


def generator_objective(terms: Mapping[str, torch.Tensor], cfg: TrainConfig) -> torch.Tensor:
    """Differentiable counterpart of ``combine(...).total_g``."""
    return terms["pair"] + cfg.alpha_rec * terms["rec"] + cfg.alpha_adv * terms["adv_g"] + cfg.alpha_clsf * terms["clsf_fake"]


def discriminator_objective(terms: Mapping[str, torch.Tensor], cfg: TrainConfig) -> torch.Tensor:
    """Differentiable counterpart of ``combine(...).total_d``."""
    return cfg.alpha_adv * terms["adv_d"] + cfg.alpha_clsf * terms["clsf_real"]
