"""Loss terms of the two-domain adversarial objective.

All functions are pure and dtype-agnostic (float32 in training, float64 in
the finite-difference checks). Probabilities are clamped to [EPS, 1-EPS]
before any log so every term stays finite even when a sigmoid saturates.

Convention: every term here is *minimized* by its owner. The discriminator
minimizes ``adv_loss_discriminator`` (equivalent to its max side of the
min-max game), the generator/encoder side minimizes everything else.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Coefficients balancing the loss terms. Defaults apply to every dataset."""

    w_bg: float = 0.5
    w_t: float = 1.0
    w_adv: float = 0.5
    w_class: float = 0.5
    w_image: float = 1.0
    w_info_z: float = 1.0
    w_info_s: float = 1.0
    w_info_real: float = 1.0
    w_cr: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def _check_prob_batch(name: str, p: torch.Tensor) -> torch.Tensor:
    if p.numel() == 0:
        raise ValueError(f"{name}: empty batch")
    return p.clamp(EPS, 1.0 - EPS)


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p)


def adv_loss_discriminator(
    d_real_x: torch.Tensor,
    d_fake_x: torch.Tensor,
    d_real_y: torch.Tensor,
    d_fake_y: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    """Nonsaturating adversarial loss, discriminator side.

    w_adv * [ w_bg * (-E log d_real_x - E log(1 - d_fake_x))
            + w_t  * (-E log d_real_y - E log(1 - d_fake_y)) ]
    """
    d_real_x = _check_prob_batch("d_real_x", d_real_x)
    d_fake_x = _check_prob_batch("d_fake_x", d_fake_x)
    d_real_y = _check_prob_batch("d_real_y", d_real_y)
    d_fake_y = _check_prob_batch("d_fake_y", d_fake_y)
    bg = -_log(d_real_x).mean() - _log(1.0 - d_fake_x).mean()
    t = -_log(d_real_y).mean() - _log(1.0 - d_fake_y).mean()
    return w.w_adv * (w.w_bg * bg + w.w_t * t)


def adv_loss_generator(
    d_fake_x: torch.Tensor, d_fake_y: torch.Tensor, w: LossWeights
) -> torch.Tensor:
    """Nonsaturating adversarial loss, generator side: -log D on fakes."""
    d_fake_x = _check_prob_batch("d_fake_x", d_fake_x)
    d_fake_y = _check_prob_batch("d_fake_y", d_fake_y)
    return w.w_adv * (w.w_bg * (-_log(d_fake_x).mean()) + w.w_t * (-_log(d_fake_y).mean()))


def _bce(p: torch.Tensor, target: float) -> torch.Tensor:
    # binary cross entropy against a constant 0/1 target
    if target == 0.0:
        return -_log(1.0 - p).mean()
    return -_log(p).mean()


def class_loss_discriminator(
    c_real_x: torch.Tensor, c_real_y: torch.Tensor, w: LossWeights
) -> torch.Tensor:
    """Domain-classification loss on real images: background is class 0, target class 1."""
    c_real_x = _check_prob_batch("c_real_x", c_real_x)
    c_real_y = _check_prob_batch("c_real_y", c_real_y)
    return w.w_class * (_bce(c_real_x, 0.0) + _bce(c_real_y, 1.0))


def class_loss_generator(
    c_fake_x: torch.Tensor, c_fake_y: torch.Tensor, w: LossWeights
) -> torch.Tensor:
    """Same classification loss on generated images; minimized by the generator."""
    c_fake_x = _check_prob_batch("c_fake_x", c_fake_x)
    c_fake_y = _check_prob_batch("c_fake_y", c_fake_y)
    return w.w_class * (_bce(c_fake_x, 0.0) + _bce(c_fake_y, 1.0))


def _l1_rows(a: torch.Tensor, b) -> torch.Tensor:
    # per-sample sum of absolute coordinate errors, then batch mean
    if a.numel() == 0:
        raise ValueError("empty batch in info loss")
    d = a - b if isinstance(b, torch.Tensor) else a
    return d.abs().sum(dim=1).mean()


def info_loss(
    qz_fake_x: torch.Tensor,
    z_x: torch.Tensor,
    qs_fake_x: torch.Tensor,
    qz_fake_y: torch.Tensor,
    z_y: torch.Tensor,
    qs_fake_y: torch.Tensor,
    s_y: torch.Tensor,
    qs_real_x: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    """L1 recovery error of the latent codes through the encoder heads.

    Background fakes must recover z and emit s ~ 0, target fakes must recover
    both codes, and real background images must encode to s ~ 0.
    """
    if qz_fake_x.shape != z_x.shape or qz_fake_y.shape != z_y.shape:
        raise ValueError("common-code predictions and targets must have matching shapes")
    if qs_fake_y.shape != s_y.shape:
        raise ValueError("salient-code predictions and targets must have matching shapes")
    bg = w.w_info_z * _l1_rows(qz_fake_x, z_x) + w.w_info_s * _l1_rows(qs_fake_x, None)
    t = w.w_info_z * _l1_rows(qz_fake_y, z_y) + w.w_info_s * _l1_rows(qs_fake_y, s_y)
    real = w.w_info_real * _l1_rows(qs_real_x, None)
    return w.w_bg * bg + w.w_t * t + real


def image_reconstruction_loss(
    x_real: torch.Tensor,
    x_rec: torch.Tensor,
    y_real: torch.Tensor,
    y_rec: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    """Per-pixel mean L1 between real images and their code-roundtrip reconstructions."""
    if x_real.shape != x_rec.shape or y_real.shape != y_rec.shape:
        raise ValueError("reconstructions must match the real-image shapes")
    return w.w_image * (
        w.w_bg * (x_rec - x_real).abs().mean() + w.w_t * (y_rec - y_real).abs().mean()
    )


def cr_loss(logits: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Cross entropy of the shared-coordinate classifier against the true index k."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must be (batch, M) with M >= 2, got {tuple(logits.shape)}")
    if k.min() < 0 or k.max() >= logits.shape[1]:
        raise IndexError(f"shared index out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, k.long())


@dataclass
class GeneratorLossParts:
    adv: torch.Tensor
    classify: torch.Tensor
    info: torch.Tensor
    image: torch.Tensor
    cr: torch.Tensor | None = None


@dataclass
class DiscriminatorLossParts:
    adv: torch.Tensor
    classify: torch.Tensor


def total_generator_objective(parts: GeneratorLossParts, w: LossWeights) -> torch.Tensor:
    """Generator/encoder-side objective: sum of its parts, CR term scaled by w_cr."""
    total = parts.adv + parts.classify + parts.info + parts.image
    if parts.cr is not None:
        total = total + w.w_cr * parts.cr
    return total


def total_discriminator_objective(parts: DiscriminatorLossParts) -> torch.Tensor:
    """Discriminator-side objective: adversarial + real-image classification terms."""
    return parts.adv + parts.classify
