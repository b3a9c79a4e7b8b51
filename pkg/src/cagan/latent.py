"""Latent priors and samplers for the common/salient factor split.

Every image is generated from a pair of codes: a common vector ``z`` of
length ``L`` shared by both image domains, and a salient vector ``s`` of
length ``M`` that is identically zero for background-domain samples and
drawn from the target prior otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Tuple

import torch

COMMON_PRIORS = ("standard_normal", "uniform_pm1")
SALIENT_PRIORS = ("standard_normal", "uniform_0_1")

BACKGROUND = "background"
TARGET = "target"


@dataclass(frozen=True)
class PriorConfig:
    """Dimensions and distributions of the two latent blocks."""

    L: int = 64
    M: int = 64
    common_prior: str = "standard_normal"
    salient_target_prior: str = "standard_normal"

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be a positive integer, got {self.L}")
        if self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M}")
        if self.common_prior not in COMMON_PRIORS:
            raise ValueError(
                f"common_prior must be one of {COMMON_PRIORS}, got {self.common_prior!r}"
            )
        if self.salient_target_prior not in SALIENT_PRIORS:
            raise ValueError(
                f"salient_target_prior must be one of {SALIENT_PRIORS}, "
                f"got {self.salient_target_prior!r}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**d)


@dataclass(frozen=True)
class LatentCode:
    """One sample's code pair. Background codes carry s == 0."""

    z: torch.Tensor
    s: torch.Tensor

    def __post_init__(self):
        if self.z.ndim != 1 or self.s.ndim != 1:
            raise ValueError("z and s must be 1-d vectors")
        if not (torch.isfinite(self.z).all() and torch.isfinite(self.s).all()):
            raise ValueError("latent codes must be finite")


def sample_common(batch: int, cfg: PriorConfig, rng: torch.Generator) -> torch.Tensor:
    """Draw a (batch, L) matrix of i.i.d. common codes."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if cfg.common_prior == "standard_normal":
        return torch.randn(batch, cfg.L, generator=rng)
    # uniform_pm1
    return torch.rand(batch, cfg.L, generator=rng) * 2.0 - 1.0


def _sample_salient_target(batch: int, cfg: PriorConfig, rng: torch.Generator) -> torch.Tensor:
    if cfg.salient_target_prior == "standard_normal":
        return torch.randn(batch, cfg.M, generator=rng)
    # uniform_0_1: open at 0 in spirit; a draw of exactly 0.0 is measure-zero
    return torch.rand(batch, cfg.M, generator=rng)


def sample_salient(
    batch: int, domain: str, cfg: PriorConfig, rng: torch.Generator
) -> torch.Tensor:
    """Draw a (batch, M) matrix of salient codes for the given domain.

    Background codes are exactly zero (point mass at 0); target codes are
    i.i.d. draws from the configured target prior.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if domain == BACKGROUND:
        return torch.zeros(batch, cfg.M)
    if domain == TARGET:
        return _sample_salient_target(batch, cfg, rng)
    raise ValueError(f"domain must be {BACKGROUND!r} or {TARGET!r}, got {domain!r}")


def sample_cr_pair(
    cfg: PriorConfig, rng: torch.Generator
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, int]:
    """Draw one constrained code pair for the contrastive regularizer.

    Returns (z, s1, s2, k) where both pair members share the common code z,
    s1[k] == s2[k] for a uniformly drawn index k, and s1[j] != s2[j] for
    every j != k (colliding coordinates are redrawn).
    """
    z, s1, s2, k = sample_cr_batch(1, cfg, rng)
    return z[0], s1[0], s2[0], int(k[0])


def sample_cr_batch(
    batch: int, cfg: PriorConfig, rng: torch.Generator
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched form of :func:`sample_cr_pair`; k has shape (batch,)."""
    if cfg.M < 2:
        raise ValueError(
            f"the contrastive pair sampler needs M >= 2 (one shared and at least "
            f"one differing coordinate), got M={cfg.M}"
        )
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    z = sample_common(batch, cfg, rng)
    s1 = _sample_salient_target(batch, cfg, rng)
    s2 = _sample_salient_target(batch, cfg, rng)
    k = torch.randint(0, cfg.M, (batch,), generator=rng)
    rows = torch.arange(batch)
    s2[rows, k] = s1[rows, k]
    # Collisions on non-shared coordinates have probability zero under a
    # continuous prior but are possible in finite precision; redraw them.
    while True:
        collide = (s1 == s2)
        collide[rows, k] = False
        if not collide.any():
            break
        fresh = _sample_salient_target(batch, cfg, rng)
        s2 = torch.where(collide, fresh, s2)
    return z, s1, s2, k
