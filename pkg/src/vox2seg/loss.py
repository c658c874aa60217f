"""Generalized dice loss and the least-squares adversarial objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossConfig:
    alpha: float = 5.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


def generalized_dice_loss(y: torch.Tensor, y_hat: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Generalized dice loss over a ``(N, C, X, Y, Z)`` batch.

    Class weights are ``1 / (volume_l**2 + eps)`` with the class volume summed
    over the whole batch, and the overlap is pooled over the batch as well, so
    every class (background included) contributes one weighted term.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if not (torch.isfinite(y).all() and torch.isfinite(y_hat).all()):
        raise ValueError("non-finite input to generalized dice loss")
    dims = [0] + list(range(2, y.ndim))
    volume = y.sum(dim=dims)
    w = 1.0 / (volume * volume + eps)
    intersection = (y * y_hat).sum(dim=dims)
    total = (y + y_hat).sum(dim=dims)
    return 1.0 - 2.0 * (w * intersection).sum() / (w * total).sum()


def _mse_to(x: torch.Tensor, target: float) -> torch.Tensor:
    return ((x - target) ** 2).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares critic loss: real pairs pushed to 1, generated pairs to 0."""
    if d_real.shape != d_fake.shape:
        raise ValueError(f"shape mismatch: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    return _mse_to(d_real, 1.0) + _mse_to(d_fake, 0.0)


def generator_loss(d_fake: torch.Tensor, y: torch.Tensor, y_hat: torch.Tensor,
                   cfg: LossConfig | float = 5.0) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(total, adversarial, gdl)`` with ``total = adversarial + alpha * gdl``.

    With ``alpha == 0`` the dice term is still computed for logging but does
    not enter ``total`` (and therefore contributes no gradient).
    """
    if not isinstance(cfg, LossConfig):
        cfg = LossConfig(alpha=float(cfg))
    adversarial = _mse_to(d_fake, 1.0)
    gdl = generalized_dice_loss(y, y_hat, cfg.eps)
    if cfg.alpha == 0:
        return adversarial, adversarial, gdl.detach()
    return adversarial + cfg.alpha * gdl, adversarial, gdl
