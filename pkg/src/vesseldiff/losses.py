"""Training objectives and optimizers.

Loss functions build on the autodiff tensors so gradients flow to network
parameters; targets and masks enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Union

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

__all__ = [
    "TrainingError",
    "VesselWeightConfig",
    "noise_loss",
    "vessel_weighted_noise_loss",
    "dice_loss",
    "bce_loss",
    "segmentation_loss",
    "dilate_mask",
    "Optimizer",
]

PROB_EPS = 1e-7


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite gradient or loss."""


@dataclass
class VesselWeightConfig:
    """Weighting of the extra noise-prediction penalty inside vessel regions."""

    lam: float = 1.0
    dilation_radius: int = 1


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def noise_loss(eps_true, eps_pred) -> Tensor:
    """Mean squared error over all elements."""
    eps_true, eps_pred = _as_t(eps_true), _as_t(eps_pred)
    if eps_true.shape != eps_pred.shape:
        raise nd.DimensionError(
            f"noise_loss shapes differ: {eps_true.shape} vs {eps_pred.shape}")
    d = eps_pred - eps_true
    return (d * d).mean()


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a square structuring element of the given radius."""
    if radius <= 0:
        return mask.astype(np.float64)
    out = mask.astype(bool)
    pad = np.pad(out, [(0, 0)] * (out.ndim - 2) + [(radius, radius), (radius, radius)])
    acc = np.zeros_like(out)
    h, w = out.shape[-2:]
    for di in range(2 * radius + 1):
        for dj in range(2 * radius + 1):
            acc |= pad[..., di:di + h, dj:dj + w]
    return acc.astype(np.float64)


def vessel_weighted_noise_loss(eps_true, eps_pred, mask: np.ndarray,
                               cfg: VesselWeightConfig = VesselWeightConfig()) -> Tensor:
    """noise_loss plus lambda times the mean squared error over dilated vessel pixels."""
    eps_true, eps_pred = _as_t(eps_true), _as_t(eps_pred)
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    if mask.shape != eps_true.shape:
        raise nd.DimensionError(
            f"mask shape {mask.shape} != noise shape {eps_true.shape}")
    base = noise_loss(eps_true, eps_pred)
    dil = dilate_mask(mask, cfg.dilation_radius)
    count = dil.sum()
    if cfg.lam == 0.0 or count == 0:
        return base
    d = eps_pred - eps_true
    vessel = (d * d * Tensor(dil)).sum() / count
    return base + cfg.lam * vessel


def dice_loss(probs, target, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*g)+smooth)/(sum(p)+sum(g)+smooth)."""
    probs, target = _as_t(probs), _as_t(target)
    if probs.shape != target.shape:
        raise nd.DimensionError(
            f"dice_loss shapes differ: {probs.shape} vs {target.shape}")
    inter = (probs * target).sum()
    denom = probs.sum() + target.sum() + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def bce_loss(probs, target) -> Tensor:
    """Pixelwise binary cross-entropy; probabilities clamped away from {0,1}."""
    probs, target = _as_t(probs), _as_t(target)
    if probs.shape != target.shape:
        raise nd.DimensionError(
            f"bce_loss shapes differ: {probs.shape} vs {target.shape}")
    p = nd.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return -(target * nd.log(p) + (1.0 - target) * nd.log(1.0 - p)).mean()


def segmentation_loss(logits: Tensor, target) -> Tensor:
    """Equal-weight Dice + binary cross-entropy on sigmoid probabilities."""
    probs = nd.sigmoid(logits)
    return dice_loss(probs, target) + bce_loss(probs, target)


@dataclass
class Optimizer:
    """Adam / AdamW over a named parameter dict.

    AdamW applies decoupled weight decay; plain Adam ignores weight_decay.
    """

    params: Dict[str, Tensor]
    kind: str = "adam"
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = field(default=0, init=False)
    _m: Dict[str, np.ndarray] = field(default_factory=dict, init=False)
    _v: Dict[str, np.ndarray] = field(default_factory=dict, init=False)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind '{self.kind}'")
        for name, p in self.params.items():
            self._m[name] = np.zeros_like(p.data)
            self._v[name] = np.zeros_like(p.data)

    def step(self) -> None:
        """Apply one update from the gradients currently held by the parameters."""
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.kind == "adamw":
                p.data *= 1.0 - self.learning_rate * self.weight_decay
            p.data -= self.learning_rate * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
