"""Diffusion-process arithmetic: forward corruption, reverse steps, DDIM.

Every function here is pure numpy on value arrays. Noise predictions are
always supplied by the caller, so each formula is unit-testable without a
trained network. Timestep t=0 means clean; alpha_bar[0] = 1 by convention.
"""

from __future__ import annotations

import numpy as np

from .schedule import NoiseSchedule

__all__ = [
    "forward_marginal",
    "forward_step",
    "posterior_mean",
    "ddpm_sample_step",
    "predict_x0",
    "ddim_reverse_step",
    "ddim_invert_step",
]


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep {t} outside 1..{sched.T}")


def _check_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def forward_marginal(x0: np.ndarray, t: int, eps: np.ndarray,
                     sched: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_t(t, sched)
    _check_shapes(x0, eps, "forward_marginal")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_step(x_prev: np.ndarray, t: int, noise: np.ndarray,
                 sched: NoiseSchedule) -> np.ndarray:
    """One Markov corruption step: sqrt(1-beta_t)*x_{t-1} + sqrt(beta_t)*noise."""
    _check_t(t, sched)
    _check_shapes(x_prev, noise, "forward_step")
    b = sched.beta[t]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * noise


def posterior_mean(x_t: np.ndarray, t: int, eps_pred: np.ndarray,
                   sched: NoiseSchedule) -> np.ndarray:
    """Learned reverse-process mean given a noise prediction."""
    _check_t(t, sched)
    _check_shapes(x_t, eps_pred, "posterior_mean")
    b = sched.beta[t]
    ab = sched.alpha_bar[t]
    return (x_t - (b / np.sqrt(1.0 - ab)) * eps_pred) / np.sqrt(1.0 - b)


def ddpm_sample_step(x_t: np.ndarray, t: int, eps_pred: np.ndarray,
                     noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Stochastic reverse step; deterministic at the t=1 boundary."""
    mean = posterior_mean(x_t, t, eps_pred, sched)
    if t == 1:
        return mean
    _check_shapes(x_t, noise, "ddpm_sample_step")
    return mean + sched.sigma[t] * noise


def predict_x0(x_t: np.ndarray, t: int, eps_pred: np.ndarray,
               sched: NoiseSchedule) -> np.ndarray:
    """Reconstruct the clean image implied by a noise prediction."""
    _check_t(t, sched)
    _check_shapes(x_t, eps_pred, "predict_x0")
    ab = sched.alpha_bar[t]
    return (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def _ddim_move(x_t: np.ndarray, t_from: int, t_to: int, eps_pred: np.ndarray,
               sched: NoiseSchedule) -> np.ndarray:
    x0 = predict_x0(x_t, t_from, eps_pred, sched)
    ab_to = sched.alpha_bar[t_to]
    return np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps_pred


def ddim_reverse_step(x_t: np.ndarray, t_from: int, t_to: int,
                      eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic denoising jump t_from -> t_to with t_to < t_from (t_to may be 0)."""
    if t_to >= t_from:
        raise ValueError(f"ddim_reverse_step requires t_to < t_from, got {t_to} >= {t_from}")
    if not (0 <= t_to <= sched.T):
        raise ValueError(f"t_to {t_to} outside 0..{sched.T}")
    return _ddim_move(x_t, t_from, t_to, eps_pred, sched)


def ddim_invert_step(x_t: np.ndarray, t_from: int, t_to: int,
                     eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic noising jump t_from -> t_to with t_to > t_from (t_from may be 0)."""
    if t_to <= t_from:
        raise ValueError(f"ddim_invert_step requires t_to > t_from, got {t_to} <= {t_from}")
    if not (1 <= t_to <= sched.T):
        raise ValueError(f"t_to {t_to} outside 1..{sched.T}")
    if t_from == 0:
        # clean boundary: x0 prediction degenerates to the image itself when
        # alpha_bar = 1, so apply the move formula with abar_from = 1
        _check_shapes(x_t, eps_pred, "ddim_invert_step")
        ab_to = sched.alpha_bar[t_to]
        return np.sqrt(ab_to) * x_t + np.sqrt(1.0 - ab_to) * eps_pred
    return _ddim_move(x_t, t_from, t_to, eps_pred, sched)
