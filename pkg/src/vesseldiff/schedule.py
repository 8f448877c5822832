"""Variance schedules and the strided timestep subsequence used for DDIM.

Indexing convention: timesteps run t = 1..T, with alpha_bar[0] reserved for
the t=0 boundary where the cumulative signal coefficient is exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "DdimSubsequence", "linear_schedule", "ddim_subsequence"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and derived coefficients.

    beta, alpha_bar and sigma are length T+1 with index 0 the clean boundary:
    beta[0] = 0, alpha_bar[0] = 1, sigma[0] = 0. sigma_t^2 = beta_t (fixed
    small-variance reverse process).
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.beta.setflags(write=False)
        self.alpha_bar.setflags(write=False)
        self.sigma.setflags(write=False)


@dataclass(frozen=True)
class DdimSubsequence:
    """Strictly increasing timestep indices tau_1 < ... < tau_S drawn from 1..T."""

    steps: tuple
    S: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "S", len(self.steps))


def linear_schedule(T: int, beta_start: float = None, beta_end: float = None) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive.

    Defaults are 1e-4 -> 0.02 scaled by 1000/T, so shorter desk-scale
    schedules keep the same total noise budget as a 1000-step run.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if beta_end is None:
        beta_end = min(0.02 * 1000.0 / T, 0.5)
    if beta_start is None:
        beta_start = min(1e-4 * 1000.0 / T, beta_end)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def ddim_subsequence(T: int, S: int) -> DdimSubsequence:
    """Uniformly strided subsequence tau_i = round(i*T/S), i = 1..S."""
    if not (1 <= S <= T):
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    steps = tuple(int(round(i * T / S)) for i in range(1, S + 1))
    if len(set(steps)) != S or any(s < 1 or s > T for s in steps):
        raise ValueError(f"degenerate subsequence for T={T}, S={S}")
    return DdimSubsequence(steps=steps)
