"""Diffusion schedule: linear betas, closed-form forward draws, DDIM update.

Timesteps are 1-indexed (t in 1..T); alpha_bar_at(s, 0) == 1 by convention so
the reverse chain can take its final hop to a fully denoised state. The
sampling update supports two direction estimates: "standard"
(eps = (e_t - sqrt(abar_t) e0_hat) / sqrt(1 - abar_t), the form consistent
with the closed-form forward process) and "paper_literal", which swaps the
roles of the iterate and the prediction in that quotient. Subsequence sampling
always indexes cumulative products by the subsequence elements.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, sqrt
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .tensor import _sigmoid

FORMULAS = ("standard", "paper_literal")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule over T steps: beta, alpha = 1-beta, and cumulative
    products alpha_bar, each of length T (index t-1 holds step t)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class TauSubsequence:
    """Increasing sampling timesteps in [1, T] (last one is T) plus the
    stochasticity knob eta used when stepping along them."""

    indices: tuple[int, ...]
    eta: float = 0.0


def linear_beta_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Evenly spaced betas from beta_start to beta_end inclusive."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def alpha_bar_at(s: DiffusionSchedule, t: int) -> float:
    """Cumulative product at step t, with the t=0 convention of exactly 1."""
    if not 0 <= t <= s.T:
        raise NumericError(f"timestep {t} outside [0, {s.T}]")
    return 1.0 if t == 0 else float(s.alpha_bar[t - 1])


class DiffusionDraw(NamedTuple):
    """One forward draw: the raw pre-squash matrix and its sigmoid squash."""

    raw: np.ndarray
    squashed: np.ndarray


def forward_diffuse(e0: np.ndarray, t: int, noise: np.ndarray, s: DiffusionSchedule) -> DiffusionDraw:
    """Closed-form forward draw at step t:
    raw = sqrt(abar_t) e0 + sqrt(1 - abar_t) noise, squashed = sigmoid(raw)."""
    e0 = np.asarray(e0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if e0.shape != noise.shape:
        raise DimensionError(f"e0 {e0.shape} vs noise {noise.shape}")
    if not 1 <= t <= s.T:
        raise NumericError(f"timestep {t} outside [1, {s.T}]")
    ab = alpha_bar_at(s, t)
    raw = sqrt(ab) * e0 + sqrt(1.0 - ab) * noise
    return DiffusionDraw(raw=raw, squashed=_sigmoid(raw))


def ddim_sigma(s: DiffusionSchedule, t: int, t_prev: int, eta: float) -> float:
    """Per-step noise scale sigma_t for stepping t -> t_prev."""
    ab_t = alpha_bar_at(s, t)
    ab_p = alpha_bar_at(s, t_prev)
    return eta * sqrt((1.0 - ab_p) / (1.0 - ab_t)) * sqrt(1.0 - ab_t / ab_p)


def ddim_step(
    e_t: np.ndarray,
    e0_hat: np.ndarray,
    t: int,
    t_prev: int,
    eta: float,
    z: np.ndarray,
    s: DiffusionSchedule,
    formula: str = "standard",
) -> np.ndarray:
    """One reverse update from step t to t_prev (t_prev < t, 0 allowed).

    eta=0 is deterministic; eta=1 matches the ancestral posterior noise scale
    when t_prev = t-1. The sqrt(1 - abar_prev - sigma^2) coefficient is real
    for eta <= 1; larger eta can make it infeasible, which raises.
    """
    e_t = np.asarray(e_t, dtype=np.float64)
    e0_hat = np.asarray(e0_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (e_t.shape == e0_hat.shape == z.shape):
        raise DimensionError(
            f"shape mismatch: e_t {e_t.shape}, e0_hat {e0_hat.shape}, z {z.shape}"
        )
    if formula not in FORMULAS:
        raise ConfigError(f"unknown formula {formula!r}; expected one of {FORMULAS}")
    if not 0 <= t_prev < t <= s.T:
        raise NumericError(f"need 0 <= t_prev < t <= {s.T}, got t={t}, t_prev={t_prev}")
    if eta < 0.0:
        raise NumericError(f"eta must be >= 0, got {eta}")
    ab_t = alpha_bar_at(s, t)
    ab_p = alpha_bar_at(s, t_prev)
    sigma = ddim_sigma(s, t, t_prev, eta)
    residual = 1.0 - ab_p - sigma * sigma
    if residual < -1e-12:
        raise NumericError(f"sigma^2 = {sigma * sigma} exceeds 1 - alpha_bar = {1.0 - ab_p}")
    if formula == "standard":
        eps = (e_t - sqrt(ab_t) * e0_hat) / sqrt(1.0 - ab_t)
    else:
        eps = (e0_hat - sqrt(ab_t) * e_t) / sqrt(1.0 - ab_t)
    return sqrt(ab_p) * e0_hat + sqrt(max(residual, 0.0)) * eps + sigma * z


def make_tau(T: int, steps: int, spacing: str = "uniform", eta: float = 0.0) -> TauSubsequence:
    """Evenly spaced subsequence ceil(T*i/steps) for i = 1..steps; the last
    element is always T and steps == T yields every step."""
    if spacing != "uniform":
        raise ConfigError(f"unknown spacing {spacing!r}")
    if not 1 <= steps <= T:
        raise ConfigError(f"steps must be in [1, T={T}], got {steps}")
    return TauSubsequence(indices=tuple(ceil(T * i / steps) for i in range(1, steps + 1)), eta=eta)
