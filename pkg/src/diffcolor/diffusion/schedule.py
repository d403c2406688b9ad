"""Noise schedules for the forward/reverse diffusion processes."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from ..errors import InvalidSchedule


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha/alpha-bar sequences, 1-indexed by timestep t in 1..T.

    Invariants (enforced by make_schedule): alpha_bar strictly decreasing,
    alpha_bar(1) > 0.9 (near-identity first step), alpha_bar(T) < 0.05.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """alpha-bar at timestep t; t=0 means the clean latent (returns 1)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return float(self.betas[t - 1])

    def params(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    """Build a schedule and verify its invariants.

    Raises InvalidSchedule when the resulting alpha-bar sequence is not
    strictly decreasing, does not start near 1, or does not end near 0.
    """
    if T < 10:
        raise InvalidSchedule(f"T must be >= 10, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        # squared-cosine alpha-bar profile, betas derived and clipped
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], beta_start, 0.999)
    else:
        raise InvalidSchedule(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    if np.any(np.diff(alpha_bars) >= 0.0):
        raise InvalidSchedule("alpha-bar sequence is not strictly decreasing")
    if alpha_bars[0] <= 0.9:
        raise InvalidSchedule(
            f"alpha_bar(1) = {alpha_bars[0]:.4f} is not a near-identity first step"
        )
    if alpha_bars[-1] >= 0.05:
        raise InvalidSchedule(
            f"alpha_bar(T) = {alpha_bars[-1]:.4f} leaves too much signal at T"
        )

    betas.flags.writeable = False
    alphas.flags.writeable = False
    alpha_bars.flags.writeable = False
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        kind=kind,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def sample_step_grid(T: int, steps: int) -> list[int]:
    """Evenly spaced timestep grid in 1..T, final step T always included."""
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    if steps < 1:
        raise ValueError("need at least one step")
    grid = [int(round((i + 1) * T / steps)) for i in range(steps)]
    grid = sorted(set(max(1, g) for g in grid))
    if grid[-1] != T:
        grid.append(T)
    return grid
