"""Perturbation mathematics for sharpness-aware federated training.

Covers the plain SAM ascent direction, the consensus-corrected local
perturbation used by FedSMOO, its dual-variable update, and the server-side
aggregation of the global perturbation estimate. Every returned perturbation
lies on the radius-r sphere or is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import ParamVector

__all__ = [
    "PerturbState",
    "normalize_to_ball",
    "vanilla_sam_perturbation",
    "corrected_perturbation",
    "dual_mu_update",
    "global_perturbation",
]

# Slack for the |norm - r| sphere check; float64 normalization keeps the
# actual error many orders of magnitude below this.
NORM_SLACK = 1e-9


@dataclass(frozen=True)
class PerturbState:
    """Per-client perturbation bookkeeping.

    ``mu`` is the dual variable driving the local perturbation toward the
    global one, ``s_global`` the server's current estimate, ``radius`` the
    SAM ball size. ``alpha`` is kept for documentation and must stay 1.0;
    the update formulas below hard-code that value.
    """

    mu: ParamVector
    s_global: ParamVector
    radius: float
    alpha: float = 1.0

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.alpha != 1.0:
            raise ValueError("alpha is fixed to 1.0")
        if self.mu.d != self.s_global.d:
            raise ValueError("mu and s_global must have equal dimension")
        snorm = self.s_global.norm()
        if snorm != 0.0 and abs(snorm - self.radius) > NORM_SLACK * max(1.0, self.radius):
            raise ValueError(f"s_global norm {snorm} is neither 0 nor radius {self.radius}")


def normalize_to_ball(v: ParamVector, r: float) -> ParamVector:
    """Scale ``v`` onto the radius-r sphere; zero input or r=0 gives zero.

    Returning zero for a vanishing direction (instead of raising) keeps the
    degenerate round-0 state well defined and makes r=0 collapse the SAM
    step to a plain gradient step.
    """
    if r < 0:
        raise ValueError("radius must be >= 0")
    n = v.norm()
    if n == 0.0 or r == 0.0:
        return v.like(np.zeros_like(v.values))
    return v.like(v.values * (r / n))


def vanilla_sam_perturbation(g: ParamVector, r: float) -> ParamVector:
    """Plain SAM ascent offset: the gradient scaled onto the r-sphere."""
    return normalize_to_ball(g, r)


def corrected_perturbation(g: ParamVector, state: PerturbState) -> ParamVector:
    """Consensus-corrected ascent offset from gradient and dual state.

    Forms the raw direction (g - mu) - s_global and scales it onto the
    r-sphere. With mu = s_global = 0 this reduces bit-exactly to
    :func:`vanilla_sam_perturbation`.
    """
    if g.d != state.mu.d:
        raise ValueError("gradient dimension does not match perturbation state")
    raw = (g.values - state.mu.values) - state.s_global.values
    return normalize_to_ball(g.like(raw), state.radius)


def dual_mu_update(state: PerturbState, s_hat: ParamVector) -> PerturbState:
    """Advance the dual variable: mu <- mu + (s_hat - s_global)."""
    if s_hat.d != state.mu.d:
        raise ValueError("s_hat dimension does not match perturbation state")
    new_mu = state.mu.like(state.mu.values + (s_hat.values - state.s_global.values))
    return replace(state, mu=new_mu)


def global_perturbation(tilde_s_list, r: float) -> ParamVector:
    """Server-side estimate: mean of client summaries scaled to the r-sphere."""
    if not tilde_s_list:
        raise ValueError("need at least one client perturbation summary")
    d = tilde_s_list[0].d
    for ts in tilde_s_list:
        if ts.d != d:
            raise ValueError("client perturbation summaries differ in dimension")
    mean = np.mean(np.stack([ts.values for ts in tilde_s_list]), axis=0)
    return normalize_to_ball(tilde_s_list[0].like(mean), r)
