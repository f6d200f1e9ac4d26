"""Online estimation of latency slopes (ridge least squares) and of the entropy parameter."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .network import BetaNodeInfo, Network

BETA_CAP = 1e6


@dataclass(frozen=True)
class EstimatorState:
    """Per-arc least-squares accumulators and confidence bands plus the current beta.

    ``theta_lo``/``theta_hi`` are the confidence bounds implied by the data
    ingested so far; ``gamma`` is the radius coefficient paired with ``V``, so
    the half-width of the band is ``gamma / sqrt(V)``.
    """

    V: np.ndarray
    Q: np.ndarray
    theta_hat: np.ndarray
    gamma: np.ndarray
    theta_lo: np.ndarray
    theta_hi: np.ndarray
    lam: np.ndarray
    horizon: int
    C_theta_bound: float
    beta: float
    c_beta: float
    updates: int = 0

    @classmethod
    def initial(
        cls,
        n_arcs: int,
        lam: float | Sequence[float],
        horizon: int,
        C_theta_bound: float,
        c_beta: float,
        theta_lo0: float = 0.01,
    ) -> "EstimatorState":
        lam_arr = np.broadcast_to(np.asarray(lam, dtype=float), (n_arcs,)).copy()
        if np.any(lam_arr <= 0):
            raise ValueError("regularizer lambda must be positive")
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        gamma = confidence_radius(lam_arr, lam_arr, horizon, C_theta_bound)
        return cls(
            V=lam_arr.copy(),
            Q=np.zeros(n_arcs),
            theta_hat=np.zeros(n_arcs),
            gamma=gamma,
            theta_lo=np.full(n_arcs, theta_lo0),
            theta_hi=np.full(n_arcs, float(C_theta_bound)),
            lam=lam_arr,
            horizon=int(horizon),
            C_theta_bound=float(C_theta_bound),
            beta=float(c_beta),
            c_beta=float(c_beta),
        )

    @property
    def width(self) -> np.ndarray:
        """Confidence half-width gamma / sqrt(V)."""
        return self.gamma / np.sqrt(self.V)


def confidence_radius(V: np.ndarray, lam: np.ndarray, horizon: int, C_theta_bound: float) -> np.ndarray:
    """gamma = sqrt(lam) C + sqrt(2 ln T + 2 ln(V / lam))."""
    return np.sqrt(lam) * C_theta_bound + np.sqrt(2 * math.log(horizon) + 2 * np.log(V / lam))


def ls_update(state: EstimatorState, w: np.ndarray, latencies: Sequence[np.ndarray]) -> EstimatorState:
    """Fold one iteration of flows and per-traveller latency samples into the state.

    Arc ``a`` must carry exactly ``floor(w_a)`` samples.
    """
    w = np.asarray(w, dtype=float)
    if len(latencies) != w.shape[0]:
        raise ValueError(f"got latency lists for {len(latencies)} arcs, expected {w.shape[0]}")
    counts = np.floor(w)
    sums = np.empty_like(w)
    for a, obs in enumerate(latencies):
        if len(obs) != counts[a]:
            raise ValueError(f"arc {a}: {len(obs)} observations for floor(w)={int(counts[a])}")
        sums[a] = float(np.sum(obs))
    V = state.V + counts * w * w
    Q = state.Q + w * sums
    theta_hat = Q / V
    gamma = confidence_radius(V, state.lam, state.horizon, state.C_theta_bound)
    half = gamma / np.sqrt(V)
    return replace(
        state,
        V=V,
        Q=Q,
        theta_hat=theta_hat,
        gamma=gamma,
        theta_lo=np.maximum(theta_hat - half, 0.0),
        theta_hi=theta_hat + half,
        updates=state.updates + 1,
    )


def good_event_holds(state: EstimatorState, theta_star: np.ndarray) -> bool:
    """True iff every arc's estimate lies within its confidence half-width of the truth."""
    return bool(np.all(np.abs(state.theta_hat - np.asarray(theta_star)) <= state.width))


# --- entropy parameter


def route_costs(beta_node: BetaNodeInfo, theta: np.ndarray, w: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Cost of each unique route below the beta node (one entry per outgoing arc)."""
    c = theta * w + p
    return np.array([c[list(r)].sum() for r in beta_node.unique_routes])


def _lse_neg(beta: float, z: np.ndarray) -> float:
    m = z.min()
    return -beta * m + math.log(np.exp(-beta * (z - m)).sum())


class BetaEquation:
    """g(beta) = -beta z_lo[a*] - ln sum exp(-beta z_hi) - ln kappa[a*].

    ``z_lo``/``z_hi`` are route costs under the lower/upper slope bounds at the
    observed flows and tolls; ``a*`` minimises the route cost under the
    midpoint of the bounds (first index on ties); ``kappa`` is the observed
    flow share of ``a*`` at the beta node.
    """

    def __init__(
        self,
        theta_lo: np.ndarray,
        theta_hi: np.ndarray,
        w: np.ndarray,
        p: np.ndarray,
        beta_node: BetaNodeInfo,
    ) -> None:
        theta_lo, theta_hi, w, p = (np.asarray(x, dtype=float) for x in (theta_lo, theta_hi, w, p))
        self.z_lo = route_costs(beta_node, theta_lo, w, p)
        self.z_hi = route_costs(beta_node, theta_hi, w, p)
        mid = route_costs(beta_node, 0.5 * (theta_lo + theta_hi), w, p)
        self.a_star = int(np.argmin(mid))
        out = w[list(beta_node.outgoing_arcs)]
        total = out.sum()
        if not total > 0:
            raise ValueError("zero total flow at the beta node")
        self.log_kappa = math.log(out[self.a_star] / total)

    def __call__(self, beta: float) -> float:
        return -beta * self.z_lo[self.a_star] - _lse_neg(beta, self.z_hi) - self.log_kappa


def beta_g(
    beta: float,
    theta_lo: np.ndarray,
    theta_hi: np.ndarray,
    w: np.ndarray,
    p: np.ndarray,
    beta_node: BetaNodeInfo,
    network: Network | None = None,
) -> float:
    if not beta > 0:
        raise ValueError(f"beta must be positive (got {beta})")
    return BetaEquation(theta_lo, theta_hi, w, p, beta_node)(beta)


@dataclass(frozen=True)
class BetaSolution:
    beta: float
    root: float
    # "root", "below_floor" (g > 0 already at c_beta / 10) or "capped"
    status: str


def solve_beta_equation(
    eq: BetaEquation,
    c_beta: float,
    xtol: float = 1e-12,
) -> BetaSolution:
    lo = c_beta / 10
    if eq(lo) > 0:
        return BetaSolution(c_beta, lo, "below_floor")
    prev, hi = lo, 1.0
    while hi <= lo:
        hi *= 2
    while eq(hi) <= 0:
        prev = hi
        hi *= 2
        if hi > BETA_CAP:
            return BetaSolution(BETA_CAP, BETA_CAP, "capped")
    root = brentq(eq, prev, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)
    return BetaSolution(max(c_beta, root), root, "root")


def beta_solve(
    state: EstimatorState,
    w: np.ndarray,
    p: np.ndarray,
    beta_node: BetaNodeInfo,
    network: Network | None = None,
) -> float:
    """Entropy-parameter estimate max(c_beta, root of g) from the current bounds."""
    eq = BetaEquation(state.theta_lo, state.theta_hi, w, p, beta_node)
    return solve_beta_equation(eq, state.c_beta).beta


def observed_gap(beta_node: BetaNodeInfo, theta: np.ndarray, w: np.ndarray, p: np.ndarray) -> float:
    """Spread between the largest and smallest route cost below the beta node."""
    z = route_costs(beta_node, np.asarray(theta, float), np.asarray(w, float), np.asarray(p, float))
    return float(z.max() - z.min())


def beta_error_bound(
    state: EstimatorState,
    w: np.ndarray,
    beta_star: float,
    inflow: float,
    gap: float,
    beta_node: BetaNodeInfo,
) -> float:
    """(beta* g_o / gap) * sum over the beta-node arc set of (theta_hi - theta_lo) w."""
    idx = list(beta_node.arc_set)
    spread = float(np.dot(state.theta_hi[idx] - state.theta_lo[idx], np.asarray(w, float)[idx]))
    return beta_star * inflow / gap * spread
