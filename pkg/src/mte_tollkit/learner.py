"""Simultaneous tolling and parameter estimation, with regret bookkeeping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .equilibrium import (
    SolverError,
    SolverOptions,
    entropy_term,
    mte_solve,
    optimal_toll_with_flow,
    perturbed_latency,
    social_optimum,
)
from .estimation import (
    BetaEquation,
    EstimatorState,
    beta_error_bound,
    good_event_holds,
    ls_update,
    observed_gap,
    solve_beta_equation,
)
from .network import BetaNodeInfo, Network, find_beta_node, validate

log = logging.getLogger(__name__)

NEGATIVE_REGRET_CLAMP = -1e-6


class ConfigError(ValueError):
    pass


class RunAborted(RuntimeError):
    """An inner solver failed; ``trace`` holds the iterations completed so far."""

    def __init__(self, message: str, trace: "RunTrace") -> None:
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RunConfig:
    network: Network
    theta_star: np.ndarray
    beta_star: float
    T: int
    lam: float | Sequence[float] = 0.01
    c_beta: float = 0.1
    C_theta_bound: float = 10.0
    seed: int = 0
    options: SolverOptions = field(default_factory=SolverOptions)
    theta_lo0: float = 0.01
    oracle_mode: bool = False
    noise: bool = True

    def check(self) -> None:
        report = validate(self.network)
        if not report.ok:
            raise ConfigError(f"invalid network: {report}")
        theta = np.asarray(self.theta_star, float)
        if theta.shape != (self.network.n_arcs,):
            raise ConfigError(f"theta_star length mismatch: {theta.shape[0]} values for {self.network.n_arcs} arcs")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if np.any(theta <= 0) or np.any(theta > self.C_theta_bound):
            raise ConfigError(f"theta_star must lie in (0, C_theta_bound={self.C_theta_bound}]")
        if not self.c_beta > 0:
            raise ConfigError("c_beta must be positive")
        if not self.beta_star > self.c_beta:
            raise ConfigError(f"beta_star={self.beta_star} must exceed c_beta={self.c_beta}")


@dataclass
class ObservationBatch:
    samples: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, a: int) -> np.ndarray:
        return self.samples[a]


def sample_observations(
    w: np.ndarray,
    theta_star: np.ndarray,
    rng: np.random.Generator,
    noise: bool = True,
) -> ObservationBatch:
    """floor(w_a) latency samples theta*_a w_a + N(0, 1) per arc."""
    w = np.asarray(w, float)
    counts = np.floor(w).astype(int)
    if np.any(counts < 1):
        log.warning("arc flow below one traveller: %s", w[counts < 1])
    means = np.asarray(theta_star, float) * w
    draws = rng.standard_normal(int(counts.sum())) if noise else np.zeros(int(counts.sum()))
    out = []
    start = 0
    for a, n in enumerate(counts):
        out.append(means[a] + draws[start:start + n])
        start += n
    return ObservationBatch(out)


class RunTrace:
    """Per-iteration record of a run. Row ``k`` is iteration ``t = k + 1``."""

    def __init__(self, network: Network, T: int, beta_node: BetaNodeInfo) -> None:
        n = network.n_arcs
        self.network = network
        self.beta_node = beta_node
        self.n_rows = 0
        self.toll = np.zeros((T, n))
        self.flow = np.zeros((T, n))
        # equilibrium the authority anticipates under its own estimates
        self.anticipated_flow = np.zeros((T, n))
        self.theta_used = np.zeros((T, n))
        self.beta_used = np.zeros(T)
        self.theta_hat = np.zeros((T, n))
        self.theta_lo = np.zeros((T, n))
        self.theta_hi = np.zeros((T, n))
        self.beta = np.zeros(T)
        self.beta_status = [""] * T
        self.beta_bound = np.zeros(T)
        self.gap = np.zeros(T)
        self.stage_cost = np.zeros(T)
        self.stage_regret = np.zeros(T)
        self.cum_regret = np.zeros(T)
        self.theta_err = np.zeros(T)
        self.beta_err = np.zeros(T)
        self.good_event = np.zeros(T, dtype=bool)
        self.low_flow = np.zeros(T, dtype=bool)
        self.negative_regret = np.zeros(T, dtype=bool)
        self.L_star = math.nan
        self.p_star = np.zeros(n)
        self.w_star = np.zeros(n)
        self.good_event_initial = True

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.n_rows + 1)

    def truncate(self) -> "RunTrace":
        k = self.n_rows
        for name, val in list(vars(self).items()):
            if isinstance(val, np.ndarray) and val.ndim >= 1 and val.shape[0] > k and name not in ("p_star", "w_star"):
                setattr(self, name, val[:k])
        self.beta_status = self.beta_status[:k]
        return self

    @property
    def good_event_all(self) -> bool:
        """Whether the confidence bands covered the truth at every iteration."""
        return bool(self.good_event_initial and self.good_event[: self.n_rows].all())


def run(config: RunConfig) -> RunTrace:
    """Run the tolling/estimation loop for ``config.T`` iterations.

    Each iteration tolls with the current lower slope bounds and beta estimate,
    lets travellers settle at the true equilibrium, observes noisy latencies,
    and refreshes the estimates. Deterministic given ``config.seed``.
    """
    config.check()
    net = config.network
    opts = config.options
    theta_star = np.asarray(config.theta_star, float)
    beta_star = float(config.beta_star)
    beta_node = find_beta_node(net)
    rng = np.random.default_rng(config.seed)
    trace = RunTrace(net, config.T, beta_node)

    try:
        w_star = social_optimum(net, theta_star, beta_star, opts)
        p_star, _ = optimal_toll_with_flow(net, theta_star, beta_star, opts, w0=w_star)
    except SolverError as exc:
        raise RunAborted(f"benchmark solve failed: {exc}", trace.truncate()) from exc
    trace.w_star, trace.p_star = w_star, p_star
    trace.L_star = L_star = perturbed_latency(net, w_star, theta_star, beta_star)

    state = EstimatorState.initial(
        net.n_arcs, config.lam, config.T, config.C_theta_bound, config.c_beta, config.theta_lo0
    )
    trace.good_event_initial = good_event_holds(state, theta_star)
    w_prev = w_star
    w_tilde_prev = w_star
    cum = 0.0
    for k in range(config.T):
        if config.oracle_mode:
            theta_used, beta_used = theta_star, beta_star
        else:
            theta_used, beta_used = state.theta_lo, state.beta
        try:
            p, w_tilde = optimal_toll_with_flow(net, theta_used, beta_used, opts, w0=w_tilde_prev)
            w = mte_solve(net, theta_star, beta_star, p, opts, w0=w_prev)
        except SolverError as exc:
            raise RunAborted(f"solver failed at t={k + 1}: {exc}", trace.truncate()) from exc

        obs = sample_observations(w, theta_star, rng, noise=config.noise)
        state = ls_update(state, w, obs.samples)
        eq = BetaEquation(state.theta_lo, state.theta_hi, w, p, beta_node)
        sol = solve_beta_equation(eq, state.c_beta)
        state = EstimatorState(**{**vars(state), "beta": sol.beta})

        stage_cost = perturbed_latency(net, w, theta_star, beta_star)
        stage = stage_cost - L_star
        if stage < NEGATIVE_REGRET_CLAMP:
            trace.negative_regret[k] = True
            log.warning("t=%d: stage regret %.3e below clamp", k + 1, stage)
        stage = max(stage, NEGATIVE_REGRET_CLAMP)
        cum += stage

        gap = observed_gap(beta_node, theta_star, w, p)
        trace.toll[k] = p
        trace.flow[k] = w
        trace.anticipated_flow[k] = w_tilde
        trace.theta_used[k] = theta_used
        trace.beta_used[k] = beta_used
        trace.theta_hat[k] = state.theta_hat
        trace.theta_lo[k] = state.theta_lo
        trace.theta_hi[k] = state.theta_hi
        trace.beta[k] = state.beta
        trace.beta_status[k] = sol.status
        trace.gap[k] = gap
        trace.beta_bound[k] = (
            beta_error_bound(state, w, beta_star, net.inflow, gap, beta_node) if gap > 0 else math.inf
        )
        trace.stage_cost[k] = stage_cost
        trace.stage_regret[k] = stage
        trace.cum_regret[k] = cum
        trace.theta_err[k] = float(np.linalg.norm(state.theta_hat - theta_star))
        trace.beta_err[k] = abs(state.beta - beta_star)
        trace.good_event[k] = good_event_holds(state, theta_star)
        trace.low_flow[k] = bool(np.any(w < 1))
        trace.n_rows = k + 1
        w_prev, w_tilde_prev = w, w_tilde
    return trace


# --- diagnostics


def loglog_slope(t: np.ndarray, y: np.ndarray, t_min: float, t_max: float) -> float:
    """Least-squares slope of ln y against ln t over t_min <= t <= t_max (y > 0)."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    sel = (t >= t_min) & (t <= t_max) & (y > 0)
    if sel.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(t[sel]), np.log(y[sel]), 1)[0])


def regret_diagnostics(trace: RunTrace, config: RunConfig) -> dict[str, np.ndarray]:
    """Split each stage regret into latency-error, entropy-error and remainder parts.

    ``R1`` charges the slope under-estimate, ``R2`` the beta error and ``R3``
    is whatever remains of the realised regret. ``R3_direct`` is the gap between
    the realised flow and the anticipated equilibrium, both priced under the
    estimates; ``R1 + R2 + R3_direct`` dominates the realised regret whenever
    the estimates are optimistic.
    """
    net = trace.network
    n = trace.n_rows
    theta_star = np.asarray(config.theta_star, float)
    beta_star = float(config.beta_star)
    flow = trace.flow[:n]
    r1 = np.einsum("ta,ta->t", theta_star - trace.theta_used[:n], flow * flow)
    chi = np.array([entropy_term(net, w) for w in flow])
    r2 = (1 / beta_star - 1 / trace.beta_used[:n]) * chi
    r3 = trace.stage_regret[:n] - r1 - r2
    r3_direct = np.array(
        [
            perturbed_latency(net, flow[k], trace.theta_used[k], trace.beta_used[k])
            - perturbed_latency(net, trace.anticipated_flow[k], trace.theta_used[k], trace.beta_used[k])
            for k in range(n)
        ]
    )
    surrogate = r1 + r2 + r3_direct
    return {
        "R1": r1,
        "R2": r2,
        "R3": r3,
        "R3_direct": r3_direct,
        "surrogate": surrogate,
        "cum_R1": np.cumsum(r1),
        "cum_R2": np.cumsum(r2),
        "cum_R3": np.cumsum(r3),
        "cum_surrogate": np.cumsum(surrogate),
    }


def bound_scale(network: Network, beta_node: BetaNodeInfo, t: np.ndarray) -> np.ndarray:
    """g^2 ln^2(g) |A| sqrt(t) ln(t g) max{|I| ln(|A|/|I|), B}."""
    g = network.inflow
    n_a, n_i = network.n_arcs, network.n_nodes
    struct = max(n_i * math.log(n_a / n_i), beta_node.b_count)
    t = np.asarray(t, float)
    return g**2 * math.log(g) ** 2 * n_a * np.sqrt(t) * np.log(t * g) * struct


def envelope_curve(trace: RunTrace, network: Network, beta_node: BetaNodeInfo, t_min: int = 10) -> np.ndarray:
    """Running smallest constant C with R^s <= C * bound_scale(s) for t_min <= s <= t."""
    t = trace.t
    ratio = np.where(t >= t_min, trace.cum_regret[: trace.n_rows] / bound_scale(network, beta_node, t), 0.0)
    return np.maximum.accumulate(np.maximum(ratio, 0.0))


def bound_envelope(trace: RunTrace, network: Network, beta_node: BetaNodeInfo) -> float:
    curve = envelope_curve(trace, network, beta_node)
    return float(curve[-1]) if curve.size else 0.0


def envelope_tail_ratio(trace: RunTrace, network: Network, beta_node: BetaNodeInfo) -> float:
    """C at the end of the run over C at its midpoint (1 when the envelope is flat)."""
    curve = envelope_curve(trace, network, beta_node)
    mid = curve[len(curve) // 2]
    return float(curve[-1] / mid) if mid > 0 else 1.0
