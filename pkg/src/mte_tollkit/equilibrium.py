"""Arc costs, logit cost-to-go, Markovian traffic equilibrium and optimal tolls.

Two independent solver families live here:

* fixed-point solvers (:func:`mte_solve`, :func:`optimal_toll`) that alternate a
  backward cost-to-go pass with a forward logit flow-splitting pass;
* convex solvers (:func:`mte_solve_potential`, :func:`social_optimum`) that
  minimise a strictly convex objective over the flow-conservation polytope
  with Newton steps on its affine hull.

Arrays are indexed by arc position in ``Network.arcs``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import null_space

from .network import Network

ArrayLike = Sequence[float] | np.ndarray

LOG_FLOOR = 1e-12


class SolverError(RuntimeError):
    """A solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float = math.nan, iterations: int = 0) -> None:
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    damping: float = 0.5
    max_iter: int = 10_000
    # Anderson memory for the fixed-point solvers; 0 gives plain damped Picard.
    anderson: int = 5


DEFAULT_OPTIONS = SolverOptions()


def _vec(net: Network, x: ArrayLike, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = np.full(net.n_arcs, float(arr))
    if arr.shape != (net.n_arcs,):
        raise ValueError(f"{name} has shape {arr.shape}, expected ({net.n_arcs},)")
    return arr


def arc_costs(theta: ArrayLike, w: ArrayLike, p: ArrayLike) -> np.ndarray:
    """c_a = theta_a * w_a + p_a."""
    theta, w, p = (np.asarray(x, dtype=float) for x in (theta, w, p))
    if not (theta.shape == w.shape == p.shape):
        raise ValueError(f"dimension mismatch: theta{theta.shape}, w{w.shape}, p{p.shape}")
    return theta * w + p


# --- fixed-point kernels (plain Python: networks are small, numpy call overhead dominates)


def _backward(net: Network, c: list[float], beta: float) -> tuple[list[float], list[float]]:
    """Cost-to-go per arc and the log-sum-exp value per node (0 at the destination)."""
    phi = [0.0] * net.n_nodes
    z = [0.0] * net.n_arcs
    heads = net.heads
    for i in reversed(net.topo_indices()):
        arcs = net.out_arcs[i]
        if not arcs:
            continue
        zmin = math.inf
        for k in arcs:
            zk = c[k] + phi[heads[k]]
            z[k] = zk
            if zk < zmin:
                zmin = zk
        s = 0.0
        for k in arcs:
            s += math.exp(-beta * (z[k] - zmin))
        phi[i] = zmin - math.log(s) / beta
    return z, phi


def _split(net: Network, z: list[float], beta: float) -> list[float]:
    """Forward pass: send each node's throughput along softmax(-beta z)."""
    w = [0.0] * net.n_arcs
    thr = [0.0] * net.n_nodes
    thr[net.o] = net.inflow
    heads = net.heads
    for i in net.topo_indices():
        arcs = net.out_arcs[i]
        if not arcs:
            continue
        zmin = min(z[k] for k in arcs)
        e = [math.exp(-beta * (z[k] - zmin)) for k in arcs]
        scale = thr[i] / sum(e)
        for k, ek in zip(arcs, e):
            wk = ek * scale
            w[k] = wk
            thr[heads[k]] += wk
    return w


def _picard_map(net: Network, theta: list[float], beta: float, p: list[float], w: list[float]) -> list[float]:
    c = [t * x + q for t, x, q in zip(theta, w, p)]
    z, _ = _backward(net, c, beta)
    return _split(net, z, beta)


def uniform_flow(net: Network) -> np.ndarray:
    """Flow that splits every node's throughput evenly over its outgoing arcs."""
    return np.array(_split(net, [0.0] * net.n_arcs, 1.0))


def _fixed_point(
    net: Network,
    theta: list[float],
    beta: float,
    p: list[float],
    opts: SolverOptions,
    w0: ArrayLike | None,
    weight: np.ndarray | None = None,
) -> tuple[np.ndarray, float, int]:
    """Damped Picard iteration with safeguarded Anderson mixing.

    Residual is ``max |weight * (G(w) - w)|``. The damping is halved whenever a
    plain damped step increases the residual. An Anderson step is kept only if
    it lowers the residual; otherwise the mixing history is dropped and a
    damped step is taken instead.
    """
    x = uniform_flow(net) if w0 is None else np.array(w0, dtype=float)
    wt = np.ones(net.n_arcs) if weight is None else weight

    def resid(y: np.ndarray) -> tuple[np.ndarray, float]:
        fy = np.array(_picard_map(net, theta, beta, p, y.tolist())) - y
        return fy, float(np.max(np.abs(wt * fy)))

    f, r = resid(x)
    alpha = opts.damping
    xs: list[np.ndarray] = []
    fs: list[np.ndarray] = []
    it = 0
    while r >= opts.tol:
        it += 1
        if it > opts.max_iter:
            raise SolverError("fixed-point iteration did not converge", r, it - 1)
        if xs:
            dX = np.column_stack([x - xi for xi in xs])
            dF = np.column_stack([f - fi for fi in fs])
            gamma, *_ = np.linalg.lstsq(dF, f, rcond=None)
            x_new = x + alpha * f - (dX + alpha * dF) @ gamma
            f_new, r_new = resid(x_new)
            if not r_new < r:
                xs.clear()
                fs.clear()
                x_new = None
        else:
            x_new = None
        if x_new is None:
            x_new = x + alpha * f
            f_new, r_new = resid(x_new)
            if not r_new < r:
                alpha *= 0.5
                if alpha < 1e-12:
                    raise SolverError("damping underflow", r, it)
        if opts.anderson > 0:
            xs.append(x)
            fs.append(f)
            if len(xs) > opts.anderson:
                xs.pop(0)
                fs.pop(0)
        x, f, r = x_new, f_new, r_new
    return x, r, it


def cost_to_go(net: Network, theta: ArrayLike, beta: float, w: ArrayLike, p: ArrayLike) -> np.ndarray:
    """Expected minimum cost from entering each arc to reaching the destination."""
    if not beta > 0:
        raise ValueError(f"beta must be positive (got {beta})")
    c = arc_costs(_vec(net, theta, "theta"), _vec(net, w, "w"), _vec(net, p, "p"))
    z, _ = _backward(net, c.tolist(), float(beta))
    return np.array(z)


def split_fractions(net: Network, w: ArrayLike) -> np.ndarray:
    """Share of each tail node's outflow carried by each arc."""
    w = _vec(net, w, "w")
    out = np.zeros(net.n_nodes)
    np.add.at(out, np.array(net.tails), w)
    return w / out[np.array(net.tails)]


def logit_split(net: Network, z: ArrayLike, beta: float) -> np.ndarray:
    """softmax(-beta z) over each node's outgoing arcs, per arc."""
    z = _vec(net, z, "z")
    frac = np.empty(net.n_arcs)
    for arcs in net.out_arcs:
        if arcs:
            idx = list(arcs)
            e = np.exp(-beta * (z[idx] - z[idx].min()))
            frac[idx] = e / e.sum()
    return frac


def fixed_point_residual(net: Network, theta: ArrayLike, beta: float, p: ArrayLike, w: ArrayLike) -> float:
    """max_a |Phi(w)_a - w_a| for the logit splitting map Phi."""
    w = _vec(net, w, "w")
    new = _picard_map(net, _vec(net, theta, "theta").tolist(), float(beta), _vec(net, p, "p").tolist(), w.tolist())
    return float(np.max(np.abs(np.array(new) - w)))


def conservation_residual(net: Network, w: ArrayLike) -> float:
    """Largest violation of flow conservation (origin supply included)."""
    w = _vec(net, w, "w")
    worst = 0.0
    for i in range(net.n_nodes):
        if i == net.d:
            continue
        out = sum(w[k] for k in net.out_arcs[i])
        inflow = sum(w[k] for k in net.in_arcs[i]) + (net.inflow if i == net.o else 0.0)
        worst = max(worst, abs(out - inflow))
    return worst


def mte_solve(
    net: Network,
    theta: ArrayLike,
    beta: float,
    p: ArrayLike,
    options: SolverOptions | None = None,
    w0: ArrayLike | None = None,
) -> np.ndarray:
    """Markovian traffic equilibrium flow for latency slopes ``theta`` and tolls ``p``.

    Parameters
    ----------
    net : Network
    theta : array of shape (n_arcs,)
        Nonnegative latency slopes.
    beta : float
        Entropy (inverse temperature) parameter, > 0.
    p : array of shape (n_arcs,)
        Tolls.
    options : SolverOptions, optional
    w0 : array, optional
        Warm start; must lie in the feasible set.

    Returns
    -------
    ndarray
        Flow whose fixed-point residual is below ``options.tol``.
    """
    opts = options or DEFAULT_OPTIONS
    if not beta > 0:
        raise ValueError(f"beta must be positive (got {beta})")
    th = _vec(net, theta, "theta")
    if np.any(th < 0):
        raise ValueError("theta must be nonnegative")
    w, _, _ = _fixed_point(net, th.tolist(), float(beta), _vec(net, p, "p").tolist(), opts, w0)
    return w


def optimal_toll(
    net: Network,
    theta: ArrayLike,
    beta: float,
    options: SolverOptions | None = None,
    w0: ArrayLike | None = None,
) -> np.ndarray:
    """Toll p solving p = theta * MTE(theta, beta, p)."""
    return optimal_toll_with_flow(net, theta, beta, options, w0)[0]


def optimal_toll_with_flow(
    net: Network,
    theta: ArrayLike,
    beta: float,
    options: SolverOptions | None = None,
    w0: ArrayLike | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal toll together with the equilibrium flow it induces.

    The toll and flow are iterated jointly: substituting p = theta * w into the
    arc costs gives the fixed point of the splitting map under marginal costs
    2 theta w. The result is then checked, and if needed refined, with the
    toll-space update p <- (1 - alpha) p + alpha theta * MTE(p).
    """
    opts = options or DEFAULT_OPTIONS
    if not beta > 0:
        raise ValueError(f"beta must be positive (got {beta})")
    th = _vec(net, theta, "theta")
    if np.any(th < 0):
        raise ValueError("theta must be nonnegative")
    if not np.any(th > 0):
        return np.zeros(net.n_arcs), mte_solve(net, th, beta, np.zeros(net.n_arcs), opts, w0)
    scale = max(1.0, float(th.max()))
    inner = SolverOptions(opts.tol / (10 * scale), opts.damping, opts.max_iter, opts.anderson)
    w, _, _ = _fixed_point(net, (2 * th).tolist(), float(beta), [0.0] * net.n_arcs, inner, w0, weight=th)
    p = th * w
    for _ in range(opts.max_iter):
        w = mte_solve(net, th, beta, p, inner, w0=w)
        r = float(np.max(np.abs(p - th * w)))
        if r < opts.tol:
            return p, w
        p = (1 - opts.damping) * p + opts.damping * th * w
    raise SolverError("optimal toll iteration did not converge", r, opts.max_iter)


# --- objective functions


def _xlogx(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def _node_outflow(net: Network, w: np.ndarray) -> np.ndarray:
    out = np.zeros(net.n_nodes)
    np.add.at(out, np.array(net.tails, dtype=int), w)
    return out


def entropy_term(net: Network, w: ArrayLike) -> float:
    """sum over non-destination nodes of [sum w ln w - S ln S], with 0 ln 0 = 0."""
    w = _vec(net, w, "w")
    out = _node_outflow(net, w)
    nodes = [i for i in range(net.n_nodes) if net.out_arcs[i]]
    return float(_xlogx(w).sum() - _xlogx(out[nodes]).sum())


def entropy_bound(net: Network) -> float:
    """Upper bound on |entropy_term(w)| over the feasible set."""
    k = net.n_nodes - 1
    return net.inflow * k * math.log(net.n_arcs / k)


def perturbed_latency(net: Network, w: ArrayLike, theta: ArrayLike, beta: float) -> float:
    """Total weighted latency sum theta w^2 plus the entropy term divided by beta."""
    if not beta > 0:
        raise ValueError(f"beta must be positive (got {beta})")
    w = _vec(net, w, "w")
    return float(np.dot(_vec(net, theta, "theta"), w * w) + entropy_term(net, w) / beta)


def potential(net: Network, w: ArrayLike, theta: ArrayLike, beta: float, p: ArrayLike) -> float:
    """Equilibrium potential: sum of integrated arc costs plus entropy term / beta."""
    w = _vec(net, w, "w")
    th, p = _vec(net, theta, "theta"), _vec(net, p, "p")
    return float(np.dot(0.5 * th * w + p, w) + entropy_term(net, w) / beta)


def latency_gradient(net: Network, w: ArrayLike, theta: ArrayLike, beta: float) -> np.ndarray:
    """dL/dw_a = 2 theta_a w_a + ln(w_a / outflow of the tail node) / beta."""
    w = _vec(net, w, "w")
    out = _node_outflow(net, w)
    return 2 * _vec(net, theta, "theta") * w + np.log(w / out[np.array(net.tails)]) / beta


# --- convex solvers on the affine hull of the feasible set


def _affine_frame(net: Network) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cache = net.__dict__.setdefault("_frame_cache", {})
    if "frame" not in cache:
        rows = []
        for i in range(net.n_nodes):
            if i == net.d:
                continue
            row = np.zeros(net.n_arcs)
            row[list(net.out_arcs[i])] += 1.0
            row[list(net.in_arcs[i])] -= 1.0
            rows.append(row)
        A = np.array(rows)
        same_tail = np.equal.outer(np.array(net.tails), np.array(net.tails)).astype(float)
        cache["frame"] = (A, null_space(A), same_tail)
    return cache["frame"]


def _convex_min(
    net: Network,
    quad: np.ndarray,
    lin: np.ndarray,
    beta: float,
    opts: SolverOptions,
    w0: ArrayLike | None = None,
) -> np.ndarray:
    """Minimise sum(quad/2 w^2 + lin w) + entropy_term(w)/beta over the feasible set.

    Newton's method on the affine hull of the feasible set, with steps taken in
    the relative coordinates u = dw / w so that arcs whose optimal flow is
    tiny are not swamped by rounding in the others.
    """
    A, Z, same_tail = _affine_frame(net)
    tails = np.array(net.tails)
    w = uniform_flow(net) if w0 is None else np.array(w0, dtype=float)
    inv_beta = 1.0 / beta

    def objective(x: np.ndarray) -> float:
        return float(np.dot(0.5 * quad * x + lin, x) + entropy_term(net, x) * inv_beta)

    def grad_at(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = _node_outflow(net, x)[tails]
        return quad * x + lin + np.log(x / out) * inv_beta, out

    def stationarity(grad: np.ndarray) -> float:
        return float(np.max(np.abs(Z @ (Z.T @ grad))))

    fw = objective(w)
    grad, out = grad_at(w)
    res = stationarity(grad)
    for it in range(opts.max_iter):
        if res < opts.tol * (1 + np.max(np.abs(grad))):
            return w
        Zw = null_space(A * w)
        g_u = Zw.T @ (w * grad)
        hess = np.diag(quad * w * w + inv_beta * w) - inv_beta * same_tail * np.outer(w, w) / out[:, None]
        try:
            rel = -Zw @ np.linalg.solve(Zw.T @ hess @ Zw, g_u)
        except np.linalg.LinAlgError:
            rel = -Zw @ g_u
        slope = float((w * grad) @ rel)
        if slope >= 0:
            rel = -Zw @ g_u
            slope = float((w * grad) @ rel)
        t = 1.0
        if np.any(rel < 0):
            t = min(1.0, 0.99 / float(np.max(-rel)))
        while t >= 1e-14:
            cand = w * (1 + t * rel)
            fc = objective(cand)
            if fc <= fw + 1e-4 * t * slope:
                break
            # Near the optimum the objective change can drop below rounding;
            # fall back to requiring progress in stationarity.
            if abs(fc - fw) <= 1e-13 * (1 + abs(fw)):
                g_c, _ = grad_at(cand)
                if stationarity(g_c) < res:
                    break
            t *= 0.5
        else:
            raise SolverError("line search failed", res, it)
        w, fw = cand, fc
        grad, out = grad_at(w)
        res = stationarity(grad)
    raise SolverError("Newton descent did not converge", res, opts.max_iter)


def mte_solve_potential(
    net: Network,
    theta: ArrayLike,
    beta: float,
    p: ArrayLike,
    options: SolverOptions | None = None,
) -> np.ndarray:
    """Equilibrium flow as the minimiser of the potential (independent of :func:`mte_solve`)."""
    if not beta > 0:
        raise ValueError(f"beta must be positive (got {beta})")
    th = _vec(net, theta, "theta")
    return _convex_min(net, th, _vec(net, p, "p"), float(beta), options or DEFAULT_OPTIONS)


def social_optimum(
    net: Network,
    theta: ArrayLike,
    beta: float,
    options: SolverOptions | None = None,
) -> np.ndarray:
    """Flow minimising the perturbed total latency over the feasible set."""
    if not beta > 0:
        raise ValueError(f"beta must be positive (got {beta})")
    th = _vec(net, theta, "theta")
    return _convex_min(net, 2 * th, np.zeros(net.n_arcs), float(beta), options or DEFAULT_OPTIONS)
