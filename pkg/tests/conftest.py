"""Shared fixtures and small independent oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mte_tollkit.network import Network, general_network, parallel_network, validate


def bisect(f, lo: float, hi: float, iters: int = 200) -> float:
    """Root of an increasing scalar function by plain bisection."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def two_arc_mte(theta, beta, p, g) -> float:
    """Flow on arc 1 of a 2-arc parallel instance: logit split of the arc costs."""
    def f(w1):
        w2 = g - w1
        return math.log(w1 / w2) - beta * ((theta[1] * w2 + p[1]) - (theta[0] * w1 + p[0]))

    return bisect(f, g * 1e-300, g * (1 - 1e-16))


def two_arc_so(theta, beta, g) -> float:
    """Flow on arc 1 minimising the perturbed latency of a 2-arc parallel instance."""
    def dL(w1):
        w2 = g - w1
        return 2 * theta[0] * w1 - 2 * theta[1] * w2 + math.log(w1 / w2) / beta

    return bisect(dL, g * 1e-300, g * (1 - 1e-16))


def random_dag(rng: np.random.Generator, max_arcs: int = 12, inflow: float | None = None) -> Network:
    """Random valid single-OD DAG with at most ``max_arcs`` arcs."""
    while True:
        n = int(rng.integers(2, 6))
        nodes = [f"n{i}" for i in range(n)]
        arcs: list[tuple[str, str]] = []
        for j in range(1, n):  # every node reachable from an earlier one
            arcs.append((nodes[int(rng.integers(0, j))], nodes[j]))
        for i in range(n - 1):  # every node reaches a later one
            if not any(a[0] == nodes[i] for a in arcs):
                arcs.append((nodes[i], nodes[int(rng.integers(i + 1, n))]))
        for _ in range(int(rng.integers(1, 6))):
            i = int(rng.integers(0, n - 1))
            arcs.append((nodes[i], nodes[int(rng.integers(i + 1, n))]))
        if len(arcs) > max_arcs:
            continue
        g = float(rng.uniform(2, 50)) if inflow is None else inflow
        net = Network(nodes, arcs, nodes[0], nodes[-1], g)
        if validate(net).ok:
            return net


def random_feasible_flow(net: Network, rng: np.random.Generator) -> np.ndarray:
    """Flow in the feasible polytope from random Dirichlet splits at every node."""
    w = np.zeros(net.n_arcs)
    through = np.zeros(net.n_nodes)
    through[net.o] = net.inflow
    for i in net.topo_indices():
        out = net.out_arcs[i]
        if not out:
            continue
        frac = rng.dirichlet(np.full(len(out), 0.7))
        for k, f in zip(out, frac):
            w[k] = through[i] * f
            through[net.heads[k]] += w[k]
    return w


@pytest.fixture
def par6() -> Network:
    return parallel_network(6, 100.0)


@pytest.fixture
def gen4() -> Network:
    return general_network(100.0)


@pytest.fixture
def two_arc():
    return lambda g=2.0: parallel_network(2, g)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
