import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mte_tollkit.equilibrium import (
    SolverError,
    SolverOptions,
    arc_costs,
    conservation_residual,
    cost_to_go,
    entropy_bound,
    entropy_term,
    fixed_point_residual,
    latency_gradient,
    logit_split,
    mte_solve,
    mte_solve_potential,
    optimal_toll,
    optimal_toll_with_flow,
    perturbed_latency,
    potential,
    social_optimum,
    split_fractions,
)
from mte_tollkit.network import Network, enumerate_routes, parallel_network

from conftest import random_dag, random_feasible_flow, two_arc_mte, two_arc_so

# golden values from the scalar bisection oracle (theta=(1,2), g_o=2, beta=1, p=0)
MTE_W1 = 1.1989247982646387
SO_W1 = 1.2486688570237923


@pytest.mark.parametrize(
    "theta,w,p,c", [(1.0, 1.0, 0.0, 1.0), (1.5, 10.0, 2.0, 17.0), (0.0, 5.0, 3.0, 3.0)]
)
def test_arc_costs(theta, w, p, c):
    assert arc_costs([theta], [w], [p])[0] == pytest.approx(c, abs=1e-15)


def test_arc_costs_shape_mismatch():
    with pytest.raises(ValueError):
        arc_costs([1.0, 2.0], [1.0], [0.0, 0.0])


def test_cost_to_go_chain():
    g = 7.0
    net = Network(["o", "i", "d"], [("o", "i"), ("i", "d")], "o", "d", g)
    for beta in (0.01, 1.0, 50.0):
        np.testing.assert_allclose(cost_to_go(net, [1, 1], beta, [g, g], [0, 0]), [2 * g, g], rtol=1e-14)


def test_cost_to_go_into_destination():
    net = parallel_network(2, 3.0)
    z = cost_to_go(net, [2.0, 1.0], 1.0, [3.0, 0.0], [1.0, 0.0])
    assert z[0] == pytest.approx(7.0)


def test_cost_to_go_fork():
    # o -a1-> i, then i has two routes of cost 1 and 2
    net = Network(["o", "i", "d"], [("o", "i"), ("i", "d"), ("i", "d")], "o", "d", 1.0)
    z = cost_to_go(net, [1.0, 1.0, 2.0], 1.0, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    assert z[0] == pytest.approx(1.0 - math.log(math.exp(-1) + math.exp(-2)), abs=1e-14)


def test_cost_to_go_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        cost_to_go(parallel_network(2, 1.0), [1, 1], 0.0, [0.5, 0.5], [0, 0])


@pytest.mark.parametrize("beta", [1e-3, 1.0, 30.0])
def test_symmetric_two_arc(beta):
    net = parallel_network(2, 2.0)
    np.testing.assert_allclose(mte_solve(net, [1, 1], beta, [0, 0]), [1, 1], atol=1e-10)
    np.testing.assert_allclose(mte_solve_potential(net, [1, 1], beta, [0, 0]), [1, 1], atol=1e-10)
    np.testing.assert_allclose(social_optimum(net, [1, 1], beta), [1, 1], atol=1e-10)


def test_two_arc_golden_values():
    net = parallel_network(2, 2.0)
    assert two_arc_mte((1, 2), 1.0, (0, 0), 2.0) == pytest.approx(MTE_W1, abs=1e-14)
    assert two_arc_so((1, 2), 1.0, 2.0) == pytest.approx(SO_W1, abs=1e-14)
    assert mte_solve(net, [1, 2], 1.0, [0, 0])[0] == pytest.approx(MTE_W1, abs=1e-9)
    assert mte_solve_potential(net, [1, 2], 1.0, [0, 0])[0] == pytest.approx(MTE_W1, abs=1e-6)
    assert social_optimum(net, [1, 2], 1.0)[0] == pytest.approx(SO_W1, abs=1e-6)


def test_two_arc_social_optimum_grid_oracle():
    net = parallel_network(2, 2.0)
    theta = np.array([1.0, 2.0])
    grid = np.linspace(1e-6, 2 - 1e-6, 200001)
    L = theta[0] * grid**2 + theta[1] * (2 - grid) ** 2 + grid * np.log(grid / 2) + (2 - grid) * np.log((2 - grid) / 2)
    assert social_optimum(net, theta, 1.0)[0] == pytest.approx(grid[np.argmin(L)], abs=2e-5)


def test_scaling_symmetric_instance():
    for g in (2.0, 4.0):
        w = mte_solve(parallel_network(3, g), [1, 1, 1], 0.5, [0, 0, 0])
        np.testing.assert_allclose(w, np.full(3, g / 3), atol=1e-10)
        w2 = mte_solve_potential(parallel_network(3, g), [1, 1, 1], 0.5, [0, 0, 0])
        np.testing.assert_allclose(w2, np.full(3, g / 3), atol=1e-9)


def test_small_beta_gives_uniform_splits(par6):
    w = mte_solve(par6, np.arange(1.0, 7.0), 1e-6, np.zeros(6))
    assert np.max(np.abs(split_fractions(par6, w) - 1 / 6)) < 1e-4


def test_small_beta_splits_follow_route_counts():
    # As beta -> 0 every o-d route becomes equally likely, so a node splits its
    # throughput in proportion to the number of routes below each outgoing arc.
    rng = np.random.default_rng(0)
    for _ in range(10):
        net = random_dag(rng)
        theta = rng.uniform(0.1, 2, net.n_arcs)
        w = mte_solve(net, theta, 1e-6, np.zeros(net.n_arcs))
        frac = split_fractions(net, w)
        below = [len(enumerate_routes(net, j)) for j in range(net.n_nodes)]
        for i, arcs in enumerate(net.out_arcs):
            for k in arcs:
                assert abs(frac[k] - below[net.heads[k]] / below[i]) < 1e-4


def test_solver_error_carries_residual():
    net = parallel_network(6, 100.0)
    with pytest.raises(SolverError) as exc:
        mte_solve(net, np.arange(1, 7), 5.0, np.zeros(6), SolverOptions(max_iter=2, anderson=0))
    assert exc.value.residual > 0


def test_solvers_agree_and_conserve_on_random_dags():
    rng = np.random.default_rng(1)
    for _ in range(25):
        net = random_dag(rng)
        theta = rng.uniform(0.05, 3, net.n_arcs)
        beta = float(rng.uniform(0.05, 2))
        p = rng.uniform(0, 5, net.n_arcs)
        w = mte_solve(net, theta, beta, p)
        w2 = mte_solve_potential(net, theta, beta, p)
        assert np.max(np.abs(w - w2)) < 1e-6
        assert conservation_residual(net, w) < 1e-8
        assert conservation_residual(net, w2) < 1e-8
        assert fixed_point_residual(net, theta, beta, p, w) < 1e-9
        z = cost_to_go(net, theta, beta, w, p)
        assert np.max(np.abs(split_fractions(net, w) - logit_split(net, z, beta))) < 1e-8


def test_potential_is_minimised_by_equilibrium(gen4):
    rng = np.random.default_rng(2)
    theta = np.array([0.6, 0.4, 0.4, 0.4, 0.6, 0.6])
    p = rng.uniform(0, 10, 6)
    w = mte_solve(gen4, theta, 0.25, p)
    best = potential(gen4, w, theta, 0.25, p)
    for _ in range(200):
        assert potential(gen4, random_feasible_flow(gen4, rng), theta, 0.25, p) >= best - 1e-9


def test_latency_examples():
    net = parallel_network(2, 2.0)
    assert perturbed_latency(net, [1, 1], [1, 1], 1.0) == pytest.approx(2 - 2 * math.log(2), abs=1e-14)
    assert perturbed_latency(net, [2, 0], [1, 1], 1.0) == pytest.approx(4.0, abs=1e-14)
    assert perturbed_latency(net, [1, 1], [1, 1], 1e12) == pytest.approx(2.0, abs=1e-10)
    with pytest.raises(ValueError):
        perturbed_latency(net, [1, 1], [1, 1], 0.0)


def test_entropy_examples():
    assert entropy_term(parallel_network(2, 2.0), [1, 1]) == pytest.approx(-2 * math.log(2))
    assert entropy_term(parallel_network(2, 2.0), [2, 0]) == 0.0
    for d in (3, 5, 8):
        D = 12.0
        assert entropy_term(parallel_network(d, D), np.full(d, D / d)) == pytest.approx(-D * math.log(d))


@pytest.mark.parametrize("seed", range(3))
def test_entropy_bound_random_flows(seed, par6, gen4):
    rng = np.random.default_rng(seed)
    for net in (par6, gen4, random_dag(rng)):
        bound = entropy_bound(net)
        for _ in range(300):
            assert abs(entropy_term(net, random_feasible_flow(net, rng))) <= bound + 1e-9


def test_latency_gradient_finite_difference(gen4):
    rng = np.random.default_rng(7)
    theta = rng.uniform(0.1, 2, 6)
    for _ in range(20):
        w = random_feasible_flow(gen4, rng) + 1.0
        grad = latency_gradient(gen4, w, theta, 0.3)
        for k in range(6):
            h = 1e-5 * max(1.0, w[k])
            e = np.zeros(6)
            e[k] = h
            fd = (perturbed_latency(gen4, w + e, theta, 0.3) - perturbed_latency(gen4, w - e, theta, 0.3)) / (2 * h)
            assert abs(fd - grad[k]) <= 1e-5 * max(1.0, abs(grad[k]))


def test_latency_monotone_in_theta_and_beta(gen4):
    rng = np.random.default_rng(8)
    for _ in range(200):
        w = random_feasible_flow(gen4, rng)
        if w.min() < 1:
            continue
        th1 = rng.uniform(0, 2, 6)
        th2 = th1 + rng.uniform(0, 1, 6)
        b1 = float(rng.uniform(0.05, 1))
        b2 = b1 + float(rng.uniform(0, 1))
        assert perturbed_latency(gen4, w, th1, b1) <= perturbed_latency(gen4, w, th2, b2) + 1e-9


def test_social_optimum_beats_untolled_equilibrium():
    rng = np.random.default_rng(9)
    for _ in range(15):
        net = random_dag(rng)
        theta = rng.uniform(0.1, 3, net.n_arcs)
        beta = float(rng.uniform(0.05, 2))
        w_so = social_optimum(net, theta, beta)
        w_eq = mte_solve(net, theta, beta, np.zeros(net.n_arcs))
        assert perturbed_latency(net, w_so, theta, beta) <= perturbed_latency(net, w_eq, theta, beta) + 1e-9


def test_optimal_toll_symmetric():
    p, w = optimal_toll_with_flow(parallel_network(2, 2.0), [1, 1], 1.0)
    np.testing.assert_allclose(p, [1, 1], atol=1e-9)
    np.testing.assert_allclose(w, [1, 1], atol=1e-9)


def test_optimal_toll_two_arc_matches_oracle():
    net = parallel_network(2, 2.0)
    p = optimal_toll(net, [1, 2], 1.0)
    w = mte_solve(net, [1, 2], 1.0, p)
    assert w[0] == pytest.approx(SO_W1, abs=1e-6)
    np.testing.assert_allclose(w, social_optimum(net, [1, 2], 1.0), atol=1e-6)


def test_zero_latency_needs_no_toll(gen4):
    np.testing.assert_array_equal(optimal_toll(gen4, np.zeros(6), 0.5), np.zeros(6))


def test_optimal_toll_induces_social_optimum_on_random_dags():
    rng = np.random.default_rng(10)
    for _ in range(12):
        net = random_dag(rng)
        theta = rng.uniform(0.05, 3, net.n_arcs)
        beta = float(rng.uniform(0.05, 2))
        p = optimal_toll(net, theta, beta)
        w = mte_solve(net, theta, beta, p)
        assert np.max(np.abs(w - social_optimum(net, theta, beta))) < 1e-6
        np.testing.assert_allclose(p, theta * w, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(
    t1=st.floats(0.0, 10.0),
    t2=st.floats(0.0, 10.0),
    beta=st.floats(0.01, 5.0),
    p1=st.floats(0.0, 20.0),
    p2=st.floats(0.0, 20.0),
    g=st.floats(0.5, 200.0),
)
def test_two_arc_mte_matches_bisection(t1, t2, beta, p1, p2, g):
    w = mte_solve(parallel_network(2, g), [t1, t2], beta, [p1, p2])
    assert w[0] == pytest.approx(two_arc_mte((t1, t2), beta, (p1, p2), g), abs=1e-8)
    assert conservation_residual(parallel_network(2, g), w) < 1e-8
