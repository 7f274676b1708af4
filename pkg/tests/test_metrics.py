import numpy as np
import pytest
import scipy.sparse as sp

from mfgfp.best_response import backward_induction
from mfgfp.distribution import propagate_exact
from mfgfp.environments import build_env
from mfgfp.metrics import (
    evaluate_return,
    exploitability,
    fixed_point_residual,
    monotonicity_check,
    rate_fit,
    value_gap_bound,
)
from mfgfp.model import CrowdReward, FiniteMFG, NoiseTree, PolicyFlow
from mfgfp.rng import stream

from conftest import (
    as_levels,
    brute_best_return,
    dense_kernels,
    oracle_propagate,
    oracle_return,
    random_flow,
    random_mfg,
    random_policy,
    two_state_oracle,
)

# -- returns ---------------------------------------------------------------


def test_constant_reward_single_step():
    m = FiniteMFG(2, 2, (sp.csr_matrix(np.full((4, 2), 0.5)),), CrowdReward(np.ones((1, 2, 2)), kind="none"),
                  np.array([0.3, 0.7]), NoiseTree.degenerate(1), horizon=0)
    pi = PolicyFlow.uniform(m)
    assert evaluate_return(m, pi, propagate_exact(m, pi)) == 1.0


def test_return_matches_oracle(rng):
    for _ in range(10):
        m = random_mfg(rng, X=3, A=2, N=3)
        pi, mu = random_policy(rng, m), random_flow(rng, m)
        crowd = [lvl[0] for lvl in mu.levels]
        assert abs(evaluate_return(m, pi, mu) - oracle_return(m, as_levels(pi), crowd)) < 1e-12


def test_return_matches_monte_carlo(oracle_model):
    m = oracle_model
    pi = PolicyFlow((np.array([[[0.3, 0.7], [0.6, 0.4]]]),) * 3)
    mu = propagate_exact(m, pi)
    exact = evaluate_return(m, pi, mu)
    rng = stream(11, "mc-oracle")
    K = 1_000_000
    P = dense_kernels(m)[0]
    x = (rng.random(K) >= m.mu0[0]).astype(int)
    ret = np.zeros(K)
    for n in range(m.horizon + 1):
        a = (rng.random(K) >= pi.levels[n][0][x, 0]).astype(int)
        ret += m.reward(mu.levels[n][0], 0)[x, a]
        x = (rng.random(K) >= P[x, a, 0]).astype(int)
    se = ret.std(ddof=1) / np.sqrt(K)
    assert abs(ret.mean() - exact) < 3 * se


def test_return_is_linear_in_reward(rng):
    m = random_mfg(rng, X=3, A=2, N=3, crowd="none")
    scaled = FiniteMFG(3, 2, m.transitions, CrowdReward(2.5 * m.reward.base, kind="none"), m.mu0, m.tree,
                       horizon=3)
    pi = random_policy(rng, m)
    mu = propagate_exact(m, pi)
    assert abs(evaluate_return(scaled, pi, mu) - 2.5 * evaluate_return(m, pi, mu)) < 1e-9
    assert abs(exploitability(scaled, pi).phi - 2.5 * exploitability(m, pi).phi) < 1e-9


def test_mode_mismatch_is_an_error(rng):
    fin = random_mfg(rng, X=2, A=2, N=0)
    disc = random_mfg(rng, X=2, A=2, discount=0.9)
    pi = PolicyFlow.uniform(fin)
    with pytest.raises(ValueError):
        evaluate_return(fin, pi, random_flow(rng, disc))


# -- exploitability --------------------------------------------------------


def test_single_state_single_action_is_zero():
    m = FiniteMFG(1, 1, (sp.csr_matrix(np.ones((1, 1))),), CrowdReward(np.ones((1, 1, 1))), np.ones(1),
                  NoiseTree.degenerate(4), horizon=3)
    assert exploitability(m, PolicyFlow.uniform(m)).phi == 0.0


def test_bad_policy_matches_brute_force_gap(oracle_model):
    m = oracle_model
    # always play the action with the lower base reward
    bad = PolicyFlow.deterministic([np.array([[1, 0]])] * 3, 2)
    rep = exploitability(m, bad)
    crowd = oracle_propagate(m, as_levels(bad))
    gap = brute_best_return(m, crowd) - oracle_return(m, as_levels(bad), crowd)
    assert gap > 0.1
    assert abs(rep.phi - gap) < 1e-10
    assert abs(rep.phi - (rep.j_best - rep.j_policy)) < 1e-12


def test_exploitability_is_non_negative(rng):
    for _ in range(20):
        m = random_mfg(rng, X=3, A=3, N=3)
        assert exploitability(m, random_policy(rng, m)).phi >= -1e-9


def test_exploitability_permutation_invariant(rng):
    m = random_mfg(rng, X=4, A=3, N=3)
    pi = random_policy(rng, m)
    ps, pa = rng.permutation(4), rng.permutation(3)
    P = dense_kernels(m)[0]
    P2 = P[ps][:, pa][:, :, ps]
    base2 = m.reward.base[:, ps][:, :, pa]
    m2 = FiniteMFG(4, 3, (sp.csr_matrix(P2.reshape(12, 4)),), CrowdReward(base2, m.reward.weight), m.mu0[ps],
                   m.tree, horizon=3)
    pi2 = PolicyFlow(tuple(lvl[:, ps][:, :, pa] for lvl in pi.levels))
    assert abs(exploitability(m, pi).phi - exploitability(m2, pi2).phi) < 1e-10


def test_scenarios_decompose_phi():
    m = build_env("beach_bar_cn1", {"n_states": 20, "horizon": 8})
    rep = exploitability(m, PolicyFlow.uniform(m))
    assert len(rep.scenarios) == 2
    total = sum(s["prob"] * s["phi"] for s in rep.scenarios)
    assert abs(total - rep.phi) < 1e-10


def test_single_action_nash_is_zero(rng):
    m = random_mfg(rng, X=5, A=1, N=4)
    assert abs(exploitability(m, PolicyFlow.uniform(m)).phi) < 1e-9


def test_discounted_exploitability(rng):
    m = random_mfg(rng, X=4, A=2, discount=0.9)
    rep = exploitability(m, random_policy(rng, m))
    assert rep.phi >= 0.0 and rep.flow.discounted


# -- value-gap bound ------------------------------------------------------


def test_value_gap_bounds_exploitability(rng):
    for _ in range(10):
        m = random_mfg(rng, X=4, A=3, N=4)
        phi, gap = value_gap_bound(m, random_policy(rng, m))
        assert phi <= gap + 1e-12


# -- monotonicity ----------------------------------------------------------


def test_mu_free_crowd_term_gives_zero(rng):
    m = random_mfg(rng, X=4, A=2, N=1, crowd="none")
    rep = monotonicity_check(m, 200, rng_seed=0)
    assert rep.max_value == 0.0 and rep.monotone


def test_log_crowd_is_monotone():
    m = build_env("beach_bar", {"n_states": 30})
    rep = monotonicity_check(m, 2000, rng_seed=1)
    assert rep.max_value <= 0.0 and rep.monotone


def test_adversarial_crowd_term_is_caught(rng):
    m = random_mfg(rng, X=4, A=2, N=1, crowd="linear", weight=1.0)
    rep = monotonicity_check(m, 100, rng_seed=2)
    assert not rep.monotone and rep.max_value > 0
    mu, nu = map(np.array, rep.witness)
    assert abs(np.sum((mu - nu) ** 2) - rep.max_value) < 1e-12


def test_monotonicity_needs_decomposition():
    m = build_env("lq", {"horizon": 2})
    with pytest.raises(ValueError):
        monotonicity_check(m, 10)


# -- fixed-point residual ---------------------------------------------------


def test_perturbation_shows_up_at_entry(rng):
    m = random_mfg(rng, X=4, A=2, N=4)
    mu = random_flow(rng, m)
    q, _ = backward_induction(m, mu)
    V = [lvl[0].max(axis=1).copy() for lvl in q.levels]
    V[2][1] += 0.37
    res = fixed_point_residual(m, V, mu).residual
    assert abs(res[2, 1] - 0.37) < 1e-12
    # only the perturbed slot and the step feeding into it move
    mask = np.ones_like(res, dtype=bool)
    mask[2, 1] = False
    mask[1, :] = False
    assert np.abs(res[mask]).max() < 1e-12


def test_residual_rejects_tree():
    m = build_env("beach_bar_cn1", {"n_states": 10, "horizon": 4})
    mu = propagate_exact(m, PolicyFlow.uniform(m))
    with pytest.raises(ValueError):
        fixed_point_residual(m, backward_induction(m, mu)[0], mu)


# -- rate fit --------------------------------------------------------------


def test_rate_fit_power_laws():
    js = np.arange(1, 201)
    assert abs(rate_fit([(j, 3.0 / j) for j in js]).slope + 1.0) < 1e-9
    assert abs(rate_fit([(j, 3.0 / np.sqrt(j)) for j in js]).slope + 0.5) < 1e-9


def test_rate_fit_drops_non_positive_and_needs_points():
    trace = [(j, 1.0 / j if j % 2 else 0.0) for j in range(1, 40)]
    assert abs(rate_fit(trace).slope + 1.0) < 1e-9
    with pytest.raises(ValueError):
        rate_fit([(j, 0.0) for j in range(1, 40)])
    with pytest.raises(ValueError):
        rate_fit([(j, 1.0) for j in range(1, 5)])
