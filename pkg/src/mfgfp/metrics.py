"""Returns, exploitability and convergence diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .best_response import (
    backward_induction,
    discounted_policy_values,
    policy_iteration_discounted,
    policy_q_values,
)
from .distribution import _step, check_flow_shape, check_policy_shape, propagate_exact
from .model import DistributionFlow, FiniteMFG, PolicyFlow, QTable
from .rng import stream

CLAMP_TOL = 1e-9


def _scenario_returns(model: FiniteMFG, policy: PolicyFlow, mu: DistributionFlow) -> tuple[float, np.ndarray]:
    """Expected return and the return conditional on each leaf scenario."""
    tree = model.tree
    nu = model.mu0[None, :]
    acc = np.zeros(1)
    total = 0.0
    for d in range(model.horizon + 1):
        edges = tree.edges[d]
        parent_prob = tree.node_prob[tree.levels[d]]
        pi = policy.levels[d]
        child_acc = np.empty(len(edges.symbol))
        for e in range(len(edges.symbol)):
            i = edges.parent_pos[e]
            r = model.reward_table(mu.mean_field(d, i), int(edges.symbol[e]))
            step = float(nu[i] @ np.einsum("xa,xa->x", pi[i], r))
            total += parent_prob[i] * edges.prob[e] * step
            child_acc[e] = acc[i] + step
        acc = child_acc
        if d < model.horizon:
            nu = _step(model, d, nu, pi)
    return total, acc


def evaluate_return(model: FiniteMFG, policy: PolicyFlow, mu: DistributionFlow) -> float:
    """Exact ``J(mu0, policy, mu)``: the agent plays ``policy`` in the crowd ``mu``."""
    check_policy_shape(model, policy)
    check_flow_shape(model, mu)
    if model.discounted != mu.discounted:
        raise ValueError("flow and model disagree on discounted mode")
    if model.discounted:
        v, _ = discounted_policy_values(model, mu, policy.levels[0][0])
        return float(model.mu0 @ v)
    return _scenario_returns(model, policy, mu)[0]


@dataclass
class ExploitabilityReport:
    phi: float
    j_best: float
    j_policy: float
    phi_raw: float
    backend: str = "exact"
    scenarios: list[dict] = field(default_factory=list)
    best_response: PolicyFlow | None = field(default=None, repr=False)
    flow: DistributionFlow | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "phi": self.phi,
            "phi_raw": self.phi_raw,
            "j_best": self.j_best,
            "j_policy": self.j_policy,
            "backend": self.backend,
            "scenarios": self.scenarios,
        }


def _clamp(raw: float) -> float:
    return 0.0 if -CLAMP_TOL <= raw < 0.0 else raw


def exploitability(model: FiniteMFG, policy: PolicyFlow, mu: DistributionFlow | None = None) -> ExploitabilityReport:
    """``max_pi' J(mu0, pi', mu^pi) - J(mu0, pi, mu^pi)`` with an exact best response.

    ``mu`` may be passed when ``mu^pi`` is already known.
    """
    if mu is None:
        mu = propagate_exact(model, policy)
    if model.discounted:
        br = policy_iteration_discounted(model, mu)
        v_best, _ = discounted_policy_values(model, mu, br.levels[0][0])
        v_pol, _ = discounted_policy_values(model, mu, policy.levels[0][0])
        j_best, j_pol = float(model.mu0 @ v_best), float(model.mu0 @ v_pol)
        raw = j_best - j_pol
        return ExploitabilityReport(_clamp(raw), j_best, j_pol, raw, best_response=br, flow=mu)

    q_star, br = backward_induction(model, mu)
    j_best = float(model.mu0 @ q_star.levels[0][0].max(axis=-1))
    j_pol, pol_leaf = _scenario_returns(model, policy, mu)
    _, br_leaf = _scenario_returns(model, br, mu)
    raw = j_best - j_pol
    leaves = model.tree.levels[-1]
    scenarios = [
        {"node": int(n), "prob": float(model.tree.node_prob[n]), "phi": float(b - p)}
        for n, b, p in zip(leaves, br_leaf, pol_leaf)
    ]
    return ExploitabilityReport(_clamp(raw), j_best, j_pol, raw, scenarios=scenarios, best_response=br, flow=mu)


def value_gap_bound(model: FiniteMFG, policy: PolicyFlow) -> tuple[float, float]:
    """``(phi(pi), ||V_BR,0 - V_pi,0||_inf)`` against the flow of ``pi``.

    The second value bounds the first: both value functions are computed
    against ``mu^pi``, the first by backward induction, the second by
    evaluating ``pi`` itself.
    """
    mu = propagate_exact(model, policy)
    q_star, _ = backward_induction(model, mu)
    v_best = q_star.levels[0][0].max(axis=-1)
    v_pol = policy_q_values(model, policy, mu).values(policy)[0][0]
    phi = exploitability(model, policy, mu).phi
    return phi, float(np.max(np.abs(v_best - v_pol)))


# --------------------------------------------------------------------------
# Monotonicity
# --------------------------------------------------------------------------


@dataclass
class MonotonicityReport:
    trials: int
    max_value: float
    argmax_trial: int
    argmax_symbol: str
    monotone: bool
    witness: tuple[list[float], list[float]] | None = None

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "max": self.max_value,
            "argmax_trial": self.argmax_trial,
            "argmax_symbol": self.argmax_symbol,
            "monotone": self.monotone,
            "witness": None if self.witness is None else {"mu": self.witness[0], "mu_prime": self.witness[1]},
        }


def monotonicity_check(model: FiniteMFG, trials: int, rng_seed: int = 0, tol: float = 1e-12) -> MonotonicityReport:
    """Evaluate ``sum_x (mu - mu')(rbar(x, mu) - rbar(x, mu'))`` on random pairs.

    Pairs are drawn from the symmetric Dirichlet(1) distribution; every noise
    symbol is checked with the same pairs.
    """
    reward = model.reward
    if not hasattr(reward, "bar"):
        raise ValueError(f"reward of {model.name!r} declares no monotone decomposition")
    rng = stream(rng_seed, "monotonicity")
    X = model.n_states
    batch = max(1, min(trials, 2_000_000 // max(X, 1)))
    best, best_trial, best_sym, witness = -np.inf, -1, 0, None
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        mu = rng.dirichlet(np.ones(X), size=m)
        nu = rng.dirichlet(np.ones(X), size=m)
        for s in range(len(model.symbols)):
            vals = np.sum((mu - nu) * (reward.bar(mu, s) - reward.bar(nu, s)), axis=1)
            k = int(np.argmax(vals))
            if vals[k] > best:
                best, best_trial, best_sym = float(vals[k]), done + k, s
                witness = (mu[k].tolist(), nu[k].tolist())
        done += m
    ok = best <= tol
    return MonotonicityReport(trials, best, best_trial, model.symbols[best_sym], ok, None if ok else witness)


# --------------------------------------------------------------------------
# Fixed-point residual
# --------------------------------------------------------------------------


@dataclass
class ResidualReport:
    residual: np.ndarray  # (N + 1, |X|)
    sup_norm: float
    weighted_norm: float
    argmax: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "sup_norm": self.sup_norm,
            "weighted_norm": self.weighted_norm,
            "argmax": {"n": self.argmax[0], "x": self.argmax[1]},
            "max": self.sup_norm,
        }


def fixed_point_residual(
    model: FiniteMFG, values: QTable | Sequence[np.ndarray], mu: DistributionFlow
) -> ResidualReport:
    """``V_n(x) - max_a {r(x, a, mu_n) + sum_x' p(x'|x, a) V_{n+1}(x')}`` for all ``(n, x)``.

    Only defined without common noise.  ``values`` is a Q-table (reduced by
    max over actions) or one value vector per step.
    """
    if model.discounted:
        raise ValueError("fixed-point residual is defined for finite-horizon games")
    if any(size != 1 for size in model.tree.level_sizes()):
        raise ValueError("fixed-point residual is defined without common noise")
    check_flow_shape(model, mu)
    X, A = model.n_states, model.n_actions
    N = model.horizon
    if isinstance(values, QTable):
        V = np.stack([lvl.max(axis=-1)[0] for lvl in values.levels])
    else:
        V = np.stack([np.asarray(v, dtype=np.float64).reshape(X) for v in values])
    if V.shape != (N + 1, X):
        raise ValueError(f"values have shape {V.shape}, expected {(N + 1, X)}")
    res = np.empty((N + 1, X))
    for n in range(N + 1):
        s = int(model.tree.edges[n].symbol[0])
        target = model.reward_table(mu.mean_field(n, 0), s)
        if n < N:
            s_next = s
            target = target + (model.transitions[s_next] @ V[n + 1]).reshape(X, A)
        res[n] = V[n] - target.max(axis=-1)
    abs_res = np.abs(res)
    flat = int(np.argmax(abs_res))
    weights = np.stack([lvl[0] for lvl in mu.levels])
    return ResidualReport(
        residual=res,
        sup_norm=float(abs_res.max()),
        weighted_norm=float(np.sum(weights * abs_res)),
        argmax=tuple(int(i) for i in np.unravel_index(flat, res.shape)),
    )


# --------------------------------------------------------------------------
# Convergence rate
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    n_points: int


def rate_fit(trace: Sequence[tuple[int, float]], skip: int = 10) -> RateFit:
    """Least-squares fit of ``log phi`` against ``log j`` for ``j >= skip``.

    Non-positive entries are dropped; fewer than five usable points is an error.
    """
    if len(trace) < 10:
        raise ValueError("rate fit needs at least 10 trace points")
    pts = [(j, phi) for j, phi in trace if j >= skip and phi > 0]
    if len(pts) < 5:
        raise ValueError(f"only {len(pts)} positive trace points at j >= {skip}")
    lj = np.log([p[0] for p in pts])
    lp = np.log([p[1] for p in pts])
    slope, intercept = np.polyfit(lj, lp, 1)
    pred = slope * lj + intercept
    ss_res = float(np.sum((lp - pred) ** 2))
    ss_tot = float(np.sum((lp - lp.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2, len(pts))
