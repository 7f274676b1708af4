"""Small random games and brute-force oracles that avoid the library's tree code."""

from __future__ import annotations

import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from mfgfp.model import CrowdReward, DistributionFlow, FiniteMFG, NoiseTree, PolicyFlow


def random_mfg(rng, X=2, A=2, N=2, crowd="log", weight=None, tree=None, discount=None, n_symbols=None):
    """Random kernel and reward; ``tree=None`` gives the degenerate chain."""
    if discount is not None:
        tree = NoiseTree.degenerate(1, "0")
    elif tree is None:
        tree = NoiseTree.degenerate(N + 1, "0")
    S = n_symbols or len(tree.symbols)
    P = rng.dirichlet(np.ones(X), size=(S, X * A))
    base = rng.uniform(-1.0, 1.0, size=(S, X, A))
    w = rng.uniform(0.1, 1.0) if weight is None else weight
    return FiniteMFG(
        n_states=X,
        n_actions=A,
        transitions=tuple(sp.csr_matrix(P[s]) for s in range(S)),
        reward=CrowdReward(base, weight=w, kind=crowd),
        mu0=rng.dirichlet(np.ones(X)),
        tree=tree,
        horizon=None if discount is not None else N,
        discount=discount,
    )


def random_flow(rng, model) -> DistributionFlow:
    sizes = model.tree.level_sizes()
    return DistributionFlow(
        tuple(rng.dirichlet(np.ones(model.n_states), size=sizes[n]) for n in range(model.n_levels)),
        discount=model.discount,
    )


def random_policy(rng, model) -> PolicyFlow:
    sizes = model.tree.level_sizes()
    return PolicyFlow(
        tuple(
            rng.dirichlet(np.ones(model.n_actions), size=(sizes[n], model.n_states))
            for n in range(model.n_levels)
        )
    )


def dense_kernels(model) -> np.ndarray:
    X, A = model.n_states, model.n_actions
    return np.stack([k.toarray().reshape(X, A, X) for k in model.transitions])


# -- oracles on chain (no common noise) models -----------------------------


def chain_symbols(model) -> list[int]:
    tree = model.tree
    return [int(tree.symbol[tree.levels[d + 1][0]]) for d in range(model.horizon + 1)]


def oracle_propagate(model, pi: list[np.ndarray]) -> list[np.ndarray]:
    """Plain matrix products ``mu_{n+1} = mu_n P^{pi_n}``."""
    P = dense_kernels(model)
    syms = chain_symbols(model)
    mu = [np.array(model.mu0)]
    for n in range(model.horizon):
        Ppi = np.einsum("xa,xay->xy", pi[n], P[syms[n]])
        mu.append(mu[-1] @ Ppi)
    return mu


def oracle_return(model, pi: list[np.ndarray], crowd: list[np.ndarray]) -> float:
    P = dense_kernels(model)
    syms = chain_symbols(model)
    nu = np.array(model.mu0)
    total = 0.0
    for n in range(model.horizon + 1):
        r = model.reward(crowd[n], syms[n])
        total += float(nu @ np.sum(pi[n] * r, axis=1))
        if n < model.horizon:
            nu = nu @ np.einsum("xa,xay->xy", pi[n], P[syms[n]])
    return total


def deterministic_policies(model):
    X, A, L = model.n_states, model.n_actions, model.horizon + 1
    for flat in itertools.product(range(A), repeat=X * L):
        acts = np.array(flat).reshape(L, X)
        yield [np.eye(A)[acts[n]] for n in range(L)]


def brute_best_return(model, crowd: list[np.ndarray]) -> float:
    return max(oracle_return(model, pi, crowd) for pi in deterministic_policies(model))


def as_levels(policy: PolicyFlow) -> list[np.ndarray]:
    return [lvl[0] for lvl in policy.levels]


def as_flow(mu: list[np.ndarray]) -> DistributionFlow:
    return DistributionFlow(tuple(m[None, :] for m in mu))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def two_state_oracle():
    """Fixed 2-state / 2-action / N=2 game used by several oracle tests."""
    X, A = 2, 2
    P = np.array(
        [
            [0.8, 0.2],  # x0, a0
            [0.3, 0.7],  # x0, a1
            [0.6, 0.4],  # x1, a0
            [0.1, 0.9],  # x1, a1
        ]
    )
    base = np.array([[[0.5, 0.1], [0.2, 0.6]]])
    return FiniteMFG(
        n_states=X,
        n_actions=A,
        transitions=(sp.csr_matrix(P),),
        reward=CrowdReward(base, weight=0.3, kind="log"),
        mu0=np.array([0.7, 0.3]),
        tree=NoiseTree.degenerate(3, "0"),
        horizon=2,
        name="two_state",
    )


@pytest.fixture
def oracle_model():
    return two_state_oracle()
