"""Best responses of a representative player against a fixed population flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .distribution import check_flow_shape, policy_kernel, sampler_arrays, solve_discounted
from .model import DistributionFlow, FiniteMFG, PolicyFlow, QTable
from .rng import stream


def greedy_policy(q: QTable) -> PolicyFlow:
    """Deterministic argmax policy; ties go to the lowest action index."""
    n_actions = q.levels[0].shape[-1]
    return PolicyFlow.deterministic([np.argmax(lvl, axis=-1) for lvl in q.levels], n_actions)


def _require_finite(model: FiniteMFG, what: str) -> None:
    if model.discounted:
        raise ValueError(f"{what} needs a finite-horizon model (use policy_iteration_discounted)")


def _backward(model: FiniteMFG, mu: DistributionFlow, policy: PolicyFlow | None) -> QTable:
    """Q recursion over the tree; ``policy=None`` takes the max (optimal Q)."""
    tree = model.tree
    X, A = model.n_states, model.n_actions
    N = model.horizon
    q_levels: list[np.ndarray] = [None] * (N + 1)  # type: ignore[list-item]
    v_next = None
    for d in range(N, -1, -1):
        edges = tree.edges[d]
        n_edges = len(edges.symbol)
        cont = np.zeros((n_edges, X, A))
        if v_next is not None:
            for s in np.unique(edges.symbol):
                idx = np.flatnonzero(edges.symbol == s)
                cont[idx] = (model.transitions[s] @ v_next[idx].T).T.reshape(len(idx), X, A)
        q = np.zeros((tree.level_sizes()[d], X, A))
        for e in range(n_edges):
            i = edges.parent_pos[e]
            r = model.reward_table(mu.mean_field(d, i), int(edges.symbol[e]))
            q[i] += edges.prob[e] * (r + cont[e])
        q_levels[d] = q
        if d > 0:
            v = q.max(axis=-1) if policy is None else np.einsum("ixa,ixa->ix", q, policy.levels[d])
            # continuation of each level-(d-1) edge is the value at its child
            v_next = v
    return QTable(tuple(q_levels))


def backward_induction(model: FiniteMFG, mu: DistributionFlow) -> tuple[QTable, PolicyFlow]:
    """Exact optimal Q-table and greedy best response against ``mu``."""
    _require_finite(model, "backward induction")
    check_flow_shape(model, mu)
    q = _backward(model, mu, None)
    return q, greedy_policy(q)


def policy_q_values(model: FiniteMFG, policy: PolicyFlow, mu: DistributionFlow) -> QTable:
    """Q^{pi, mu}: expected return of ``policy`` against the crowd flow ``mu``."""
    _require_finite(model, "policy evaluation")
    check_flow_shape(model, mu)
    return _backward(model, mu, policy)


# --------------------------------------------------------------------------
# Q-learning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QLearningConfig:
    """Tabular Q-learning settings.

    ``episodes=None`` means ``10 * |X| * N`` episodes.
    """

    episodes: int | None = None
    alpha: float = 0.1
    epsilon: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.episodes is not None and self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def n_episodes(self, model: FiniteMFG) -> int:
        if self.episodes is not None:
            return self.episodes
        return 10 * model.n_states * max(model.horizon, 1)


def edge_rewards(model: FiniteMFG, mu: DistributionFlow) -> np.ndarray:
    """Reward table for every tree edge of depths ``0..N`` (global edge order)."""
    tables = []
    for d in range(model.horizon + 1):
        edges = model.tree.edges[d]
        for e in range(len(edges.symbol)):
            tables.append(model.reward_table(mu.mean_field(d, edges.parent_pos[e]), int(edges.symbol[e])))
    return np.stack(tables)


def q_learning(
    model: FiniteMFG,
    mu: DistributionFlow,
    cfg: QLearningConfig = QLearningConfig(),
    q_init: QTable | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[QTable, PolicyFlow]:
    """Model-free best response: epsilon-greedy tabular Q-learning.

    The kernel is only used to sample next states.  ``q_init`` warm-starts
    the table (zeros otherwise).
    """
    _require_finite(model, "Q-learning")
    check_flow_shape(model, mu)
    arr = sampler_arrays(model)
    N = model.horizon
    K = cfg.n_episodes(model)
    rng = rng if rng is not None else stream(cfg.seed, "qlearning")
    if q_init is None:
        q = np.zeros((int(arr.offsets[-1]), model.n_states, model.n_actions))
    else:
        q = np.concatenate(q_init.levels, axis=0).copy()
    u0 = rng.random(K)
    u = rng.random((K, N + 1, 4))
    _kernels.q_learning_episodes(
        q,
        arr.mu0_cum,
        arr.edge_start,
        arr.edge_end,
        arr.edge_child,
        arr.edge_sym,
        arr.edge_cum,
        edge_rewards(model, mu),
        arr.tr_indptr,
        arr.tr_indices,
        arr.tr_cum,
        N,
        cfg.alpha,
        cfg.epsilon,
        u0,
        u,
    )
    table = QTable(tuple(q[arr.offsets[d] : arr.offsets[d + 1]] for d in range(N + 1)))
    return table, greedy_policy(table)


# --------------------------------------------------------------------------
# Discounted games
# --------------------------------------------------------------------------


def _require_discounted(model: FiniteMFG, what: str) -> None:
    if not model.discounted:
        raise ValueError(f"{what} needs a discounted model")


def discounted_policy_values(model: FiniteMFG, mu: DistributionFlow, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(V, Q)`` of the stationary policy ``pi[x, a]`` against the fixed mean field."""
    _require_discounted(model, "discounted evaluation")
    gamma = model.discount
    R = model.reward_table(mu.mean_field(0, 0), 0)
    P = policy_kernel(model, pi)
    v = solve_discounted(P, np.einsum("xa,xa->x", pi, R), gamma)
    q = R + gamma * (model.transitions[0] @ v).reshape(model.n_states, model.n_actions)
    return v, q


def policy_iteration_discounted(model: FiniteMFG, mu: DistributionFlow, max_sweeps: int = 10_000) -> PolicyFlow:
    """Optimal stationary deterministic policy for the fixed-``mu`` MDP.

    Alternates exact evaluation and greedy improvement; the current action is
    kept unless another is strictly better, so the loop terminates.
    """
    _require_discounted(model, "policy iteration")
    X, A = model.n_states, model.n_actions
    R = model.reward_table(mu.mean_field(0, 0), 0)
    actions = np.argmax(R, axis=1)
    rows = np.arange(X)
    for _ in range(max_sweeps):
        pi = np.zeros((X, A))
        pi[rows, actions] = 1.0
        _, q = discounted_policy_values(model, mu, pi)
        best = np.argmax(q, axis=1)
        scale = max(1.0, float(np.max(np.abs(q))))
        improve = q[rows, best] > q[rows, actions] + 1e-12 * scale
        if not np.any(improve):
            return PolicyFlow((pi[None],))
        actions = np.where(improve, best, actions)
    raise RuntimeError("policy iteration did not stabilize")
