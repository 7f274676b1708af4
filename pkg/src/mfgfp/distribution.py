"""Population distributions induced by a policy.

Exact forward propagation over the scenario tree, Monte Carlo estimation
from sampled episodes, and gamma-occupancy measures for discounted games.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .model import DistributionFlow, FiniteMFG, PolicyFlow
from .rng import stream

DENSE_SOLVE_MAX_STATES = 2000


def check_policy_shape(model: FiniteMFG, policy: PolicyFlow) -> None:
    sizes = model.tree.level_sizes()
    if len(policy.levels) != model.n_levels:
        raise ValueError(f"policy has {len(policy.levels)} levels, model needs {model.n_levels}")
    for n, lvl in enumerate(policy.levels):
        expect = (sizes[n], model.n_states, model.n_actions)
        if lvl.shape != expect:
            raise ValueError(f"policy level {n} has shape {lvl.shape}, expected {expect}")


def check_flow_shape(model: FiniteMFG, flow: DistributionFlow) -> None:
    sizes = model.tree.level_sizes()
    if len(flow.levels) != model.n_levels:
        raise ValueError(f"flow has {len(flow.levels)} levels, model needs {model.n_levels}")
    for n, lvl in enumerate(flow.levels):
        if lvl.shape != (sizes[n], model.n_states):
            raise ValueError(f"flow level {n} has shape {lvl.shape}, expected {(sizes[n], model.n_states)}")


def _step(model: FiniteMFG, n: int, mu: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Push level-``n`` node distributions through one tree level."""
    edges = model.tree.edges[n]
    weights = (mu[:, :, None] * pi).reshape(mu.shape[0], -1)
    out = np.empty((len(edges.symbol), model.n_states))
    for s in np.unique(edges.symbol):
        idx = np.flatnonzero(edges.symbol == s)
        # (P_s^T W^T)^T with a fixed per-state reduction order
        out[idx] = (model.transitions[s].T @ weights[edges.parent_pos[idx]].T).T
    return out


def propagate_exact(model: FiniteMFG, policy: PolicyFlow) -> DistributionFlow:
    """Forward balance equation on every tree node of depths ``0..N``."""
    if model.discounted:
        return occupancy_measure(model, policy)
    check_policy_shape(model, policy)
    policy.check()
    levels = [model.mu0[None, :].copy()]
    for n in range(model.horizon):
        levels.append(_step(model, n, levels[n], policy.levels[n]))
    return DistributionFlow(tuple(levels))


def balance_residual(model: FiniteMFG, policy: PolicyFlow, flow: DistributionFlow) -> float:
    """Max absolute violation of the forward equation (and of ``mu_0``)."""
    worst = float(np.max(np.abs(flow.levels[0][0] - model.mu0)))
    for n in range(model.horizon):
        pushed = _step(model, n, flow.levels[n], policy.levels[n])
        worst = max(worst, float(np.max(np.abs(pushed - flow.levels[n + 1]))))
    return worst


# --------------------------------------------------------------------------
# Monte Carlo estimation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerArrays:
    """Flattened tree and kernel arrays consumed by the compiled kernels."""

    offsets: np.ndarray  # global index of the first node of each level 0..N
    edge_start: np.ndarray
    edge_end: np.ndarray
    edge_child: np.ndarray
    edge_sym: np.ndarray
    edge_cum: np.ndarray
    edge_parent: np.ndarray  # global parent index of each edge
    edge_level: np.ndarray
    tr_indptr: np.ndarray
    tr_indices: np.ndarray
    tr_cum: np.ndarray
    mu0_cum: np.ndarray


@lru_cache(maxsize=16)
def sampler_arrays(model: FiniteMFG) -> SamplerArrays:
    tree = model.tree
    N = model.horizon
    sizes = tree.level_sizes()[: N + 1]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    G = int(offsets[-1])
    starts, ends, childs, syms, cums, parents, lvls = [], [], [], [], [], [], []
    e_off = 0
    for d in range(N + 1):
        edges = tree.edges[d]
        m = len(edges.symbol)
        gp = offsets[d] + edges.parent_pos
        parents.append(gp)
        lvls.append(np.full(m, d))
        pos = np.arange(sizes[d])
        starts.append(e_off + np.searchsorted(edges.parent_pos, pos, side="left"))
        ends.append(e_off + np.searchsorted(edges.parent_pos, pos, side="right"))
        childs.append(offsets[d + 1] + np.arange(m) if d < N else np.full(m, -1))
        syms.append(edges.symbol)
        # cumulative probability restarted per parent
        c = np.empty(m)
        for p in range(sizes[d]):
            lo, hi = starts[-1][p] - e_off, ends[-1][p] - e_off
            c[lo:hi] = np.cumsum(edges.prob[lo:hi])
        cums.append(c)
        e_off += m
    S = len(model.transitions)
    XA = model.n_states * model.n_actions
    indptr = np.zeros((S, XA + 1), dtype=np.int64)
    indices, cum = [], []
    base = 0
    for s, kernel in enumerate(model.transitions):
        kernel = kernel.tocsr()
        kernel.sort_indices()
        indptr[s] = kernel.indptr + base
        indices.append(kernel.indices.astype(np.int64))
        cum.append(_kernels.row_cumsum(kernel.indptr.astype(np.int64), kernel.data.astype(np.float64)))
        base += kernel.nnz
    start = np.concatenate(starts).astype(np.int64)
    end = np.concatenate(ends).astype(np.int64)
    assert len(start) == G
    return SamplerArrays(
        offsets=offsets,
        edge_start=start,
        edge_end=end,
        edge_child=np.concatenate(childs).astype(np.int64),
        edge_sym=np.concatenate(syms).astype(np.int64),
        edge_cum=np.concatenate(cums),
        edge_parent=np.concatenate(parents).astype(np.int64),
        edge_level=np.concatenate(lvls).astype(np.int64),
        tr_indptr=indptr,
        tr_indices=np.concatenate(indices),
        tr_cum=np.concatenate(cum),
        mu0_cum=np.cumsum(model.mu0),
    )


@dataclass(frozen=True)
class SampleTrajectories:
    """``K`` sampled episodes: states, actions and tree nodes per step."""

    states: np.ndarray
    actions: np.ndarray
    nodes: np.ndarray
    seed: int


def sample_trajectories(
    model: FiniteMFG, policy: PolicyFlow, episodes: int, rng: np.random.Generator, seed: int = 0
) -> SampleTrajectories:
    if model.discounted:
        raise ValueError("episode sampling needs a finite-horizon model")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    check_policy_shape(model, policy)
    policy.check()
    arr = sampler_arrays(model)
    N = model.horizon
    policy_cum = np.cumsum(np.concatenate(policy.levels, axis=0), axis=-1)
    # row k of the uniforms drives episode k only: the estimate does not
    # depend on how episodes are scheduled
    u0 = rng.random(episodes)
    u = rng.random((episodes, N + 1, 3))
    xs, acts, gs = _kernels.sample_paths(
        arr.mu0_cum,
        policy_cum,
        arr.edge_start,
        arr.edge_end,
        arr.edge_child,
        arr.edge_sym,
        arr.edge_cum,
        arr.tr_indptr,
        arr.tr_indices,
        arr.tr_cum,
        model.n_actions,
        N,
        u0,
        u,
    )
    nodes = model.tree.levels
    # global index -> tree node id
    global_ids = np.concatenate([nodes[d] for d in range(N + 1)])
    return SampleTrajectories(states=xs, actions=acts, nodes=global_ids[gs], seed=seed)


def estimate_empirical(model: FiniteMFG, policy: PolicyFlow, episodes: int, rng_seed: int = 0) -> DistributionFlow:
    """Empirical state frequencies per ``(n, node)`` from ``episodes`` rollouts.

    Slices of nodes that no episode visited hold NaN and are marked False in
    ``estimated``.
    """
    return _estimate(model, policy, episodes, stream(rng_seed, "density"), rng_seed)


def _estimate(model, policy, episodes, rng, seed) -> DistributionFlow:
    traj = sample_trajectories(model, policy, episodes, rng, seed)
    tree = model.tree
    X = model.n_states
    levels, flags = [], []
    for n in range(model.horizon + 1):
        pos = tree.position[traj.nodes[:, n]]
        m = tree.level_sizes()[n]
        counts = np.bincount(pos * X + traj.states[:, n], minlength=m * X).reshape(m, X).astype(np.float64)
        visits = counts.sum(axis=1)
        seen = visits > 0
        lvl = np.full((m, X), np.nan)
        lvl[seen] = counts[seen] / visits[seen, None]
        levels.append(lvl)
        flags.append(seen)
    return DistributionFlow(tuple(levels), estimated=tuple(flags))


# --------------------------------------------------------------------------
# Discounted occupancy measures
# --------------------------------------------------------------------------


def policy_kernel(model: FiniteMFG, pi: np.ndarray, symbol: int = 0) -> sp.csr_matrix:
    """State-to-state kernel ``P^pi`` of a stationary policy ``pi[x, a]``."""
    X, A = model.n_states, model.n_actions
    rows = np.repeat(np.arange(X), A)
    cols = np.arange(X * A)
    select = sp.csr_matrix((pi.ravel(), (rows, cols)), shape=(X, X * A))
    return (select @ model.transitions[symbol]).tocsr()


def solve_discounted(matrix: sp.csr_matrix, rhs: np.ndarray, gamma: float, transpose: bool = False) -> np.ndarray:
    """Solve ``(I - gamma M) v = rhs`` (or with ``M^T``).

    Dense LU for small systems, fixed-point iteration to residual < 1e-10
    for large ones.
    """
    M = matrix.T.tocsr() if transpose else matrix
    n = M.shape[0]
    if n <= DENSE_SOLVE_MAX_STATES:
        return np.linalg.solve(np.eye(n) - gamma * M.toarray(), rhs)
    v = rhs.copy()
    while True:
        nxt = rhs + gamma * (M @ v)
        if np.max(np.abs(nxt - v)) < 1e-10 * (1.0 - gamma):
            return nxt
        v = nxt


def occupancy_measure(model: FiniteMFG, policy: PolicyFlow) -> DistributionFlow:
    """Gamma-occupancy ``mu0^T (I - gamma P^pi)^{-1}`` of a stationary policy."""
    if not model.discounted:
        raise ValueError("occupancy measures need a discounted model")
    check_policy_shape(model, policy)
    policy.check()
    P = policy_kernel(model, policy.levels[0][0])
    occ = solve_discounted(P, model.mu0, model.discount, transpose=True)
    return DistributionFlow((occ[None, :],), discount=model.discount)


# --------------------------------------------------------------------------
# Averaging
# --------------------------------------------------------------------------


def mix_flows(average: DistributionFlow, new: DistributionFlow, j: int) -> DistributionFlow:
    """``(j - 1) / j * average + 1 / j * new`` slice by slice.

    Unestimated slices of a sampled ``new`` flow leave the average untouched;
    unestimated slices of ``average`` take ``new`` as is.
    """
    if j < 1:
        raise ValueError("iteration index must be >= 1")
    if len(average.levels) != len(new.levels) or any(
        a.shape != b.shape for a, b in zip(average.levels, new.levels)
    ):
        raise ValueError("flow shapes differ")
    if average.discount != new.discount:
        raise ValueError("cannot mix discounted and finite-horizon flows")
    if j == 1:
        return DistributionFlow(tuple(lvl.copy() for lvl in new.levels), new.discount, new.estimated)
    w_old, w_new = (j - 1) / j, 1.0 / j
    levels, flags = [], []
    for n, (a, b) in enumerate(zip(average.levels, new.levels)):
        mixed = w_old * a + w_new * b
        if average.estimated is None and new.estimated is None:
            levels.append(mixed)
            continue
        ea = average.estimated[n] if average.estimated is not None else np.ones(len(a), bool)
        eb = new.estimated[n] if new.estimated is not None else np.ones(len(b), bool)
        out = np.where(eb[:, None], np.where(ea[:, None], mixed, b), a)
        levels.append(out)
        flags.append(ea | eb)
    return DistributionFlow(tuple(levels), average.discount, tuple(flags) if flags else None)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
