"""Compiled inner loops for the sampling-based backends.

All randomness is passed in as pre-drawn uniforms so results depend only on
the caller's generator, never on numba's internal state.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _pick(cum, lo, hi, u):
    # first index in [lo, hi) whose cumulative weight exceeds u * total
    total = cum[hi - 1]
    target = u * total
    for j in range(lo, hi):
        if cum[j] > target:
            return j
    return hi - 1


@numba.njit(cache=True)
def _pick_row(cum_row, u):
    n = cum_row.shape[0]
    target = u * cum_row[n - 1]
    for j in range(n):
        if cum_row[j] > target:
            return j
    return n - 1


@numba.njit(cache=True)
def sample_paths(
    mu0_cum,
    policy_cum,
    edge_start,
    edge_end,
    edge_child,
    edge_sym,
    edge_cum,
    tr_indptr,
    tr_indices,
    tr_cum,
    n_actions,
    horizon,
    u0,
    u,
):
    """Roll out ``len(u0)`` episodes of a (tree-conditioned) policy.

    Returns state, action and global-node arrays of shape ``(K, N + 1)``.
    """
    K = u0.shape[0]
    xs = np.empty((K, horizon + 1), dtype=np.int64)
    acts = np.empty((K, horizon + 1), dtype=np.int64)
    nodes = np.empty((K, horizon + 1), dtype=np.int64)
    for k in range(K):
        x = _pick_row(mu0_cum, u0[k])
        g = 0
        for n in range(horizon + 1):
            a = _pick_row(policy_cum[g, x], u[k, n, 0])
            xs[k, n] = x
            acts[k, n] = a
            nodes[k, n] = g
            if n == horizon:
                break
            e = _pick(edge_cum, edge_start[g], edge_end[g], u[k, n, 1])
            s = edge_sym[e]
            row = x * n_actions + a
            lo = tr_indptr[s, row]
            hi = tr_indptr[s, row + 1]
            x = tr_indices[_pick(tr_cum, lo, hi, u[k, n, 2])]
            g = edge_child[e]
    return xs, acts, nodes


@numba.njit(cache=True)
def q_learning_episodes(
    q,
    mu0_cum,
    edge_start,
    edge_end,
    edge_child,
    edge_sym,
    edge_cum,
    edge_reward,
    tr_indptr,
    tr_indices,
    tr_cum,
    horizon,
    alpha,
    epsilon,
    u0,
    u,
):
    """Tabular epsilon-greedy Q-learning, updating ``q`` in place.

    ``q`` has shape ``(G, X, A)`` over the global node index of depths
    ``0..N``; ``edge_reward[e]`` is the reward table seen when edge ``e`` is
    realized from its parent node.
    """
    K = u0.shape[0]
    A = q.shape[2]
    for k in range(K):
        x = _pick_row(mu0_cum, u0[k])
        g = 0
        for n in range(horizon + 1):
            if u[k, n, 0] < epsilon:
                a = min(int(u[k, n, 1] * A), A - 1)
            else:
                a = 0
                best = q[g, x, 0]
                for b in range(1, A):
                    if q[g, x, b] > best:
                        best = q[g, x, b]
                        a = b
            e = _pick(edge_cum, edge_start[g], edge_end[g], u[k, n, 2])
            target = edge_reward[e, x, a]
            if n < horizon:
                s = edge_sym[e]
                row = x * A + a
                lo = tr_indptr[s, row]
                hi = tr_indptr[s, row + 1]
                x_next = tr_indices[_pick(tr_cum, lo, hi, u[k, n, 3])]
                g_next = edge_child[e]
                nxt = q[g_next, x_next, 0]
                for b in range(1, A):
                    if q[g_next, x_next, b] > nxt:
                        nxt = q[g_next, x_next, b]
                target += nxt
            else:
                x_next = x
                g_next = g
            q[g, x, a] = (1.0 - alpha) * q[g, x, a] + alpha * target
            x = x_next
            g = g_next
    return q


@numba.njit(cache=True)
def row_cumsum(indptr, data):
    out = np.empty_like(data)
    for r in range(indptr.shape[0] - 1):
        acc = 0.0
        for j in range(indptr[r], indptr[r + 1]):
            acc += data[j]
            out[j] = acc
    return out
