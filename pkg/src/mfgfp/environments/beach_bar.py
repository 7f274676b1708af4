"""Beach bar process on a one-dimensional torus."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from ..model import CrowdReward, FiniteMFG, NoiseTree

OPEN, CLOSED = 0, 1
DRIFTS = (-1, 0, 1)  # left, still, right
NOISE_SETTINGS = ("none", "closure_at", "closure_window")


@dataclass(frozen=True)
class BeachBarParams:
    n_states: int = 100
    bar: int | None = None  # defaults to n_states // 2
    horizon: int | None = 15
    discount: float | None = None
    p_stay: float = 0.5
    noise: str = "none"
    close_step: int | None = None  # defaults to horizon // 2
    p_close: float = 0.5
    proximity: str = "closeness"  # or "distance" for the literal reading

    def __post_init__(self) -> None:
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if not 0.0 <= self.p_stay <= 1.0:
            raise ValueError("p_stay must lie in [0, 1]")
        if not 0.0 <= self.p_close <= 1.0:
            raise ValueError("p_close must lie in [0, 1]")
        if not 0 <= self.bar_state < self.n_states:
            raise ValueError(f"bar position {self.bar} outside the beach")
        if self.noise not in NOISE_SETTINGS:
            raise ValueError(f"noise must be one of {NOISE_SETTINGS}")
        if (self.horizon is None) == (self.discount is None):
            raise ValueError("set exactly one of horizon and discount")
        if self.discount is not None and self.noise != "none":
            raise ValueError("the discounted beach bar has no common noise")
        if self.proximity not in ("closeness", "distance"):
            raise ValueError("proximity must be 'closeness' or 'distance'")

    @property
    def bar_state(self) -> int:
        return self.n_states // 2 if self.bar is None else self.bar

    @property
    def closure_step(self) -> int:
        return self.horizon // 2 if self.close_step is None else self.close_step


def torus_distance(x: np.ndarray, y: int, n: int) -> np.ndarray:
    d = np.abs(np.asarray(x) - y) % n
    return np.minimum(d, n - d)


def proximity_reward(p: BeachBarParams) -> np.ndarray:
    d = torus_distance(np.arange(p.n_states), p.bar_state, p.n_states) / p.n_states
    return 1.0 - d if p.proximity == "closeness" else d


def beach_bar_kernel(n_states: int, p_stay: float) -> sp.csr_matrix:
    X, A = n_states, len(DRIFTS)
    rows, cols, vals = [], [], []
    side = (1.0 - p_stay) / 2.0
    for x in range(X):
        for a, b in enumerate(DRIFTS):
            for eps, w in ((-1, side), (0, p_stay), (1, side)):
                if w == 0.0:
                    continue
                rows.append(x * A + a)
                cols.append((x + b + eps) % X)
                vals.append(w)
    # duplicates (tiny tori) are summed by the COO -> CSR conversion
    return sp.coo_matrix((vals, (rows, cols)), shape=(X * A, X)).tocsr()


def _tree(p: BeachBarParams) -> NoiseTree:
    depth = p.horizon + 1
    symbols = ("open", "closed")
    if p.noise == "none":
        return NoiseTree.chain([OPEN] * depth, symbols[:1])
    k = p.closure_step
    window = range(1, p.horizon // 2 + 1)

    def branches(d, path):
        if CLOSED in path:
            return [(CLOSED, 1.0)]
        can_close = d == k if p.noise == "closure_at" else d in window
        if can_close:
            return [(OPEN, 1.0 - p.p_close), (CLOSED, p.p_close)]
        return [(OPEN, 1.0)]

    return NoiseTree.build(depth, branches, symbols)


def build_beach_bar(params: BeachBarParams = BeachBarParams()) -> FiniteMFG:
    """Torus beach with a bar; the closed-bar reward drops the proximity term."""
    p = params
    X = p.n_states
    move_cost = np.abs(np.asarray(DRIFTS, dtype=np.float64)) / X
    base_open = proximity_reward(p)[:, None] - move_cost[None, :]
    base_closed = np.broadcast_to(-move_cost[None, :], (X, len(DRIFTS)))
    if p.discount is not None:
        tree = NoiseTree.degenerate(1, "open")
        base = base_open[None]
    else:
        tree = _tree(p)
        base = np.stack([base_open, base_closed])[: len(tree.symbols)]
    kernel = beach_bar_kernel(X, p.p_stay)
    return FiniteMFG(
        n_states=X,
        n_actions=len(DRIFTS),
        transitions=tuple(kernel for _ in tree.symbols),
        reward=CrowdReward(base, weight=1.0, kind="log"),
        mu0=np.full(X, 1.0 / X),
        tree=tree,
        horizon=p.horizon,
        discount=p.discount,
        name="beach_bar",
        params=asdict(p),
        action_labels=("left", "still", "right"),
    )
