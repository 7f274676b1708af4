"""Finite mean field game data model.

A game is a finite state set, a finite action set, a transition kernel
``p(x'|x, a, xi)`` and a reward ``r(x, a, mu, xi)`` where ``xi`` is a
common-noise symbol.  Common noise is always represented as an explicit
scenario tree; games without common noise use a single-branch tree.

Flows (policies, distributions, Q-tables) are stored level by level: level
``n`` is an array whose first axis enumerates the tree nodes at depth ``n``
(in depth-first order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

PROB_TOL = 1e-12
LEVEL_TOL = 1e-10
OCCUPANCY_TOL = 1e-8
MAX_TREE_NODES = 100_000


class TreeTooLargeError(ValueError):
    """Raised when a scenario tree exceeds the exact-enumeration bound."""


# --------------------------------------------------------------------------
# Scenario tree
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseTree:
    """Rooted scenario tree of common-noise realizations.

    Nodes are numbered in depth-first order; node 0 is the root (the empty
    noise prefix).  ``symbol[i]`` is the index into ``symbols`` of the edge
    leading into node ``i`` and ``prob[i]`` its conditional probability.
    """

    symbols: tuple[str, ...]
    parent: np.ndarray
    symbol: np.ndarray
    prob: np.ndarray

    def __post_init__(self) -> None:
        for name in ("parent", "symbol", "prob"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- constructors ------------------------------------------------------

    @classmethod
    def build(
        cls,
        depth: int,
        branches: Callable[[int, tuple[int, ...]], Sequence[tuple[int, float]]],
        symbols: Sequence[str],
        max_nodes: int | None = None,
    ) -> "NoiseTree":
        """Grow a tree of the given depth.

        ``branches(d, path)`` returns ``(symbol_index, probability)`` pairs for
        the children of the node reached by ``path`` (a tuple of ``d`` symbol
        indices).
        """
        parent: list[int] = [-1]
        symbol: list[int] = [-1]
        prob: list[float] = [1.0]
        # explicit stack keeps depth-first numbering without recursion limits
        stack: list[tuple[int, tuple[int, ...]]] = [(0, ())]
        while stack:
            node, path = stack.pop()
            if len(path) == depth:
                continue
            children = []
            for sym, p in branches(len(path), path):
                parent.append(node)
                symbol.append(int(sym))
                prob.append(float(p))
                children.append((len(parent) - 1, path + (int(sym),)))
                if max_nodes is not None and len(parent) > max_nodes:
                    raise TreeTooLargeError(
                        f"scenario tree exceeds {max_nodes} nodes; use a smaller horizon or noise alphabet"
                    )
            # push in reverse so the first child is expanded first
            stack.extend(reversed(children))
        return cls._from_preorder(tuple(symbols), parent, symbol, prob)

    @classmethod
    def _from_preorder(cls, symbols, parent, symbol, prob) -> "NoiseTree":
        # build() appends children of a node contiguously, then descends; the
        # resulting ids are not pre-order.  Renumber them depth-first.
        parent = np.asarray(parent, dtype=np.int64)
        kids: list[list[int]] = [[] for _ in range(len(parent))]
        for i in range(1, len(parent)):
            kids[parent[i]].append(i)
        order: list[int] = []
        stack = [0]
        while stack:
            i = stack.pop()
            order.append(i)
            stack.extend(reversed(kids[i]))
        new_id = np.empty(len(order), dtype=np.int64)
        new_id[np.asarray(order)] = np.arange(len(order))
        idx = np.asarray(order)
        new_parent = np.where(parent[idx] >= 0, new_id[np.maximum(parent[idx], 0)], -1)
        return cls(
            symbols=symbols,
            parent=new_parent,
            symbol=np.asarray(symbol, dtype=np.int64)[idx],
            prob=np.asarray(prob, dtype=np.float64)[idx],
        )

    @classmethod
    def chain(cls, symbols_per_level: Sequence[int], symbols: Sequence[str]) -> "NoiseTree":
        """Degenerate tree: one child with probability 1 at every level."""
        levels = list(symbols_per_level)
        return cls.build(len(levels), lambda d, path: [(levels[d], 1.0)], symbols)

    @classmethod
    def degenerate(cls, depth: int, symbol: str = "0") -> "NoiseTree":
        return cls.chain([0] * depth, [symbol])

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseTree":
        """Parse the nested ``{"children": [{"symbol", "prob", "children"}]}`` form."""
        symbols: list[str] = []
        parent, symbol, prob = [-1], [-1], [1.0]

        def visit(node: dict, node_id: int) -> None:
            for child in node.get("children", []):
                label = str(child["symbol"])
                if label not in symbols:
                    symbols.append(label)
                parent.append(node_id)
                symbol.append(symbols.index(label))
                prob.append(float(child["prob"]))
                visit(child, len(parent) - 1)

        visit(data, 0)
        # visit() already numbers nodes in pre-order
        return cls(tuple(symbols), np.array(parent), np.array(symbol), np.array(prob))

    def to_dict(self) -> dict:
        nodes: list[dict] = [{} for _ in range(self.n_nodes)]
        for i in range(self.n_nodes):
            if i > 0:
                nodes[i] = {"symbol": self.symbols[self.symbol[i]], "prob": float(self.prob[i])}
        for i in range(1, self.n_nodes):
            nodes[self.parent[i]].setdefault("children", []).append(nodes[i])
        return nodes[0]

    # -- derived structure -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @cached_property
    def depth_of(self) -> np.ndarray:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(1, self.n_nodes):
            depth[i] = depth[self.parent[i]] + 1
        return depth

    @property
    def depth(self) -> int:
        return int(self.depth_of.max()) if self.n_nodes else 0

    @cached_property
    def levels(self) -> tuple[np.ndarray, ...]:
        """Node ids at each depth, in depth-first order."""
        d = self.depth_of
        return tuple(np.flatnonzero(d == k) for k in range(self.depth + 1))

    @cached_property
    def position(self) -> np.ndarray:
        """Index of each node inside its level."""
        pos = np.empty(self.n_nodes, dtype=np.int64)
        for ids in self.levels:
            pos[ids] = np.arange(len(ids))
        return pos

    @cached_property
    def node_prob(self) -> np.ndarray:
        """Unconditional probability P(node) via the chain rule."""
        p = np.ones(self.n_nodes)
        for i in range(1, self.n_nodes):
            p[i] = self.prob[i] * p[self.parent[i]]
        return p

    @cached_property
    def edges(self) -> tuple["LevelEdges", ...]:
        """Edges from level ``d`` to level ``d + 1`` ordered by child position."""
        out = []
        for d in range(self.depth):
            kids = self.levels[d + 1]
            out.append(
                LevelEdges(
                    parent_pos=self.position[self.parent[kids]],
                    symbol=self.symbol[kids],
                    prob=self.prob[kids],
                    child_ids=kids,
                )
            )
        return tuple(out)

    def level_sizes(self) -> list[int]:
        return [len(ids) for ids in self.levels]

    def path(self, node: int) -> list[int]:
        """Symbol indices from the root to ``node``."""
        out = []
        while node > 0:
            out.append(int(self.symbol[node]))
            node = int(self.parent[node])
        return out[::-1]

    def ancestor(self, node: int, depth: int) -> int:
        while self.depth_of[node] > depth:
            node = int(self.parent[node])
        return node


@dataclass(frozen=True)
class LevelEdges:
    parent_pos: np.ndarray
    symbol: np.ndarray
    prob: np.ndarray
    child_ids: np.ndarray


def enumerate_scenarios(tree: NoiseTree, depth: int) -> list[tuple[int, float]]:
    """All nodes at ``depth`` with their chain-rule probabilities."""
    if depth < 0 or depth > tree.depth:
        raise ValueError(f"depth {depth} outside tree of depth {tree.depth}")
    return [(int(i), float(tree.node_prob[i])) for i in tree.levels[depth]]


# --------------------------------------------------------------------------
# Rewards
# --------------------------------------------------------------------------


class Reward(Protocol):
    """``reward(mu, symbol)`` returns the ``(|X|, |A|)`` table ``r(., ., mu, xi)``."""

    monotone: bool

    def __call__(self, mu: np.ndarray, symbol: int) -> np.ndarray: ...


CROWD_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class CrowdReward:
    """``r(x, a, mu, xi) = base[xi, x, a] + crowd(x, mu)``.

    ``crowd`` is ``-weight * log(mu(x))`` (``kind="log"``, monotone for
    ``weight >= 0``), ``weight * mu(x)`` (``kind="linear"``) or absent.
    """

    base: np.ndarray
    weight: float = 1.0
    kind: str = "log"

    def __post_init__(self) -> None:
        if self.kind not in ("log", "linear", "none"):
            raise ValueError(f"unknown crowd term {self.kind!r}")
        arr = np.array(self.base, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "base", arr)

    @property
    def monotone(self) -> bool:
        # the decomposition exists for every kind; whether the inequality
        # holds is what monotonicity_check measures
        return True

    def tilde(self, symbol: int) -> np.ndarray:
        return self.base[symbol]

    def bar(self, mu: np.ndarray, symbol: int) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64)
        if self.kind == "log":
            return -self.weight * np.log(np.maximum(mu, CROWD_FLOOR))
        if self.kind == "linear":
            return self.weight * mu
        return np.zeros_like(mu)

    def __call__(self, mu: np.ndarray, symbol: int) -> np.ndarray:
        return self.base[symbol] + self.bar(mu, symbol)[:, None]

    def to_dict(self) -> dict:
        return {"builtin": "tabular", "table": self.base.tolist(), "crowd": self.kind, "crowd_weight": self.weight}


# --------------------------------------------------------------------------
# The game
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteMFG:
    """A finite-state mean field game.

    ``transitions[s]`` is a CSR matrix of shape ``(|X| * |A|, |X|)`` whose row
    ``x * |A| + a`` holds ``p(. | x, a, symbols[s])``.
    """

    n_states: int
    n_actions: int
    transitions: tuple[sp.csr_matrix, ...]
    reward: Reward
    mu0: np.ndarray
    tree: NoiseTree
    horizon: int | None = None
    discount: float | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    state_labels: tuple | None = None
    action_labels: tuple | None = None

    def __post_init__(self) -> None:
        mu0 = np.array(self.mu0, dtype=np.float64)
        mu0.setflags(write=False)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "transitions", tuple(sp.csr_matrix(t) for t in self.transitions))

    @property
    def discounted(self) -> bool:
        return self.discount is not None

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.tree.symbols

    @property
    def n_levels(self) -> int:
        """Number of decision steps: N + 1, or 1 (stationary) when discounted."""
        return 1 if self.discounted else self.horizon + 1

    def kernel(self, symbol: int = 0) -> sp.csr_matrix:
        return self.transitions[symbol]

    def reward_table(self, mu: np.ndarray, symbol: int) -> np.ndarray:
        return np.asarray(self.reward(mu, symbol), dtype=np.float64)

    def uniform_policy(self) -> "PolicyFlow":
        return PolicyFlow.uniform(self)


# --------------------------------------------------------------------------
# Flows
# --------------------------------------------------------------------------


def _freeze(levels: Iterable[np.ndarray]) -> tuple[np.ndarray, ...]:
    out = []
    for arr in levels:
        arr = np.asarray(arr, dtype=np.float64)
        out.append(arr)
    return tuple(out)


@dataclass(eq=False)
class PolicyFlow:
    """``levels[n][i, x, a] = pi_n(a | x, node i of depth n)``."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        self.levels = _freeze(self.levels)

    @classmethod
    def uniform(cls, model: FiniteMFG) -> "PolicyFlow":
        sizes = model.tree.level_sizes()
        return cls(
            tuple(
                np.full((sizes[n], model.n_states, model.n_actions), 1.0 / model.n_actions)
                for n in range(model.n_levels)
            )
        )

    @classmethod
    def deterministic(cls, actions: Sequence[np.ndarray], n_actions: int) -> "PolicyFlow":
        levels = []
        for act in actions:
            act = np.asarray(act, dtype=np.int64)
            pi = np.zeros(act.shape + (n_actions,))
            np.put_along_axis(pi, act[..., None], 1.0, axis=-1)
            levels.append(pi)
        return cls(tuple(levels))

    @property
    def shape(self) -> list[tuple[int, ...]]:
        return [lvl.shape for lvl in self.levels]

    def check(self, tol: float = PROB_TOL) -> None:
        for n, lvl in enumerate(self.levels):
            if not np.all(np.isfinite(lvl)):
                raise ValueError(f"policy level {n} contains non-finite entries")
            if np.any(lvl < 0):
                raise ValueError(f"policy level {n} has negative entries")
            err = np.abs(lvl.sum(axis=-1) - 1.0)
            if np.any(err > tol):
                i, x = np.unravel_index(int(np.argmax(err)), err.shape)
                raise ValueError(f"policy row (n={n}, node={i}, x={x}) sums to {1 - err[i, x]:.15g}")

    def greedy_actions(self) -> list[np.ndarray]:
        return [np.argmax(lvl, axis=-1) for lvl in self.levels]


@dataclass(eq=False)
class DistributionFlow:
    """``levels[n][i, x] = mu_n(x | node i of depth n)``.

    In discounted mode there is a single level holding the gamma-occupancy
    measure.  ``estimated`` marks, per level, which node slices carry data
    (only meaningful for sampled flows).
    """

    levels: tuple[np.ndarray, ...]
    discount: float | None = None
    estimated: tuple[np.ndarray, ...] | None = None

    def __post_init__(self) -> None:
        self.levels = _freeze(self.levels)

    @property
    def discounted(self) -> bool:
        return self.discount is not None

    def mean_field(self, n: int, i: int) -> np.ndarray:
        """Distribution handed to the reward at level ``n``, node slot ``i``.

        Occupancy measures are rescaled by ``1 - gamma`` to a probability vector.
        """
        mu = self.levels[n][i]
        if self.discounted:
            return mu * (1.0 - self.discount)
        return mu

    def total_mass(self) -> list[np.ndarray]:
        return [lvl.sum(axis=-1) for lvl in self.levels]

    def check(self) -> None:
        target = 1.0 / (1.0 - self.discount) if self.discounted else 1.0
        tol = OCCUPANCY_TOL if self.discounted else LEVEL_TOL
        for n, mass in enumerate(self.total_mass()):
            bad = np.abs(mass - target) > tol
            if self.estimated is not None:
                bad &= self.estimated[n]
            if np.any(bad):
                raise ValueError(f"distribution level {n} is not normalized (mass {mass[bad][0]!r})")


@dataclass(eq=False)
class QTable:
    """``levels[n][i, x, a] = Q_n(x, a | node i of depth n)``."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        self.levels = _freeze(self.levels)

    def values(self, policy: PolicyFlow | None = None) -> list[np.ndarray]:
        """V = max_a Q, or the policy-weighted average when a policy is given."""
        if policy is None:
            return [lvl.max(axis=-1) for lvl in self.levels]
        return [np.einsum("ixa,ixa->ix", q, pi) for q, pi in zip(self.levels, policy.levels)]


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    location: dict
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def add(self, code: str, message: str, **location) -> None:
        self.violations.append(Violation(code, location, message))

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [{"code": v.code, "location": v.location, "message": v.message} for v in self.violations],
            "warnings": list(self.warnings),
        }


def validate_mfg(model: FiniteMFG) -> ValidationReport:
    """Check every structural invariant of the game and its tree."""
    report = ValidationReport()
    X, A = model.n_states, model.n_actions
    if X < 1:
        report.add("states", "at least one state required")
    if A < 1:
        report.add("actions", "at least one action required")

    if (model.horizon is None) == (model.discount is None):
        report.add("mode", "exactly one of horizon and discount must be set")
    if model.horizon is not None and model.horizon < 0:
        report.add("mode", f"horizon must be >= 0, got {model.horizon}")
    if model.discount is not None and not 0.0 < model.discount < 1.0:
        report.add("mode", f"discount must lie in (0, 1), got {model.discount}")

    tree = model.tree
    if len(model.transitions) != len(tree.symbols):
        report.add(
            "transition",
            f"{len(model.transitions)} kernels for {len(tree.symbols)} noise symbols",
        )
    for s, kernel in enumerate(model.transitions):
        label = tree.symbols[s] if s < len(tree.symbols) else str(s)
        if kernel.shape != (X * A, X):
            report.add("transition", f"kernel shape {kernel.shape} != {(X * A, X)}", xi=label)
            continue
        if kernel.nnz and kernel.data.min() < 0:
            rows = np.unique(np.repeat(np.arange(X * A), np.diff(kernel.indptr))[kernel.data < 0])
            for row in rows:
                x, a = divmod(int(row), A)
                report.add("transition", "negative transition probability", x=x, a=a, xi=label)
        sums = np.asarray(kernel.sum(axis=1)).ravel()
        for row in np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL):
            x, a = divmod(int(row), A)
            report.add("transition", f"row sums to {sums[row]:.15g}", x=x, a=a, xi=label)

    mu0 = model.mu0
    if mu0.shape != (X,):
        report.add("mu0", f"mu0 shape {mu0.shape} != ({X},)")
    else:
        for x in np.flatnonzero(mu0 < 0):
            report.add("mu0", f"negative mass {mu0[x]:.6g}", x=int(x))
        if abs(mu0.sum() - 1.0) > PROB_TOL:
            report.add("mu0", f"mu0 sums to {mu0.sum():.15g}")

    _validate_tree(tree, report)
    if model.horizon is not None and model.horizon >= 0 and tree.depth != model.horizon + 1:
        report.add("noise_tree", f"tree depth {tree.depth} != horizon + 1 = {model.horizon + 1}")
    if model.discount is not None and tree.n_nodes != 2:
        report.add("noise_tree", "discounted games take no common noise (single-edge tree)")

    for w in model.params.get("_warnings", []):
        report.warnings.append(w)
    return report


def _validate_tree(tree: NoiseTree, report: ValidationReport) -> None:
    if tree.n_nodes == 0 or tree.parent[0] != -1:
        report.add("noise_tree", "tree has no root")
        return
    if np.any(tree.prob[1:] < 0):
        for i in np.flatnonzero(tree.prob < 0):
            report.add("noise_tree", "negative edge probability", node=int(i))
    out_mass = np.zeros(tree.n_nodes)
    np.add.at(out_mass, tree.parent[1:], tree.prob[1:])
    has_kids = np.zeros(tree.n_nodes, dtype=bool)
    has_kids[tree.parent[1:]] = True
    for i in np.flatnonzero(has_kids & (np.abs(out_mass - 1.0) > PROB_TOL)):
        report.add("noise_tree", f"outgoing probabilities sum to {out_mass[i]:.15g}", node=int(i))
    depth = tree.depth_of
    leaves = ~has_kids
    if np.any(depth[leaves] != tree.depth):
        for i in np.flatnonzero(leaves & (depth != tree.depth)):
            report.add("noise_tree", "leaf above full tree depth", node=int(i))
    for d, ids in enumerate(tree.levels):
        total = tree.node_prob[ids].sum()
        if abs(total - 1.0) > LEVEL_TOL:
            report.add("noise_tree", f"level probabilities sum to {total:.15g}", depth=d)
