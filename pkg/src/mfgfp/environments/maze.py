"""Crowd motion towards the centre of a two-dimensional maze."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np
import scipy.sparse as sp

from ..model import CrowdReward, FiniteMFG, NoiseTree

MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))
MOVE_LABELS = ("stay", "up", "down", "left", "right")


@dataclass(frozen=True)
class MazeParams:
    width: int = 100
    height: int = 100
    goal: tuple[int, int] = (50, 50)
    source: tuple[int, int] = (5, 5)
    mask: str | None = None  # text grid of '.' and '#'; None picks the default
    mask_file: str | None = None
    crowd_weight: float = 0.5
    init_exponent: float = 10.0
    horizon: int = 200
    goal_reward: float = 10.0
    distance_norm: float = 100.0
    init_norm: float | None = None  # defaults to sqrt(2 * 95^2) scaled to the grid


def parse_mask(text: str) -> np.ndarray:
    """``True`` marks a wall."""
    rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("mask rows must be non-empty and of equal length")
    bad = set("".join(rows)) - {".", "#"}
    if bad:
        raise ValueError(f"mask may only contain '.' and '#', found {sorted(bad)}")
    return np.array([[c == "#" for c in r] for r in rows])


def default_mask(width: int, height: int) -> np.ndarray:
    if (width, height) == (100, 100):
        text = resources.files("mfgfp.environments").joinpath("data/maze_default.txt").read_text()
        return parse_mask(text)
    return np.zeros((height, width), dtype=bool)


def _load_mask(p: MazeParams) -> np.ndarray:
    if p.mask is not None:
        walls = parse_mask(p.mask)
    elif p.mask_file is not None:
        with open(p.mask_file) as fh:
            walls = parse_mask(fh.read())
    else:
        walls = default_mask(p.width, p.height)
    if walls.shape != (p.height, p.width):
        raise ValueError(f"mask is {walls.shape[1]}x{walls.shape[0]}, expected {p.width}x{p.height}")
    return walls


def _reachable(free: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    seen = np.zeros_like(free)
    seen[start] = True
    todo = deque([start])
    H, W = free.shape
    while todo:
        i, j = todo.popleft()
        for di, dj in MOVES[1:]:
            a, b = i + di, j + dj
            if 0 <= a < H and 0 <= b < W and free[a, b] and not seen[a, b]:
                seen[a, b] = True
                todo.append((a, b))
    return seen


def build_maze2d(params: MazeParams = MazeParams()) -> FiniteMFG:
    p = params
    walls = _load_mask(p)
    free = ~walls
    gi, gj = p.goal
    if not (0 <= gi < p.height and 0 <= gj < p.width) or walls[gi, gj]:
        raise ValueError(f"goal {p.goal} is off the grid or on an obstacle")
    cells = np.argwhere(free)  # row-major order
    X, A = len(cells), len(MOVES)
    index = -np.ones(walls.shape, dtype=np.int64)
    index[free] = np.arange(X)

    rows, cols = [], []
    for x, (i, j) in enumerate(cells):
        for a, (di, dj) in enumerate(MOVES):
            a_i, a_j = i + di, j + dj
            if 0 <= a_i < p.height and 0 <= a_j < p.width and free[a_i, a_j]:
                rows.append(x * A + a)
                cols.append(index[a_i, a_j])
            else:
                rows.append(x * A + a)
                cols.append(x)
    kernel = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(X * A, X))

    l1 = np.abs(cells[:, 0] - gi) + np.abs(cells[:, 1] - gj)
    proximity = p.goal_reward * (1.0 - l1 / p.distance_norm)
    base = np.repeat(proximity[:, None], A, axis=1)[None]

    norm = p.init_norm if p.init_norm is not None else math.sqrt(2.0 * 95.0**2) * max(p.width, p.height) / 100.0
    l2 = np.hypot(cells[:, 0] - p.source[0], cells[:, 1] - p.source[1])
    mu0 = np.maximum(1.0 - l2 / norm, 0.0) ** p.init_exponent
    if mu0.sum() <= 0:
        raise ValueError("initial density vanishes on every free cell")
    mu0 = mu0 / mu0.sum()

    warnings = []
    reach = _reachable(free, (gi, gj))[free]
    stranded = mu0[~reach].sum()
    if stranded > 0:
        warnings.append(f"disconnected free-cell region holds initial mass {stranded:.3g}")

    return FiniteMFG(
        n_states=X,
        n_actions=A,
        transitions=(kernel,),
        reward=CrowdReward(base, weight=p.crowd_weight, kind="log"),
        mu0=mu0,
        tree=NoiseTree.degenerate(p.horizon + 1, "0"),
        horizon=p.horizon,
        name="maze2d",
        params={**asdict(p), "_warnings": warnings},
        state_labels=tuple(map(tuple, cells.tolist())),
        action_labels=MOVE_LABELS,
    )
