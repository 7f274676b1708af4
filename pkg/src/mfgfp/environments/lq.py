"""Linear-quadratic mean field game on a truncated grid, with its Riccati benchmark.

The action is the total velocity ``v = K (m - x) + a`` of the player, so the
transition kernel does not depend on the population.  The reward is written
back in terms of the control ``a = v - K (m - x)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from ..distribution import _step
from ..model import MAX_TREE_NODES, FiniteMFG, NoiseTree, PolicyFlow, TreeTooLargeError

N_ATOMS = 7


@dataclass(frozen=True)
class LQParams:
    n_states: int = 100
    spacing: float = 1.0
    action_bound: int = 37  # M: velocities -M..M
    dt: float = 0.1
    horizon: int = 30
    K: float = 1.0
    q: float = 0.01
    kappa: float = 0.5
    c_term: float = 1.0
    sigma: float = 3.0
    rho: float = 0.0
    noise_alphabet: int = 2
    mu0_centers: float = 0.2  # bells at +-(centers * n_states * spacing)
    mu0_std: float = 0.05  # in units of n_states * spacing

    def __post_init__(self) -> None:
        if self.n_states < 3:
            raise ValueError("the LQ grid needs at least 3 states")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.kappa - self.q**2 <= 0:
            raise ValueError("kappa - q^2 must be > 0")
        if self.horizon < 0 or self.action_bound < 0:
            raise ValueError("horizon and action bound must be >= 0")

    @property
    def grid(self) -> np.ndarray:
        return (np.arange(self.n_states) - (self.n_states - 1) / 2.0) * self.spacing

    @property
    def velocities(self) -> np.ndarray:
        return np.arange(-self.action_bound, self.action_bound + 1, dtype=np.float64)

    @property
    def T(self) -> float:
        return self.horizon * self.dt


def gaussian_atoms(n: int = N_ATOMS) -> tuple[np.ndarray, np.ndarray]:
    """``n`` equally spaced atoms on [-3, 3] weighted by the standard normal density."""
    z = np.linspace(-3.0, 3.0, n)
    w = np.exp(-0.5 * z**2)
    return z, w / w.sum()


def common_noise_atoms(k: int) -> tuple[np.ndarray, np.ndarray]:
    if k == 2:
        return np.array([-1.0, 1.0]), np.array([0.5, 0.5])
    return gaussian_atoms(k)


def lq_kernel(p: LQParams, common: float = 0.0) -> sp.csr_matrix:
    grid, v = p.grid, p.velocities
    X, A = len(grid), len(v)
    eps, w = gaussian_atoms()
    shock = p.sigma * (p.rho * common + math.sqrt(1.0 - p.rho**2) * eps) * math.sqrt(p.dt)
    target = grid[:, None, None] + v[None, :, None] * p.dt + shock[None, None, :]
    idx = np.clip(np.rint((target - grid[0]) / p.spacing), 0, X - 1).astype(np.int64)
    rows = np.repeat(np.arange(X * A), len(eps))
    vals = np.tile(w, X * A)
    return sp.coo_matrix((vals, (rows, idx.ravel())), shape=(X * A, X)).tocsr()


@dataclass(frozen=True, eq=False)
class LQReward:
    """Running reward ``[-a^2/2 + q a (m - x) - kappa/2 (m - x)^2] dt``; terminal ``-c/2 (m - x)^2``."""

    grid: np.ndarray
    velocities: np.ndarray
    dt: float
    K: float
    q: float
    kappa: float
    c_term: float
    terminal: frozenset
    monotone: bool = False

    def __call__(self, mu: np.ndarray, symbol: int) -> np.ndarray:
        dev = float(self.grid @ mu) - self.grid
        if symbol in self.terminal:
            return np.repeat((-0.5 * self.c_term * dev**2)[:, None], len(self.velocities), axis=1)
        a = self.velocities[None, :] - self.K * dev[:, None]
        return (-0.5 * a**2 + self.q * a * dev[:, None] - 0.5 * self.kappa * (dev**2)[:, None]) * self.dt


def _mu0(p: LQParams) -> np.ndarray:
    span = p.n_states * p.spacing
    c, s = p.mu0_centers * span, p.mu0_std * span
    g = p.grid
    dens = np.exp(-0.5 * ((g - c) / s) ** 2) + np.exp(-0.5 * ((g + c) / s) ** 2)
    return dens / dens.sum()


def _reward(p: LQParams, terminal: set[int]) -> LQReward:
    return LQReward(p.grid, p.velocities, p.dt, p.K, p.q, p.kappa, p.c_term, frozenset(terminal))


def build_lq(params: LQParams = LQParams()) -> FiniteMFG:
    """Grid LQ game without common noise (``rho`` is ignored)."""
    p = params
    if p.rho != 0.0:
        p = LQParams(**{**asdict(p), "rho": 0.0})
    kernel = lq_kernel(p)
    tree = NoiseTree.chain([0] * p.horizon + [1], ("run", "term"))
    return FiniteMFG(
        n_states=p.n_states,
        n_actions=len(p.velocities),
        transitions=(kernel, kernel),
        reward=_reward(p, {1}),
        mu0=_mu0(p),
        tree=tree,
        horizon=p.horizon,
        name="lq",
        params=asdict(params),
        state_labels=tuple(p.grid.tolist()),
        action_labels=tuple(p.velocities.tolist()),
    )


def lq_cn_tree_size(params: LQParams) -> int:
    k = params.noise_alphabet
    return sum(k**d for d in range(params.horizon + 2))


def build_lq_cn(params: LQParams = LQParams(rho=0.5, horizon=8)) -> FiniteMFG:
    """LQ game with a common noise on the full product scenario tree."""
    p = params
    k = p.noise_alphabet
    if k < 2:
        raise ValueError("the common-noise alphabet needs at least 2 symbols")
    size = lq_cn_tree_size(p)
    if size > MAX_TREE_NODES:
        raise TreeTooLargeError(
            f"common-noise tree would have {size} nodes (bound {MAX_TREE_NODES}); "
            "reduce horizon or noise_alphabet"
        )
    z, w = common_noise_atoms(k)
    symbols = tuple(f"xi={v:+g}" for v in z) + tuple(f"xi={v:+g}|T" for v in z)
    kernels = tuple(lq_kernel(p, float(v)) for v in z)

    def branches(d, path):
        shift = k if d == p.horizon else 0
        return [(j + shift, w[j]) for j in range(k)]

    tree = NoiseTree.build(p.horizon + 1, branches, symbols)
    return FiniteMFG(
        n_states=p.n_states,
        n_actions=len(p.velocities),
        transitions=kernels + kernels,
        reward=_reward(p, set(range(k, 2 * k))),
        mu0=_mu0(p),
        tree=tree,
        horizon=p.horizon,
        name="lq_cn",
        params=asdict(p),
        state_labels=tuple(p.grid.tolist()),
        action_labels=tuple(p.velocities.tolist()),
    )


# --------------------------------------------------------------------------
# Riccati benchmark
# --------------------------------------------------------------------------


def _riccati_consts(p: LQParams) -> tuple[float, float, float]:
    gap = p.kappa - p.q**2
    if gap <= 0:
        raise ValueError("kappa - q^2 must be > 0")
    b = p.K + p.q
    root = math.sqrt(b * b + gap)
    return gap, -b + root, -b - root


def lq_riccati_eta(t: float, params: LQParams) -> float:
    """Closed-form solution of ``eta' = 2(K + q) eta + eta^2 - (kappa - q^2)``, ``eta_T = c_term``."""
    p = params
    gap, d_plus, d_minus = _riccati_consts(p)
    if t > p.T + 1e-12:
        raise ValueError(f"t = {t} beyond terminal time {p.T}")
    e = math.exp((d_plus - d_minus) * (p.T - t))
    c = p.c_term
    num = -gap * (e - 1.0) - c * (d_plus * e - d_minus)
    den = (d_minus * e - d_plus) - c * (e - 1.0)
    return num / den


def lq_riccati_ode(params: LQParams, times, steps_per_unit: int = 10_000) -> np.ndarray:
    """Backward classical RK4 integration of the Riccati ODE, sampled at ``times``."""
    p = params
    gap = p.kappa - p.q**2
    b = p.K + p.q

    def f(eta):
        return 2.0 * b * eta + eta * eta - gap

    times = np.asarray(times, dtype=np.float64)
    out = np.empty_like(times)
    for k, t in enumerate(times):
        span = p.T - t
        n = max(1, int(math.ceil(span * steps_per_unit)))
        h = -span / n
        eta = p.c_term
        for _ in range(n):
            k1 = f(eta)
            k2 = f(eta + 0.5 * h * k1)
            k3 = f(eta + 0.5 * h * k2)
            k4 = f(eta + h * k3)
            eta += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out[k] = eta
    return out


def lq_control_gain(t: float, params: LQParams) -> float:
    """Feedback gain ``q + eta_t`` of the optimal control ``a_t = (q + eta_t)(m_t - x)``."""
    return params.q + lq_riccati_eta(t, params)


def lq_exact_policy(params: LQParams, model: FiniteMFG | None = None) -> PolicyFlow:
    """Continuous-time optimal feedback projected onto the grid game.

    At each step the mean ``m_n`` is read off the flow generated by the
    policy itself, and every state picks the velocity nearest to
    ``(K + q + eta) (m_n - x)``.
    """
    p = params
    if model is None:
        model = build_lq_cn(p) if p.rho > 0 else build_lq(p)
    grid, M = p.grid, p.action_bound
    mu = model.mu0[None, :]
    levels = []
    for n in range(p.horizon + 1):
        gain = p.K + lq_control_gain(min(n * p.dt, p.T), p)
        m = mu @ grid
        target = gain * (m[:, None] - grid[None, :])
        idx = np.clip(np.rint(target), -M, M).astype(np.int64) + M
        pi = np.zeros(idx.shape + (2 * M + 1,))
        np.put_along_axis(pi, idx[..., None], 1.0, axis=-1)
        levels.append(pi)
        if n < p.horizon:
            mu = _step(model, n, mu, pi)
    return PolicyFlow(tuple(levels))
