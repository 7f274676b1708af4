"""Discrete-time fictitious play over pluggable best-response and density backends."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .best_response import QLearningConfig, backward_induction, policy_iteration_discounted, q_learning
from .distribution import _estimate, mix_flows, occupancy_measure, propagate_exact
from .metrics import exploitability
from .model import MAX_TREE_NODES, DistributionFlow, FiniteMFG, PolicyFlow, QTable, TreeTooLargeError
from .rng import stream

# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


class BackwardInduction:
    name = "backward_induction"
    mode = "finite"

    def __call__(self, model, mu, *, seed, iteration, q_init=None):
        return backward_induction(model, mu)


@dataclass(frozen=True)
class QLearning:
    """Q-learning best response; warm-starts from the previous table by default."""

    cfg: QLearningConfig = QLearningConfig()
    warm_start: bool = True
    name = "q_learning"
    mode = "finite"

    def __call__(self, model, mu, *, seed, iteration, q_init=None):
        levels = []
        for lvl in mu.levels:
            # slices no episode has reached yet carry no crowd information
            lvl = np.where(np.isnan(lvl), 1.0 / model.n_states, lvl)
            levels.append(lvl)
        mu = DistributionFlow(tuple(levels))
        rng = stream(seed, "qlearning", iteration)
        return q_learning(model, mu, self.cfg, q_init if self.warm_start else None, rng=rng)


class PolicyIteration:
    name = "policy_iteration"
    mode = "discounted"

    def __call__(self, model, mu, *, seed, iteration, q_init=None):
        return None, policy_iteration_discounted(model, mu)


class ExactDensity:
    name = "exact"
    mode = "finite"

    def __call__(self, model, policy, *, seed, iteration):
        return propagate_exact(model, policy)


@dataclass(frozen=True)
class EmpiricalDensity:
    episodes: int | None = None
    name = "empirical"
    mode = "finite"

    def __call__(self, model, policy, *, seed, iteration):
        k = self.episodes if self.episodes is not None else 10 * model.n_states * max(model.horizon, 1)
        return _estimate(model, policy, k, stream(seed, "density", iteration), seed)


class OccupancyDensity:
    name = "occupancy"
    mode = "discounted"

    def __call__(self, model, policy, *, seed, iteration):
        return occupancy_measure(model, policy)


def _mode(model: FiniteMFG) -> str:
    return "discounted" if model.discounted else "finite"


def default_backends(model: FiniteMFG, backend: str, qcfg: QLearningConfig | None = None, warm_start: bool = True,
                     density_episodes: int | None = None):
    if backend == "model_based":
        if model.discounted:
            return PolicyIteration(), OccupancyDensity()
        return BackwardInduction(), ExactDensity()
    if backend == "model_free":
        if model.discounted:
            raise ValueError("the model-free backend supports finite-horizon games only")
        return QLearning(qcfg or QLearningConfig(), warm_start), EmpiricalDensity(density_episodes)
    raise ValueError(f"unknown backend {backend!r} (model_based or model_free)")


# --------------------------------------------------------------------------
# Policy averaging
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolicyAverage:
    """Running sums ``sum_i mu^i(x) pi^i(a|x)`` and ``sum_i mu^i(x)`` per ``(n, node)``."""

    numer: tuple[np.ndarray, ...]
    denom: tuple[np.ndarray, ...]

    @classmethod
    def empty(cls, model: FiniteMFG) -> "PolicyAverage":
        sizes = model.tree.level_sizes()
        X, A = model.n_states, model.n_actions
        return cls(
            tuple(np.zeros((sizes[n], X, A)) for n in range(model.n_levels)),
            tuple(np.zeros((sizes[n], X)) for n in range(model.n_levels)),
        )

    def update(self, flow: DistributionFlow, policy: PolicyFlow) -> "PolicyAverage":
        numer, denom = [], []
        for num, den, mu, pi in zip(self.numer, self.denom, flow.levels, policy.levels):
            w = np.nan_to_num(mu, nan=0.0)
            numer.append(num + w[:, :, None] * pi)
            denom.append(den + w)
        return PolicyAverage(tuple(numer), tuple(denom))

    def policy(self) -> PolicyFlow:
        levels = []
        for num, den in zip(self.numer, self.denom):
            A = num.shape[-1]
            safe = np.where(den > 0, den, 1.0)
            pi = np.where((den > 0)[..., None], num / safe[..., None], 1.0 / A)
            levels.append(pi)
        return PolicyFlow(tuple(levels))


def average_policy_update(
    average: PolicyAverage, new_flow: DistributionFlow, new_policy: PolicyFlow
) -> tuple[PolicyAverage, PolicyFlow]:
    """Fold one more (flow, policy) pair into the flow-weighted average policy.

    Rows that never received mass get the uniform policy.
    """
    updated = average.update(new_flow, new_policy)
    return updated, updated.policy()


# --------------------------------------------------------------------------
# The loop
# --------------------------------------------------------------------------


@dataclass(eq=False)
class FPState:
    j: int
    mu_bar: DistributionFlow
    pi_bar: PolicyFlow
    average: PolicyAverage
    last_br: PolicyFlow
    seed: int
    br_backend: str
    density_backend: str
    q: QTable | None = None
    last_br_flow: DistributionFlow | None = None
    flows: list[DistributionFlow] | None = None


def init_state(
    model: FiniteMFG,
    br_backend,
    density_backend,
    seed: int = 0,
    initial_policy: PolicyFlow | None = None,
    keep_flows: bool = False,
) -> FPState:
    """Iteration 0: the initial policy (uniform by default) and its flow."""
    _check_modes(model, br_backend, density_backend)
    pi0 = initial_policy if initial_policy is not None else PolicyFlow.uniform(model)
    mu0 = density_backend(model, pi0, seed=seed, iteration=0)
    return FPState(
        j=0,
        mu_bar=mu0,
        pi_bar=pi0,
        average=PolicyAverage.empty(model),
        last_br=pi0,
        seed=seed,
        br_backend=br_backend.name,
        density_backend=density_backend.name,
        flows=[] if keep_flows else None,
    )


def _check_modes(model, br_backend, density_backend) -> None:
    mode = _mode(model)
    for backend in (br_backend, density_backend):
        if getattr(backend, "mode", mode) != mode:
            raise ValueError(f"backend {backend.name!r} works on {backend.mode} games, model is {mode}")


def fp_step(state: FPState, model: FiniteMFG, br_backend, density_backend) -> FPState:
    """One iteration: best response to the average flow, then update both averages."""
    _check_modes(model, br_backend, density_backend)
    j = state.j + 1
    q, br = br_backend(model, state.mu_bar, seed=state.seed, iteration=j, q_init=state.q)
    mu_br = density_backend(model, br, seed=state.seed, iteration=j)
    mu_bar = mix_flows(state.mu_bar, mu_br, j)
    average, pi_bar = average_policy_update(state.average, mu_br, br)
    flows = None if state.flows is None else state.flows + [mu_br]
    return replace(
        state,
        j=j,
        mu_bar=mu_bar,
        pi_bar=pi_bar,
        average=average,
        last_br=br,
        q=q,
        last_br_flow=mu_br,
        flows=flows,
    )


def geometric_cadence(limit: int) -> list[int]:
    """1, 2, 5, 10, 20, 50, ... up to ``limit``."""
    out, scale = [], 1
    while scale <= limit:
        out.extend(k * scale for k in (1, 2, 5) if k * scale <= limit)
        scale *= 10
    return out


@dataclass(frozen=True)
class FPConfig:
    iterations: int
    backend: str = "model_based"
    eval_every: int = 1
    seed: int = 0
    qlearning: QLearningConfig = QLearningConfig()
    warm_start: bool = True
    density_episodes: int | None = None
    snapshots: tuple[int, ...] | None = None  # None -> geometric cadence
    keep_flows: bool = False

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be ≥ 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be ≥ 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snapshots"] = None if self.snapshots is None else list(self.snapshots)
        return d


@dataclass
class FPResult:
    policy: PolicyFlow
    flow: DistributionFlow
    trace: list[tuple[int, float]]
    raw_trace: list[tuple[int, float]]
    snapshots: dict[int, DistributionFlow]
    wallclock: list[float]  # seconds spent in each iteration, evaluation included
    config: dict
    seed: int
    state: FPState
    warm_start: bool | None = None

    @property
    def final_exploitability(self) -> float:
        return self.trace[-1][1]


def check_tree_size(model: FiniteMFG) -> None:
    if model.tree.n_nodes > MAX_TREE_NODES:
        raise TreeTooLargeError(
            f"scenario tree has {model.tree.n_nodes} nodes, above the exact-exploitability bound "
            f"{MAX_TREE_NODES}; use a smaller horizon or noise alphabet"
        )


def run_fp(
    model: FiniteMFG,
    config: FPConfig,
    br_backend=None,
    density_backend=None,
    callback: Callable[[FPState, float | None, float], None] | None = None,
) -> FPResult:
    """Run ``config.iterations`` steps and evaluate exact exploitability along the way."""
    check_tree_size(model)
    if br_backend is None or density_backend is None:
        br_default, dens_default = default_backends(
            model, config.backend, config.qlearning, config.warm_start, config.density_episodes
        )
        br_backend = br_backend or br_default
        density_backend = density_backend or dens_default
    snap_at = set(config.snapshots if config.snapshots is not None else geometric_cadence(config.iterations))
    state = init_state(model, br_backend, density_backend, config.seed, keep_flows=config.keep_flows)
    trace, raw, snaps, clock = [], [], {}, []
    for j in range(1, config.iterations + 1):
        start = time.perf_counter()
        state = fp_step(state, model, br_backend, density_backend)
        phi = None
        if j % config.eval_every == 0 or j == config.iterations:
            report = exploitability(model, state.pi_bar)
            trace.append((j, report.phi))
            raw.append((j, report.phi_raw))
            phi = report.phi
        if j in snap_at:
            snaps[j] = state.mu_bar
        clock.append(time.perf_counter() - start)
        if callback is not None:
            callback(state, phi, clock[-1])
    return FPResult(
        policy=state.pi_bar,
        flow=state.mu_bar,
        trace=trace,
        raw_trace=raw,
        snapshots=snaps,
        wallclock=clock,
        config={
            **config.to_dict(),
            "br_backend": br_backend.name,
            "density_backend": density_backend.name,
        },
        seed=config.seed,
        state=state,
        warm_start=config.warm_start if br_backend.name == "q_learning" else None,
    )
