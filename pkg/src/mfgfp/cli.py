"""Command-line runner: ``mfg-fp run | list-envs | bench-lq``."""

from __future__ import annotations

import argparse
import json
import os
import platform
import re
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .best_response import QLearningConfig
from .environments import ENVIRONMENTS, build_env, env_params, lq_exact_policy, lq_riccati_eta, lq_riccati_ode
from .fictitious_play import FPConfig, check_tree_size, geometric_cadence, run_fp
from .io import fmt, load_model, write_csv, write_flow_csv, write_json, write_qtable_csv
from .metrics import exploitability
from .model import PolicyFlow, validate_mfg

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    env: str | None = None
    env_params: dict = field(default_factory=dict)
    model_file: str | None = None
    mode: str | None = None  # checked against the model when given
    backend: str = "model_based"
    iterations: int = 100
    eval_every: int = 1
    seed: int = 0
    output_dir: str | None = None
    qlearning: dict = field(default_factory=dict)  # episodes, alpha, epsilon
    warm_start: bool = True
    density_episodes: int | None = None
    snapshots: list | None = None
    save_qtable: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", key)
        cfg = cls(**data)
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        if (self.env is None) == (self.model_file is None):
            raise ConfigError("set exactly one of env and model_file", "env")
        if self.env is not None and self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown env {self.env!r}; choose from {', '.join(ENVIRONMENTS)}", "env")
        if not isinstance(self.env_params, dict):
            raise ConfigError("env_params must be an object", "env_params")
        if self.mode not in (None, "finite", "discounted"):
            raise ConfigError("mode must be 'finite' or 'discounted'", "mode")
        if self.backend not in ("model_based", "model_free"):
            raise ConfigError("backend must be 'model_based' or 'model_free'", "backend")
        for key in ("iterations", "eval_every"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{key} must be ≥ 1", key)
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer", "seed")
        unknown = set(self.qlearning) - {"episodes", "alpha", "epsilon"}
        if unknown:
            raise ConfigError(f"unknown qlearning key(s): {', '.join(sorted(unknown))}", "qlearning")
        try:
            self.qlearning_config()
        except ValueError as exc:
            raise ConfigError(str(exc), "qlearning") from None
        if self.density_episodes is not None and self.density_episodes < 1:
            raise ConfigError("density_episodes must be ≥ 1", "density_episodes")
        if self.snapshots is not None and any(not isinstance(s, int) or s < 1 for s in self.snapshots):
            raise ConfigError("snapshots must list iterations ≥ 1", "snapshots")

    def qlearning_config(self) -> QLearningConfig:
        return QLearningConfig(seed=self.seed, **self.qlearning)

    def fp_config(self) -> FPConfig:
        return FPConfig(
            iterations=self.iterations,
            backend=self.backend,
            eval_every=self.eval_every,
            seed=self.seed,
            qlearning=self.qlearning_config(),
            warm_start=self.warm_start,
            density_episodes=self.density_episodes,
            snapshots=None if self.snapshots is None else tuple(self.snapshots),
        )

    def build_model(self, base_dir: Path | None = None):
        if self.env is not None:
            model = build_env(self.env, self.env_params)
        else:
            path = Path(self.model_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            model = load_model(path)
        report = validate_mfg(model)
        if not report.ok:
            v = report.violations[0]
            raise ConfigError(f"invalid model: {v.message} at {v.location}", "env" if self.env else "model_file")
        mode = "discounted" if model.discounted else "finite"
        if self.mode is not None and self.mode != mode:
            raise ConfigError(f"mode is {self.mode!r} but the model is {mode}", "mode")
        if model.discounted and self.backend == "model_free":
            raise ConfigError("the model_free backend supports finite-horizon games only", "backend")
        check_tree_size(model)
        return model, report


def _line_of(text: str, key: str | None) -> int | None:
    if key is None:
        return None
    m = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_config(path: str | os.PathLike) -> RunConfig:
    """Parse a run config; errors carry ``file:line:`` prefixes."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    try:
        return RunConfig.from_dict(data)
    except ConfigError as exc:
        line = _line_of(text, exc.key)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {exc}", exc.key) from None
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _set_threads(threads: int | None) -> int | None:
    if threads is None:
        env = os.environ.get("MFG_FP_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return None
    if threads < 1:
        raise ConfigError("--threads must be ≥ 1")
    import numba

    threads = min(threads, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(threads)
    return threads


def _meta(extra: dict) -> dict:
    return {
        "library": "mfgfp",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }


def _snapshot_name(j: int) -> str:
    return f"iter_{j:06d}.csv"


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        threads = _set_threads(args.threads)
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
        model, report = cfg.build_model(base)
        fp_cfg = cfg.fp_config()
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.output_dir or cfg.output_dir or Path("out") / Path(args.config).stem)
    out.mkdir(parents=True, exist_ok=True)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)

    snap_at = set(fp_cfg.snapshots if fp_cfg.snapshots is not None else geometric_cadence(fp_cfg.iterations))
    rows: list[tuple] = []
    meta = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "env": model.name,
        "mode": "discounted" if model.discounted else "finite",
        "tree_nodes": model.tree.n_nodes,
        "threads": threads,
        "qlearning_warm_start": cfg.warm_start if cfg.backend == "model_free" else None,
        "warnings": list(report.warnings),
    }

    def on_iteration(state, phi, seconds):
        if phi is not None:
            rows.append((state.j, fmt(phi), f"{seconds:.6f}"))
        if state.j in snap_at:
            write_flow_csv(out / "distribution_snapshots" / _snapshot_name(state.j), model, state.mu_bar)
        if not args.quiet and phi is not None:
            print(f"iter {state.j:6d}  exploitability {phi:.6e}", file=sys.stderr)

    try:
        result = run_fp(model, fp_cfg, callback=on_iteration)
    except Exception as exc:  # keep what we have, then report
        write_csv(out / "exploitability.csv", ["iteration", "exploitability", "wallclock_s"], rows)
        write_json(out / "run_meta.json", _meta({**meta, "status": "failed", "error": repr(exc)}))
        traceback.print_exc()
        print(f"error: run failed after {len(rows)} logged iterations: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    write_csv(out / "exploitability.csv", ["iteration", "exploitability", "wallclock_s"], rows)
    write_flow_csv(out / "distribution_final.csv", model, result.flow)
    if cfg.save_qtable and result.state.q is not None:
        write_qtable_csv(out / "qtable_last_br.csv", model, result.state.q)
    meta.update(
        status="ok",
        backends={"best_response": result.config["br_backend"], "density": result.config["density_backend"]},
        final_exploitability=result.final_exploitability,
        snapshots=sorted(result.snapshots),
    )
    write_json(out / "run_meta.json", _meta(meta))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_list_envs(args) -> int:
    entries = [
        {"name": s.name, "mode": s.mode, "description": s.description, "defaults": s.default_params()}
        for s in ENVIRONMENTS.values()
    ]
    if args.format == "json":
        print(json.dumps(entries, indent=2))
        return EXIT_OK
    width = max(len(e["name"]) for e in entries)
    for e in entries:
        print(f"{e['name']:<{width}}  [{e['mode']}]  {e['description']}")
        print(f"{'':<{width}}  defaults: {json.dumps(e['defaults'], sort_keys=True)}")
    return EXIT_OK


def cmd_bench_lq(args) -> int:
    try:
        threads = _set_threads(args.threads)
        overrides = json.loads(args.env_params) if args.env_params else {}
        params = env_params("lq", overrides)
        model = build_env("lq", overrides)
        fp_cfg = FPConfig(iterations=args.iterations, eval_every=args.eval_every, seed=args.seed, snapshots=())
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        times = np.linspace(0.0, params.T, 10)
        closed = np.array([lq_riccati_eta(t, params) for t in times])
        ode = lq_riccati_ode(params, times)
        err = np.abs(closed - ode)
        write_csv(
            out / "riccati_check.csv",
            ["t", "eta_closed_form", "eta_rk4", "abs_error"],
            [(fmt(t), fmt(c), fmt(o), fmt(e)) for t, c, o, e in zip(times, closed, ode, err)],
        )
        phi_exact = exploitability(model, lq_exact_policy(params, model)).phi
        phi_uniform = exploitability(model, PolicyFlow.uniform(model)).phi
        result = run_fp(model, fp_cfg)
        write_csv(
            out / "bench_lq.csv",
            ["iteration", "phi_fp", "phi_exact_projected"],
            [(j, fmt(phi), fmt(phi_exact)) for j, phi in result.trace],
        )
    except Exception as exc:
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    write_json(
        out / "run_meta.json",
        _meta(
            {
                "command": "bench-lq",
                "seed": args.seed,
                "threads": threads,
                "env_params": asdict(params),
                "iterations": args.iterations,
                "eval_every": args.eval_every,
                "riccati_max_abs_error": float(err.max()),
                "phi_exact_projected": phi_exact,
                "phi_uniform": phi_uniform,
                "phi_fp_final": result.final_exploitability,
            }
        ),
    )
    print(f"riccati max abs error {err.max():.3e}")
    print(f"exploitability: uniform {phi_uniform:.6e}, projected exact {phi_exact:.6e}, "
          f"FP@{args.iterations} {result.final_exploitability:.6e}")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfg-fp", description="Fictitious play for finite mean field games.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    threads_help = "cap on worker threads (default: $MFG_FP_THREADS, else all cores)"

    run = sub.add_parser("run", help="run fictitious play from a JSON config")
    run.add_argument("--config", required=True, help="path to the run config")
    run.add_argument("--output-dir", help="override the output directory")
    run.add_argument("--threads", type=int, help=threads_help)
    run.add_argument("--quiet", action="store_true", help="no per-iteration progress")
    run.set_defaults(func=cmd_run)

    envs = sub.add_parser("list-envs", help="list the built-in environments")
    envs.add_argument("--format", choices=("text", "json"), default="text")
    envs.set_defaults(func=cmd_list_envs)

    bench = sub.add_parser("bench-lq", help="compare FP with the Riccati benchmark on the LQ game")
    bench.add_argument("--iterations", type=int, default=200)
    bench.add_argument("--eval-every", type=int, default=10)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--env-params", help="JSON object of LQ parameter overrides")
    bench.add_argument("--output-dir", default="out/bench_lq")
    bench.add_argument("--threads", type=int, help=threads_help)
    bench.set_defaults(func=cmd_bench_lq)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
