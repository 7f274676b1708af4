import csv
import json
from pathlib import Path

import numpy as np
import pytest

import mfgfp
from mfgfp.best_response import backward_induction
from mfgfp.cli import ConfigError, RunConfig, load_config, main
from mfgfp.distribution import propagate_exact
from mfgfp.environments import build_env
from mfgfp.io import (
    load_model,
    model_from_dict,
    model_to_dict,
    read_flow_csv,
    write_flow_csv,
    write_qtable_csv,
)
from mfgfp.metrics import exploitability
from mfgfp.model import PolicyFlow, validate_mfg

from conftest import random_policy, two_state_oracle

REPO = Path(__file__).resolve().parents[1]


def _write(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- model files -----------------------------------------------------------


def test_model_round_trip_keeps_exploitability(tmp_path, rng):
    m = build_env("beach_bar_cn1", {"n_states": 8, "horizon": 4})
    path = _write(tmp_path / "m.json", model_to_dict(m))
    back = load_model(path)
    assert validate_mfg(back).ok
    pi = random_policy(rng, m)
    assert abs(exploitability(m, pi).phi - exploitability(back, pi).phi) < 1e-12


def test_model_file_with_builtin_transition():
    data = {
        "states": 10,
        "actions": ["left", "still", "right"],
        "horizon": 3,
        "mu0": [0.1] * 10,
        "transition": {"builtin": "beach_bar", "params": {"n_states": 10, "horizon": 3}},
        "reward": {"builtin": "tabular", "table": np.zeros((10, 3)).tolist(), "crowd": "log"},
    }
    m = model_from_dict(data)
    assert validate_mfg(m).ok and m.tree.n_nodes == 5


def test_model_file_errors():
    good = model_to_dict(two_state_oracle())
    for broken in (
        {k: v for k, v in good.items() if k != "mu0"},
        {**good, "discount": 0.9},
        {**good, "transition": [[[1.0]]]},
        {**good, "reward": {"builtin": "lq"}},
    ):
        with pytest.raises(ValueError):
            model_from_dict(broken)


def test_flow_csv_round_trip(tmp_path):
    m = build_env("beach_bar_cn2", {"n_states": 6, "horizon": 4})
    flow = propagate_exact(m, PolicyFlow.uniform(m))
    write_flow_csv(tmp_path / "f.csv", m, flow)
    rows = _rows(tmp_path / "f.csv")
    assert list(rows[0]) == ["n", "node_id", "state", "mass"]
    back = read_flow_csv(tmp_path / "f.csv", m)
    for a, b in zip(flow.levels, back.levels):
        np.testing.assert_array_equal(a, b)


def test_qtable_csv(tmp_path):
    m = two_state_oracle()
    q, _ = backward_induction(m, propagate_exact(m, PolicyFlow.uniform(m)))
    write_qtable_csv(tmp_path / "q.csv", m, q)
    rows = _rows(tmp_path / "q.csv")
    assert list(rows[0]) == ["n", "node_id", "state", "action", "q"]
    assert len(rows) == 3 * 2 * 2
    assert float(rows[-1]["q"]) == q.levels[2][0, 1, 1]
    assert not list(tmp_path.glob(".*tmp"))  # temp files were renamed away


# -- run config ------------------------------------------------------------


def test_run_config_round_trip():
    cfg = RunConfig(env="beach_bar", env_params={"n_states": 20}, backend="model_free", iterations=7, seed=5,
                    qlearning={"alpha": 0.2, "episodes": 100}, snapshots=[1, 3])
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert json.dumps(again.to_dict()) == json.dumps(cfg.to_dict())


def test_iterations_zero_has_line_number(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n  "env": "lq",\n  "iterations": 0\n}\n')
    with pytest.raises(ConfigError, match=r"c\.json:3: iterations must be ≥ 1"):
        load_config(path)


@pytest.mark.parametrize(
    "data",
    [
        {"env": "nowhere"},
        {"env": "lq", "colour": "red"},
        {"env": "lq", "backend": "deep"},
        {"env": "lq", "eval_every": 0},
        {"env": "lq", "qlearning": {"alpha": 0.0}},
        {},
    ],
)
def test_bad_configs(tmp_path, data):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "c.json", data))


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n  "env": "lq",\n  "iterations": ,\n}\n')
    with pytest.raises(ConfigError, match=r":3:"):
        load_config(path)


# -- CLI -------------------------------------------------------------------


def _small(tmp_path, name="cfg", **extra):
    data = {"env": "beach_bar", "env_params": {"n_states": 12, "horizon": 4}, "iterations": 12, "seed": 1}
    data.update(extra)
    return _write(tmp_path / f"{name}.json", data)


def test_run_happy_path_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = json.loads((REPO / "configs" / "lq_default.json").read_text())
    cfg.update(env_params={"n_states": 20, "horizon": 3, "action_bound": 6}, iterations=5, eval_every=1)
    _write(tmp_path / "lq_default.json", cfg)
    assert main(["run", "--config", "lq_default.json", "--quiet"]) == 0
    out = tmp_path / "out" / "lq_default"
    rows = _rows(out / "exploitability.csv")
    assert list(rows[0]) == ["iteration", "exploitability", "wallclock_s"]
    assert [int(r["iteration"]) for r in rows] == [1, 2, 3, 4, 5]
    assert (out / "distribution_final.csv").exists()
    assert sorted(p.name for p in (out / "distribution_snapshots").iterdir()) == [
        "iter_000001.csv",
        "iter_000002.csv",
        "iter_000005.csv",
    ]
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["version"] == mfgfp.__version__ and meta["seed"] == 0 and meta["status"] == "ok"
    assert RunConfig.from_dict(meta["config"]) == load_config(tmp_path / "lq_default.json")


def test_iterations_zero_exits_2(tmp_path, capsys):
    path = _write(tmp_path / "c.json", {"env": "lq", "iterations": 0})
    assert main(["run", "--config", str(path)]) == 2
    assert "iterations must be ≥ 1" in capsys.readouterr().err


def test_tree_too_large_is_a_config_error(tmp_path, capsys):
    path = _write(tmp_path / "c.json", {"env": "lq_cn", "env_params": {"horizon": 20}})
    assert main(["run", "--config", str(path)]) == 2
    assert "100000" in capsys.readouterr().err


def test_model_free_discounted_is_a_config_error(tmp_path):
    path = _write(tmp_path / "c.json", {"env": "beach_bar_gamma", "backend": "model_free"})
    assert main(["run", "--config", str(path)]) == 2


def test_mode_mismatch_is_a_config_error(tmp_path):
    path = _write(tmp_path / "c.json", {"env": "beach_bar_gamma", "mode": "finite"})
    assert main(["run", "--config", str(path)]) == 2


def test_model_file_config(tmp_path):
    _write(tmp_path / "model.json", model_to_dict(two_state_oracle()))
    path = _write(tmp_path / "c.json", {"model_file": "model.json", "iterations": 4})
    assert main(["run", "--config", str(path), "--output-dir", str(tmp_path / "o"), "--quiet"]) == 0
    assert len(_rows(tmp_path / "o" / "exploitability.csv")) == 4


def test_same_seed_same_outputs(tmp_path):
    cfg = _small(tmp_path, backend="model_free", qlearning={"episodes": 300}, density_episodes=300)
    for d in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / d), "--quiet"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for rel in ["distribution_final.csv"] + [f"distribution_snapshots/{p.name}"
                                             for p in (a / "distribution_snapshots").iterdir()]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    strip = lambda p: [(r["iteration"], r["exploitability"]) for r in _rows(p / "exploitability.csv")]
    assert strip(a) == strip(b)


def test_runtime_failure_keeps_partial_outputs(tmp_path, monkeypatch):
    import mfgfp.fictitious_play as fp

    real = fp.exploitability
    calls = {"n": 0}

    def flaky(model, policy, mu=None):
        calls["n"] += 1
        if calls["n"] > 3:
            raise FloatingPointError("boom")
        return real(model, policy, mu)

    monkeypatch.setattr(fp, "exploitability", flaky)
    cfg = _small(tmp_path)
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--output-dir", str(out), "--quiet"]) == 3
    assert len(_rows(out / "exploitability.csv")) == 3
    assert (out / "distribution_snapshots" / "iter_000002.csv").exists()
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["status"] == "failed" and "boom" in meta["error"]


def test_threads_flag_and_env(tmp_path, monkeypatch):
    cfg = _small(tmp_path, iterations=2)
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "a"), "--threads", "1", "--quiet"]) == 0
    assert json.loads((tmp_path / "a" / "run_meta.json").read_text())["threads"] == 1
    monkeypatch.setenv("MFG_FP_THREADS", "1")
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "b"), "--quiet"]) == 0
    assert json.loads((tmp_path / "b" / "run_meta.json").read_text())["threads"] == 1


def test_list_envs_text(capsys):
    assert main(["list-envs"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if not ln.startswith(" ")]
    assert len(lines) == 7


def test_list_envs_json(capsys):
    assert main(["list-envs", "--format", "json"]) == 0
    entries = json.loads(capsys.readouterr().out)
    assert len(entries) == 7 and {"name", "description", "defaults", "mode"} <= set(entries[0])


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["list-envs", "--bogus"])
    assert exc.value.code == 2


def test_bench_lq(tmp_path):
    out = tmp_path / "bench"
    params = json.dumps({"n_states": 30, "horizon": 6, "action_bound": 12})
    code = main(["bench-lq", "--iterations", "30", "--eval-every", "5", "--env-params", params,
                 "--output-dir", str(out)])
    assert code == 0
    rows = _rows(out / "bench_lq.csv")
    assert list(rows[0]) == ["iteration", "phi_fp", "phi_exact_projected"]
    assert len({r["phi_exact_projected"] for r in rows}) == 1
    phi = [float(r["phi_fp"]) for r in rows]
    assert phi[-1] < phi[0]
    ric = _rows(out / "riccati_check.csv")
    assert len(ric) == 10 and max(float(r["abs_error"]) for r in ric) < 1e-6
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["version"] == mfgfp.__version__ and meta["seed"] == 0


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "mfgfp", "list-envs", "--format", "json"], capture_output=True,
                         text=True, check=True)
    assert len(json.loads(res.stdout)) == 7


def test_shipped_configs_parse():
    configs = sorted((REPO / "configs").glob("*.json"))
    assert configs
    for path in configs:
        cfg = load_config(path)
        cfg.build_model()
