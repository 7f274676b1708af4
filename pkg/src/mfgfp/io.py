"""Reading model files and writing CSV / JSON outputs."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .model import CrowdReward, DistributionFlow, FiniteMFG, NoiseTree, QTable


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a temporary sibling and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def fmt(v: float) -> str:
    # repr round-trips a float64 exactly
    return repr(float(v))


def flow_rows(model: FiniteMFG, flow: DistributionFlow):
    for n, lvl in enumerate(flow.levels):
        ids = model.tree.levels[n]
        for k, node in enumerate(ids):
            for x in range(lvl.shape[1]):
                yield n, int(node), x, fmt(lvl[k, x])


def write_flow_csv(path, model: FiniteMFG, flow: DistributionFlow) -> None:
    atomic_write(path, _csv_text(["n", "node_id", "state", "mass"], flow_rows(model, flow)))


def read_flow_csv(path, model: FiniteMFG) -> DistributionFlow:
    sizes = model.tree.level_sizes()
    levels = [np.full((sizes[n], model.n_states), np.nan) for n in range(model.n_levels)]
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            n = int(row["n"])
            k = int(model.tree.position[int(row["node_id"])])
            levels[n][k, int(row["state"])] = float(row["mass"])
    return DistributionFlow(tuple(levels), discount=model.discount)


def write_qtable_csv(path, model: FiniteMFG, q: QTable) -> None:
    def rows():
        for n, lvl in enumerate(q.levels):
            for k, node in enumerate(model.tree.levels[n]):
                for x in range(lvl.shape[1]):
                    for a in range(lvl.shape[2]):
                        yield n, int(node), x, a, fmt(lvl[k, x, a])

    atomic_write(path, _csv_text(["n", "node_id", "state", "action", "q"], rows()))


def write_csv(path, header: list[str], rows) -> None:
    atomic_write(path, _csv_text(header, rows))


def write_json(path, data) -> None:
    atomic_write(path, json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# --------------------------------------------------------------------------
# Model description files
# --------------------------------------------------------------------------


def _size(value, what: str) -> int:
    # either a count or an explicit list of labels
    if isinstance(value, int):
        n = value
    elif isinstance(value, list):
        n = len(value)
    else:
        raise ValueError(f"{what} must be a count or a list of labels")
    if n < 1:
        raise ValueError(f"{what} must be non-empty")
    return n


def model_from_dict(data: dict) -> FiniteMFG:
    """Build a model from the JSON description.

    ``transition`` is a dense array indexed ``[x][a][x']`` (or
    ``[symbol][x][a][x']`` with common noise), or ``{"builtin": <env>,
    "params": {...}}`` to take the kernel of a registered environment.
    ``reward`` is ``{"builtin": "tabular", "table": ..., "crowd": "log",
    "crowd_weight": 1.0}`` with ``table`` indexed like the transition
    without the last axis.
    """
    from .environments import build_env

    missing = [k for k in ("states", "actions", "mu0", "transition", "reward") if k not in data]
    if missing:
        raise ValueError(f"model file is missing {', '.join(missing)}")
    if ("horizon" in data) == ("discount" in data):
        raise ValueError("model file must set exactly one of horizon and discount")
    X, A = _size(data["states"], "states"), _size(data["actions"], "actions")
    horizon, discount = data.get("horizon"), data.get("discount")

    if "noise_tree" in data:
        tree = NoiseTree.from_dict(data["noise_tree"])
    else:
        tree = NoiseTree.degenerate(1 if discount is not None else horizon + 1)
    S = len(tree.symbols)

    spec = data["transition"]
    if isinstance(spec, dict):
        if "builtin" not in spec:
            raise ValueError("transition object needs a 'builtin' name")
        ref = build_env(spec["builtin"], spec.get("params"))
        if (ref.n_states, ref.n_actions) != (X, A):
            raise ValueError(f"builtin transition is {ref.n_states}x{ref.n_actions}, model declares {X}x{A}")
        kernels = ref.transitions[:S] if len(ref.transitions) >= S else (ref.transitions[0],) * S
    else:
        arr = np.asarray(spec, dtype=np.float64)
        if arr.ndim == 3:
            arr = np.broadcast_to(arr, (S,) + arr.shape)
        if arr.shape != (S, X, A, X):
            raise ValueError(f"transition has shape {arr.shape}, expected {(S, X, A, X)}")
        kernels = tuple(sp.csr_matrix(arr[s].reshape(X * A, X)) for s in range(S))

    rspec = data["reward"]
    if not isinstance(rspec, dict) or rspec.get("builtin") != "tabular":
        raise ValueError("reward must be {'builtin': 'tabular', ...}")
    table = np.asarray(rspec["table"], dtype=np.float64)
    if table.ndim == 2:
        table = np.broadcast_to(table, (S,) + table.shape)
    if table.shape != (S, X, A):
        raise ValueError(f"reward table has shape {table.shape}, expected {(S, X, A)}")
    reward = CrowdReward(table, weight=float(rspec.get("crowd_weight", 1.0)), kind=rspec.get("crowd", "none"))

    return FiniteMFG(
        n_states=X,
        n_actions=A,
        transitions=kernels,
        reward=reward,
        mu0=np.asarray(data["mu0"], dtype=np.float64),
        tree=tree,
        horizon=horizon,
        discount=discount,
        name=data.get("name", "custom"),
        state_labels=tuple(data["states"]) if isinstance(data["states"], list) else None,
        action_labels=tuple(data["actions"]) if isinstance(data["actions"], list) else None,
    )


def load_model(path) -> FiniteMFG:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def model_to_dict(model: FiniteMFG) -> dict:
    """Inverse of :func:`model_from_dict` for tabular-reward models."""
    if not hasattr(model.reward, "to_dict"):
        raise ValueError("only tabular rewards can be serialized")
    X, A = model.n_states, model.n_actions
    out = {
        "name": model.name,
        "states": list(model.state_labels) if model.state_labels else X,
        "actions": list(model.action_labels) if model.action_labels else A,
        "mu0": model.mu0.tolist(),
        "transition": [k.toarray().reshape(X, A, X).tolist() for k in model.transitions],
        "reward": model.reward.to_dict(),
        "noise_tree": model.tree.to_dict(),
    }
    if model.discounted:
        out["discount"] = model.discount
    else:
        out["horizon"] = model.horizon
    return out
