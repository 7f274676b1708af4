import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgfp.environments import build_env
from mfgfp.model import (
    CrowdReward,
    FiniteMFG,
    NoiseTree,
    PolicyFlow,
    TreeTooLargeError,
    enumerate_scenarios,
    validate_mfg,
)

from conftest import two_state_oracle


def _with(model, **changes):
    fields = dict(
        n_states=model.n_states,
        n_actions=model.n_actions,
        transitions=model.transitions,
        reward=model.reward,
        mu0=model.mu0,
        tree=model.tree,
        horizon=model.horizon,
        discount=model.discount,
    )
    fields.update(changes)
    return FiniteMFG(**fields)


def test_valid_model_has_empty_report():
    report = validate_mfg(two_state_oracle())
    assert report.ok and report.violations == []


def test_short_row_names_location():
    m = two_state_oracle()
    P = m.transitions[0].toarray()
    P[3] = [0.1, 0.8]  # x=1, a=1 sums to 0.9
    report = validate_mfg(_with(m, transitions=(sp.csr_matrix(P),)))
    assert len(report.violations) == 1
    loc = report.violations[0].location
    assert (loc["x"], loc["a"]) == (1, 1) and "xi" in loc


def test_negative_mu0_names_state():
    m = two_state_oracle()
    report = validate_mfg(_with(m, mu0=np.array([1.2, -0.2])))
    assert len(report.violations) == 1
    assert report.violations[0].location == {"x": 1}


def test_both_or_neither_mode_is_a_violation():
    m = two_state_oracle()
    assert not validate_mfg(_with(m, discount=0.9)).ok
    assert not validate_mfg(_with(m, horizon=None)).ok


def test_validation_is_idempotent():
    m = build_env("beach_bar_cn1")
    a, b = validate_mfg(m), validate_mfg(m)
    assert a.to_dict() == b.to_dict()


def test_degenerate_tree_scenarios():
    tree = NoiseTree.degenerate(6)
    for n in range(6):
        nodes = enumerate_scenarios(tree, n)
        assert len(nodes) == 1 and nodes[0][1] == 1.0


def test_enumerate_past_depth_errors():
    with pytest.raises(ValueError):
        enumerate_scenarios(NoiseTree.degenerate(3), 4)


def test_closure_at_one_step_gives_two_scenarios():
    tree = build_env("beach_bar_cn1").tree
    probs = [p for _, p in enumerate_scenarios(tree, 20)]
    assert probs == [0.5, 0.5]
    assert len(enumerate_scenarios(tree, 15)) == 1


def test_closure_window_leaf_count():
    m = build_env("beach_bar_cn2")
    N = m.horizon
    nodes = enumerate_scenarios(m.tree, N // 2 + 2)
    assert len(nodes) == N // 2 + 1
    assert len(enumerate_scenarios(m.tree, N)) == N // 2 + 1
    assert abs(sum(p for _, p in nodes) - 1.0) < 1e-10


def test_tree_dict_round_trip():
    tree = build_env("beach_bar_cn2").tree
    back = NoiseTree.from_dict(tree.to_dict())
    assert back.symbols == tree.symbols
    np.testing.assert_array_equal(back.parent, tree.parent)
    np.testing.assert_array_equal(back.symbol, tree.symbol)
    np.testing.assert_array_equal(back.prob, tree.prob)


def test_build_numbers_nodes_depth_first():
    tree = NoiseTree.build(3, lambda d, path: [(0, 0.5), (1, 0.5)], ("a", "b"))
    # in pre-order every parent precedes its children and subtrees are contiguous
    assert tree.n_nodes == 15
    assert list(tree.parent[:4]) == [-1, 0, 1, 2]
    assert all(tree.parent[i] < i for i in range(1, tree.n_nodes))


def test_build_respects_node_bound():
    with pytest.raises(TreeTooLargeError):
        NoiseTree.build(20, lambda d, path: [(0, 0.5), (1, 0.5)], ("a", "b"), max_nodes=1000)


@settings(max_examples=40, deadline=None)
@given(
    depth=st.integers(1, 5),
    weights=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=3),
)
def test_scenario_probabilities_sum_to_one(depth, weights):
    w = np.array(weights) / sum(weights)
    tree = NoiseTree.build(depth, lambda d, path: list(enumerate(w)), tuple("abc"[: len(w)]))
    for n in range(depth + 1):
        total = sum(p for _, p in enumerate_scenarios(tree, n))
        assert abs(total - 1.0) < 1e-10


def test_policy_check_rejects_bad_rows():
    with pytest.raises(ValueError):
        PolicyFlow((np.array([[[0.5, 0.4]]]),)).check()
    with pytest.raises(ValueError):
        PolicyFlow((np.array([[[np.nan, 1.0]]]),)).check()


def test_crowd_reward_decomposition():
    base = np.arange(6, dtype=float).reshape(1, 3, 2)
    r = CrowdReward(base, weight=2.0, kind="log")
    mu = np.array([0.5, 0.25, 0.25])
    np.testing.assert_allclose(r(mu, 0), base[0] - 2.0 * np.log(mu)[:, None])
    # zero mass is clamped, never -inf
    assert np.all(np.isfinite(r(np.array([1.0, 0.0, 0.0]), 0)))
