import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import fig1_formula, five_node_formula, unsat_formulas
from knuthsynth.cnf import Formula, Status
from knuthsynth.dpll import (FixedOrderPolicy, StateSpace, SubsolverHandle, hybrid_solve)
from knuthsynth.errors import ContractViolation, SatisfiableInstanceError
from knuthsynth.mcfs import (MAX_COUNT, SAMPLE_PRIOR, DepthCalibration, ForestStore,
                             IncumbentPolicy, KnuthSynthesis, RolloutNode, RolloutPolicy,
                             RolloutTree, SearchNode, backup, commit_action, puct_scores,
                             rollout_policy_pi, run_episode, share_prior, step_policy_gamma,
                             tree_policy_alpha, write_trace)
from knuthsynth.models import ConstantValueModel, ExactValueModel, UniformModel


def node(Q, N, P, actions=None):
    actions = tuple(actions or range(1, len(Q) + 1))
    return SearchNode(b"k", 0, actions, list(N), list(Q), list(P))


def first_action(node, q_depth, c_puct, rng):
    return node.actions[0]


# ---------------------------------------------------------------- alpha

def test_alpha_equal_q_prior_breaks():
    assert tree_policy_alpha(node([10, 10], [1, 1], [0.8, 0.2]), 10, 0.5) == 1


def test_alpha_worked_example():
    n = node([8, 12], [3, 1], [0.5, 0.5])
    s = puct_scores(n.Q, n.N, n.P, 10, 0.5)
    u = [0.5 * 0.5 * 2 / 4, 0.5 * 0.5 * 2 / 2]
    assert u == [0.125, 0.25]
    assert s == pytest.approx([8 - 10 * 0.125, 12 - 10 * 0.25])
    assert tree_policy_alpha(n, 10, 0.5) == 1


def test_alpha_no_exploration_is_argmin_q():
    n = node([5, 3, 9], [1, 50, 1], [0.9, 0.05, 0.05])
    assert tree_policy_alpha(n, 100, 0.0) == 2


def test_alpha_unvisited_first_by_prior():
    n = node([4, None, None], [2, 1, 1], [0.5, 0.2, 0.3])
    assert tree_policy_alpha(n, 1, 0.5) == 3


def test_alpha_ties_are_random():
    n = node([None, None], [1, 1], [0.5, 0.5])
    rng = random.Random(0)
    picks = {tree_policy_alpha(n, 1, 0.5, rng) for _ in range(50)}
    assert picks == {1, 2}


def test_alpha_empty():
    with pytest.raises(ContractViolation):
        tree_policy_alpha(node([], [], []), 1, 0.5)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(1, 1000), st.integers(1, 50), st.integers(1, 100)),
                min_size=1, max_size=6),
       st.integers(1, 1000), st.sampled_from([0.0, 0.5, 2.0]), st.sampled_from([2, 3, 7]))
def test_alpha_scale_invariance(rows, qd, c, scale):
    Q = [float(q) for q, _, _ in rows]
    N = [n for _, n, _ in rows]
    tot = sum(p for _, _, p in rows)
    P = [p / tot for _, _, p in rows]
    a = puct_scores(Q, N, P, qd, c)
    b = puct_scores([q * scale for q in Q], N, P, qd * scale, c)
    ia = {i for i, x in enumerate(a) if math.isclose(x, min(a), rel_tol=1e-12, abs_tol=1e-9)}
    ib = {i for i, x in enumerate(b) if math.isclose(x, min(b), rel_tol=1e-12, abs_tol=1e-9)}
    assert ia == ib


# ---------------------------------------------------------------- gamma

def _pair(status_lo=Status.OPEN):
    f = five_node_formula()
    space = StateSpace(f)
    tree = RolloutTree(space.root, ())
    lo, hi = space.children(space.root, 1)
    tree.root.on_path = True
    tree.root.action = 1
    a, b = tree.add_children(tree.root, lo, hi, (-1, 1))
    return tree, a, b


def test_gamma_sibling_stepped_returns_none():
    tree, a, b = _pair()
    a.on_path = True
    assert step_policy_gamma(tree, b, 2, 3) is None and b.on_path is False


def test_gamma_sibling_terminated_returns_proposal():
    tree, a, b = _pair()
    a.on_path = False
    assert step_policy_gamma(tree, b, 2, 3) == 2 and b.on_path is True


def test_gamma_conflict_never_steps():
    tree, a, b = _pair()
    assert a.state.status is Status.CONFLICT
    for seed in range(20):
        a.on_path = None
        assert step_policy_gamma(tree, a, 2, 3, random.Random(seed)) is None


def test_gamma_depth_bound():
    tree, a, b = _pair()
    a.on_path = False
    assert step_policy_gamma(tree, b, 2, 1) is None and b.on_path is True


def test_gamma_root_always_on_path():
    f = five_node_formula()
    tree = RolloutTree(StateSpace(f).root, ())
    assert step_policy_gamma(tree, tree.root, 1, 3) == 1


# ---------------------------------------------------------------- pi

def _pi(value_model=None, t=0.5):
    f = unsat_formulas(1, seed=1)[0]
    space = StateSpace(f)
    return RolloutPolicy(SubsolverHandle.internal(), space, value_model, t,
                         random.Random(0)), space


def test_pi_probability_examples():
    pi, _ = _pi(ConstantValueModel(0.0))
    pi.epsilon = 0.25
    assert pi.value_probability() == 0.5
    pi.epsilon = 0.5
    assert pi.value_probability() == 0.0
    pi.epsilon = 3.0
    assert pi.value_probability() == 0.0


def test_pi_first_error_sets_epsilon():
    pi, _ = _pi(ConstantValueModel(0.0))
    pi.record_error(0.3)
    assert pi.epsilon == 0.3 and pi.n == 1
    pi.record_error(0.1)
    assert pi.epsilon == pytest.approx(0.2)


def test_pi_cold_start_uses_subsolver():
    pi, space = _pi(ConstantValueModel(0.0))
    size = pi(space.root)
    assert pi.subsolver_calls == 1 and pi.value_calls == 0
    assert pi.epsilon == pytest.approx(abs(math.log2(size)))


def test_pi_without_value_model_always_subsolver():
    pi, space = _pi(None)
    for _ in range(5):
        pi(space.root)
    assert pi.subsolver_calls == 5 and pi.epsilon is None


def test_pi_sibling_mirror():
    tree, a, b = _pair()
    a.on_path, b.on_path = True, False
    a.value = 17
    pi, _ = _pi(None)
    assert rollout_policy_pi(pi, b) == 17 and pi.subsolver_calls == 0


# ---------------------------------------------------------------- backup

def _manual_rollout(length, terminal_value):
    """Chain of stepped nodes of the given length with a terminal value."""
    f = Formula.from_clauses([[1, 2, 3, 4]], 4)
    root = StateSpace(f).root
    tree = RolloutTree(root, ())
    store = ForestStore(f)
    cur = tree.root
    for d in range(length + 1):
        cur.on_path = True
        if d < length:
            key = bytes([d])
            store.insert(SearchNode.fresh(key, d, (1, 2), (0.5, 0.5)))
            cur.key, cur.action = key, 1
            a, b = tree.add_children(cur, root, root, (-1, 1))
            b.on_path = False
            cur = a
    cur.key = b"end"
    tree.complete = True
    tree.terminal = cur
    cur.value = terminal_value
    return tree, store


def test_backup_length_zero():
    f = Formula.from_clauses([[1, 2]], 2)
    tree = RolloutTree(StateSpace(f).root, ())
    tree.root.on_path = True
    tree.root.key = b"r"
    tree.root.action = 1
    store = ForestStore(f)
    store.insert(SearchNode.fresh(b"r", 0, (1, 2), (0.5, 0.5)))
    tree.complete, tree.terminal = True, tree.root
    tree.root.value = 9
    backup(tree, store, DepthCalibration())
    assert store.get(b"r").Q[0] == 9


def test_backup_geometric_values():
    tree, store = _manual_rollout(2, 1)
    cal = DepthCalibration()
    backup(tree, store, cal)
    assert store.get(bytes([0])).Q[0] == 7 and store.get(bytes([1])).Q[0] == 3
    assert cal.get(0) == 7 and cal.get(1) == 3


def test_backup_running_mean():
    n = SearchNode.fresh(b"x", 0, (1, 2), (0.5, 0.5))
    n.update(1, 10)
    assert n.Q[0] == 10 and n.N[0] == 2
    n.update(1, 20)
    assert n.Q[0] == 15 and n.N[0] == 3


def test_backup_requires_complete():
    tree, store = _manual_rollout(1, 1)
    tree.complete = False
    with pytest.raises(ContractViolation):
        backup(tree, store, DepthCalibration())


def test_depth_calibration_decay():
    c = DepthCalibration(decay=0.5)
    c.update(0, 10)
    c.update(0, 20)
    assert c.get(0) == 15 and c.count[0] == 2
    c = DepthCalibration()
    for v in (1, 2, 3, 6):
        c.update(1, v)
    assert c.get(1) == 3


# ---------------------------------------------------------------- prior sharing and commit

def test_share_prior_examples():
    p = node([None] * 3, [1] * 3, [0.5, 0.3, 0.2])
    assert share_prior(p, (2, 3)) == pytest.approx((0.6, 0.4))
    assert share_prior(p, (1, 2, 3)) == pytest.approx((0.5, 0.3, 0.2))
    u = node([None] * 4, [1] * 4, [0.25] * 4)
    assert share_prior(u, (1, 4)) == pytest.approx((0.5, 0.5))
    with pytest.raises(ContractViolation):
        share_prior(p, ())
    with pytest.raises(ContractViolation):
        share_prior(p, (7,))


def test_commit_examples():
    assert commit_action(node([3, 1], [5, 2], [0.5, 0.5]), MAX_COUNT) == 1
    assert commit_action(node([12, 9], [4, 4], [0.5, 0.5]), MAX_COUNT) == 2
    assert commit_action(node([1, 1], [1, 1], [1.0, 0.0]), SAMPLE_PRIOR) == 1


# ---------------------------------------------------------------- rollouts

def _check_shape(tree, ell):
    stepped = [n for n in tree.nodes if n.stepped]
    # one chain from the root
    cur, chain = tree.root, []
    while cur is not None and cur.stepped:
        chain.append(cur)
        nxt = [c for c in cur.children if c.stepped]
        assert len(nxt) <= 1
        cur = nxt[0] if nxt else None
    assert chain == stepped or (not stepped)
    for n in tree.nodes:
        if n.sibling is not None:
            assert n.on_path != n.sibling.on_path
            assert not (n.stepped and n.sibling.stepped)
        assert not (n.stepped and n.depth >= ell)
    probe = tree.probe()
    assert probe[-1] is tree.terminal and not probe[-1].stepped


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 5))
def test_rollout_shape_property(seed, ell):
    f = unsat_formulas(1, (6, 9), seed=seed)[0]
    e = KnuthSynthesis(f, ell=ell, seed=seed)
    root = e.space.root
    if root.status is not Status.OPEN:
        return
    e.ensure_root(root, ())
    for _ in range(5):
        _check_shape(e.rollout(root, ()), ell)


def test_first_sample_sets_q():
    f = unsat_formulas(1, seed=30)[0]
    e = KnuthSynthesis(f, ell=3, seed=1)
    root = e.space.root
    e.ensure_root(root, ())
    tree = e.rollout(root, ())
    sn = e.store.get(root.key)
    i = sn.index(tree.root.action)
    assert sn.Q[i] == tree.root.value and sn.N[i] == 2
    assert all(v > 0 for v in e.calib.mean.values())


def test_backup_unbiased_with_fixed_alpha():
    for f in unsat_formulas(3, (7, 9), seed=41):
        sub = SubsolverHandle.internal()
        truth = hybrid_solve(f, FixedOrderPolicy(), sub, 3).tree_size
        e = KnuthSynthesis(f, subsolver=sub, ell=3, seed=2, tree_policy=first_action)
        root = e.space.root
        e.ensure_root(root, ())
        vals = [e.rollout(root, ()).root.value for _ in range(4000)]
        m = sum(vals) / len(vals)
        sd = (sum((v - m) ** 2 for v in vals) / (len(vals) - 1)) ** 0.5
        assert abs(m - truth) <= 3 * sd / len(vals) ** 0.5 + 1e-9
        sn = e.store.get(root.key)
        assert sn.Q[0] == pytest.approx(m)


def test_full_rollout_root_equals_hybrid_size():
    for f in unsat_formulas(5, seed=43):
        sub = SubsolverHandle.internal()
        e = KnuthSynthesis(f, subsolver=sub, ell=3, seed=0, tree_policy=first_action)
        root = e.space.root
        e.ensure_root(root, ())
        assert e.full_rollout(root, ()) == hybrid_solve(f, FixedOrderPolicy(), sub, 3).tree_size


def _full4():
    import itertools
    return Formula.from_clauses([[s * v for s, v in zip(signs, (1, 2, 3, 4))]
                                 for signs in itertools.product((1, -1), repeat=4)], 4)


def test_dag_merges_transpositions():
    f = _full4()
    sizes = {}
    for dag in (True, False):
        e = KnuthSynthesis(f, ell=3, seed=5, dag=dag, pure_literals=False)
        root = e.space.root
        e.ensure_root(root, ())
        for _ in range(400):
            e.rollout(root, ())
        sizes[dag] = len(e.store)
    assert sizes[True] < sizes[False]
    # x1 then x2 and x2 then x1 meet at one node
    e = KnuthSynthesis(f, ell=3, seed=5, pure_literals=False)
    sp = e.space
    a = sp.child(sp.child(sp.root, 1), 2)
    b = sp.child(sp.child(sp.root, 2), 1)
    assert e.store.key_for(a, (1, 2)) == e.store.key_for(b, (2, 1))
    t = KnuthSynthesis(f, ell=3, seed=5, dag=False, pure_literals=False)
    assert t.store.key_for(a, (1, 2)) != t.store.key_for(b, (2, 1))


def test_shared_node_counts_exceed_single_path():
    f = _full4()
    e = KnuthSynthesis(f, ell=3, seed=9, pure_literals=False)
    sp = e.space
    e.ensure_root(sp.root, ())
    for _ in range(2000):
        e.rollout(sp.root, ())
    key = sp.child(sp.child(sp.root, 1), 2).key
    sn = e.store.get(key)
    assert sn is not None and sn.backups > 0


# ---------------------------------------------------------------- episodes

def test_episode_smallest(fig1):
    res = run_episode(fig1, ell=1, k=10, seed=0)
    assert res.commitments == 1 and res.conflict_leaves == 2 and res.tree_size == 3
    assert len(res.policy_examples) == 1 and not res.value_records


def test_episode_k_one():
    f = unsat_formulas(1, seed=12)[0]
    res = run_episode(f, ell=2, k=1, seed=0, commit_mix=0.0)
    assert res.commitments >= 1 and res.rollouts == res.commitments


def test_episode_bounds_and_examples(tmp_path):
    for i, f in enumerate(unsat_formulas(5, seed=50)):
        ell = 3
        res = run_episode(f, ell=ell, k=50, seed=i)
        assert res.commitments <= 2 ** ell - 1
        assert len(res.policy_examples) == res.commitments
        assert len(res.value_records) == res.frontier_leaves <= 2 ** ell
        for ex in res.policy_examples:
            assert math.isclose(sum(ex.counts), 1.0)
            assert len(ex.counts) == len(ex.actions) == len(ex.q)
        for ex in res.value_records:
            assert ex.log2_size >= 0
    p = tmp_path / "trace.jsonl"
    write_trace(p, res.trace)
    recs = [json.loads(l) for l in p.read_text().splitlines()]
    assert len(recs) == res.commitments
    assert set(recs[0]) >= {"key", "depth", "action", "N", "Q", "P"}


def test_episode_tree_size_matches_replay():
    f = unsat_formulas(1, seed=52)[0]
    e = KnuthSynthesis(f, ell=3, seed=3, commit_mix=0.0)
    res = e.run_episode(100)
    chosen = {rec["key"]: rec["action"] for rec in res.trace}
    from knuthsynth.dpll import FunctionPolicy
    pol = FunctionPolicy(lambda s: chosen[s.key.hex()])
    assert hybrid_solve(f, pol, e.subsolver, 3).tree_size == res.tree_size


def test_episode_rejects_sat():
    f = Formula.from_clauses([[1, 2, 3], [-1, -2]], 3)
    with pytest.raises(SatisfiableInstanceError):
        run_episode(f, ell=2, k=5, seed=0, pure_literals=False)


def test_prior_sources():
    f = unsat_formulas(1, seed=60)[0]
    e = KnuthSynthesis(f, ell=3, seed=0)
    root = e.space.root
    e.search(root, 50, ())
    srcs = {n.prior_source for n in e.store.nodes.values()}
    assert e.store.get(root.key).prior_source == "model"
    assert e.model_queries == 1 and srcs <= {"model", "inherited"}
    for n in e.store.nodes.values():
        assert math.isclose(sum(n.P), 1.0)


def test_value_model_used_when_accurate():
    f = unsat_formulas(1, (9, 9), seed=61)[0]
    space = StateSpace(f)
    sub = SubsolverHandle.internal()
    e = KnuthSynthesis(space, ExactValueModel(space, sub), sub, ell=2, seed=0)
    e.search(space.root, 300, ())
    assert e.pi.epsilon == 0 and e.pi.value_calls > 0


def test_incumbent_policy():
    f = unsat_formulas(1, seed=62)[0]
    e = KnuthSynthesis(f, ell=3, seed=0)
    root = e.space.root
    e.search(root, 200, ())
    pol = IncumbentPolicy(e.store, UniformModel(), 0)
    sn = e.store.get(root.key)
    best = max(sn.N)
    assert sn.N[sn.index(pol(root))] == best
    assert sum(pol.distribution(root).values()) == pytest.approx(1.0)
    assert pol(root) == pol(root)
    assert hybrid_solve(f, pol, e.subsolver, 3).tree_size >= 1
