"""Monte Carlo Forest Search specialised to Knuth Synthesis.

Costs are tree sizes and everything is minimised.  One rollout from a
state is a Knuth probe: the tree policy picks the branching variable at the
probe's current node, both children are generated, and the step policy
decides which of the pair carries the probe on.  The probe ends at a
conflict or at depth ``ell``, where the rollout policy supplies a size from
the subsolver or the value model.  Every node on the probe is then backed
up with the depth-weighted estimate from :mod:`knuthsynth.knuth`.

Search statistics live in a :class:`ForestStore` keyed by decision set, so
transpositions share a node.
"""

import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional

from .cnf import Status, ordered_key
from .dpll import BranchingPolicy, SubsolverHandle, space_for, subsolver_stats
from .errors import ContractViolation, SatisfiableInstanceError
from .models import Model, TrainingExample, UniformModel, normalise_counts

MAX_COUNT = "max_count"
SAMPLE_PRIOR = "sample_prior"


@dataclass
class SearchNode:
    """Statistics for one state.  ``N`` starts at 1 per action; ``Q`` is None until the first backup."""

    key: bytes
    depth: int
    actions: tuple
    N: List[int]
    Q: List[Optional[float]]
    P: List[float]
    prior_source: str = "model"

    @classmethod
    def fresh(cls, key, depth, actions, prior, source="model"):
        n = len(actions)
        return cls(key, depth, tuple(actions), [1] * n, [None] * n, list(prior), source)

    def index(self, var):
        return self.actions.index(var)

    @property
    def backups(self):
        return sum(self.N) - len(self.N)

    def update(self, var, value):
        i = self.index(var)
        seen = self.N[i] - 1
        if self.Q[i] is None:
            self.Q[i] = value
        else:
            self.Q[i] += (value - self.Q[i]) / (seen + 1)
        self.N[i] += 1


class DepthCalibration:
    """Running mean of backed-up values per depth.

    With ``decay`` set, the mean becomes an exponential moving average
    (weight ``decay`` on the old mean).
    """

    def __init__(self, decay=None):
        self.decay = decay
        self.mean = {}
        self.count = {}

    def update(self, depth, value):
        n = self.count.get(depth, 0) + 1
        self.count[depth] = n
        if n == 1:
            self.mean[depth] = float(value)
        elif self.decay is None:
            self.mean[depth] += (value - self.mean[depth]) / n
        else:
            self.mean[depth] = self.decay * self.mean[depth] + (1 - self.decay) * value

    def get(self, depth):
        return self.mean.get(depth)


class ForestStore:
    """StateKey -> SearchNode.  With ``dag=False`` keys include decision order."""

    def __init__(self, formula, dag=True):
        self.formula = formula
        self.dag = dag
        self.nodes = {}

    def key_for(self, state, path=None):
        if self.dag:
            return state.key
        return ordered_key(self.formula, state.path if path is None else path)

    def get(self, key):
        return self.nodes.get(key)

    def insert(self, node):
        self.nodes.setdefault(node.key, node)
        return self.nodes[node.key]

    def __contains__(self, key):
        return key in self.nodes

    def __len__(self):
        return len(self.nodes)


# ---------------------------------------------------------------- tree policy


def puct_scores(Q, N, P, q_depth, c_puct):
    """Q(s,a) - Q_d * U(s,a) with U = c * P * sqrt(sum N) / (1 + N)."""
    root = math.sqrt(sum(N))
    return [q - q_depth * c_puct * p * root / (1 + n) for q, n, p in zip(Q, N, P)]


def _pick(candidates, rng):
    if len(candidates) == 1:
        return candidates[0]
    return rng.choice(candidates)


def tree_policy_alpha(node: SearchNode, q_depth, c_puct, rng=random) -> int:
    """Choose the action to try at ``node``.

    Actions that have never been backed up go first, highest prior first.
    Once every action has a Q, the argmin of the PUCT score is returned.
    Ties are broken uniformly at random.
    """
    if not node.actions:
        raise ContractViolation("tree policy called on a node without actions")
    fresh = [i for i, q in enumerate(node.Q) if q is None]
    if fresh:
        best = max(node.P[i] for i in fresh)
        return node.actions[_pick([i for i in fresh if node.P[i] == best], rng)]
    if q_depth is None:
        q_depth = sum(node.Q) / len(node.Q)
    scores = puct_scores(node.Q, node.N, node.P, q_depth, c_puct)
    low = min(scores)
    return node.actions[_pick([i for i, s in enumerate(scores) if s == low], rng)]


def share_prior(parent: SearchNode, child_actions) -> tuple:
    """Restrict the parent's prior to the child's actions and renormalise."""
    if not child_actions:
        raise ContractViolation("child state has no actions")
    lookup = dict(zip(parent.actions, parent.P))
    try:
        raw = [lookup[a] for a in child_actions]
    except KeyError as exc:
        raise ContractViolation("child action %s not available at parent" % exc) from None
    total = math.fsum(raw)
    if total <= 0:
        return tuple(1.0 / len(raw) for _ in raw)
    return tuple(p / total for p in raw)


# ---------------------------------------------------------------- rollouts


@dataclass(eq=False)
class RolloutNode:
    state: object
    path: tuple
    parent: Optional["RolloutNode"] = None
    sibling: Optional["RolloutNode"] = None
    children: tuple = ()
    on_path: Optional[bool] = None   # step-policy cache: None until processed
    action: Optional[int] = None     # set when the node stepped
    search_node: Optional[SearchNode] = None
    key: object = None
    value: object = None

    @property
    def depth(self):
        return len(self.path)

    @property
    def processed(self):
        return self.on_path is not None

    @property
    def stepped(self):
        return self.action is not None


class RolloutTree:
    def __init__(self, root_state, root_path=None):
        path = tuple(root_state.path if root_path is None else root_path)
        self.root = RolloutNode(root_state, path)
        self.nodes = [self.root]
        self.complete = False
        self.terminal: Optional[RolloutNode] = None

    def add_children(self, node, left_state, right_state, lits):
        lo = RolloutNode(left_state, node.path + (lits[0],), parent=node)
        hi = RolloutNode(right_state, node.path + (lits[1],), parent=node)
        lo.sibling, hi.sibling = hi, lo
        node.children = (lo, hi)
        self.nodes.extend(node.children)
        return node.children

    def stepped_nodes(self):
        return [n for n in self.nodes if n.stepped]

    def probe(self):
        """Nodes the Knuth probe passed through, root first, terminal last."""
        out = []
        n = self.root
        while n is not None:
            out.append(n)
            n = next((c for c in n.children if c.on_path), None)
        return out


def step_policy_gamma(rollout: RolloutTree, node: RolloutNode, proposed, ell, rng=random):
    """Decide whether ``node`` plays ``proposed`` or ends here (returns None).

    The probe's coin is flipped per sibling pair: the first sibling to be
    processed flips it, the second takes the opposite.  A conflict or
    depth-``ell`` node that wins the coin still ends the probe; it just has
    nothing to play.
    """
    if node is rollout.root:
        node.on_path = True
    elif node.sibling is not None and node.sibling.processed:
        node.on_path = not node.sibling.on_path
    else:
        node.on_path = bool(rng.getrandbits(1))
    if not node.on_path or proposed is None:
        return None
    if node.state.status is not Status.OPEN or node.depth >= ell:
        return None
    return proposed


class RolloutPolicy:
    """Chooses between the subsolver and the value model at depth-``ell`` leaves.

    The value model is used with probability ``1 - min(1, eps / t)`` where
    ``eps`` is the running mean of ``|log2 T_sub - prediction|`` over
    subsolver calls.  Before the first subsolver call there is no error
    estimate and the subsolver is always used.
    """

    def __init__(self, subsolver: SubsolverHandle, space, value_model: Optional[Model] = None,
                 t=0.5, rng=None):
        self.subsolver = subsolver
        self.space = space
        self.value_model = value_model
        self.t = t
        self.rng = rng or random.Random()
        self.epsilon = None
        self.n = 0
        self.subsolver_calls = 0
        self.value_calls = 0
        self.cost = 0

    def value_probability(self):
        if self.value_model is None or self.epsilon is None:
            return 0.0
        if self.t <= 0:
            return 0.0
        return 1.0 - min(1.0, self.epsilon / self.t)

    def record_error(self, m):
        if self.n == 0:
            self.epsilon = m
        else:
            self.epsilon += (m - self.epsilon) / (self.n + 1)
        self.n += 1

    def __call__(self, state):
        p = self.value_probability()
        if p > 0 and self.rng.random() < p:
            self.value_calls += 1
            self.cost += 1
            return 2.0 ** self.value_model.value(state)
        stats = subsolver_stats(self.space, self.subsolver, state)
        if stats.satisfiable:
            raise SatisfiableInstanceError("subsolver found a model below %r" % (state.path,))
        size = stats.tree_size
        self.subsolver_calls += 1
        self.cost += size
        if self.value_model is not None:
            self.record_error(abs(math.log2(size) - self.value_model.value(state)))
        return size


def rollout_policy_pi(pi: RolloutPolicy, node: RolloutNode):
    """Value for a rollout leaf: the sibling's value if the sibling carried the probe, else ``pi``."""
    if node.sibling is not None and node.sibling.on_path and not node.on_path:
        return node.sibling.value
    return pi(node.state)


def backup(rollout: RolloutTree, store: ForestStore, calib: DepthCalibration):
    """Push the probe's depth-weighted estimates into the store and the depth calibration."""
    if not rollout.complete or rollout.terminal is None:
        raise ContractViolation("backup needs a completed rollout")
    term = rollout.terminal
    weight = term.value
    for node in rollout.probe():
        if not node.stepped:
            continue
        scale = 1 << (term.depth - node.depth)
        value = scale * weight + scale - 1
        sn = store.get(node.key)
        if sn is None:
            raise ContractViolation("stepped node missing from store")
        sn.update(node.action, value)
        calib.update(node.depth, value)
    return store


def commit_action(node: SearchNode, mode=MAX_COUNT, rng=random) -> int:
    """Pick the action to commit to at ``node``.

    ``max_count``: most visited, ties to the lower Q then at random.
    ``sample_prior``: draw from the node's prior.
    """
    if mode == SAMPLE_PRIOR:
        return rng.choices(node.actions, weights=node.P)[0]
    best_n = max(node.N)
    tied = [i for i, n in enumerate(node.N) if n == best_n]
    qs = [node.Q[i] if node.Q[i] is not None else math.inf for i in tied]
    low = min(qs)
    tied = [i for i, q in zip(tied, qs) if q == low]
    return node.actions[_pick(tied, rng)]


# ---------------------------------------------------------------- engine


@dataclass
class EpisodeResult:
    trace: list = field(default_factory=list)
    examples: list = field(default_factory=list)
    commitments: int = 0
    conflict_leaves: int = 0
    frontier_leaves: int = 0
    tree_size: int = 0          # size of the committed hybrid tree
    rollouts: int = 0
    expanded: int = 0
    subsolver_calls: int = 0
    value_calls: int = 0
    store_size: int = 0

    @property
    def policy_examples(self):
        return [e for e in self.examples if e.counts is not None]

    @property
    def value_records(self):
        return [e for e in self.examples if e.log2_size is not None]


class KnuthSynthesis:
    """Forest search over one instance.

    ``tree_policy`` has the signature of :func:`tree_policy_alpha` and can be
    swapped for a fixed chooser when testing.

    ``expanded`` counts work in nodes: one per tree-policy query, one per
    generated child, one per value-model call and the full tree size of
    every subsolver call (cached or not).
    """

    def __init__(self, formula, model: Optional[Model] = None,
                 subsolver: Optional[SubsolverHandle] = None, ell=4, c_puct=0.5, t=0.5,
                 commit_mix=0.5, dag=True, seed=None, calibration_decay=None,
                 requery_prior=True, pure_literals=True, use_value_model=True,
                 tree_policy=tree_policy_alpha):
        if ell < 0:
            raise ContractViolation("ell must be >= 0")
        self.space = space_for(formula, pure_literals)
        self.formula = self.space.formula
        self.model = model or UniformModel()
        self.subsolver = subsolver or SubsolverHandle.internal("jw")
        self.ell = ell
        self.c_puct = c_puct
        self.commit_mix = commit_mix
        self.requery_prior = requery_prior
        self.tree_policy = tree_policy
        self.rng = random.Random(seed)
        self.store = ForestStore(self.formula, dag)
        self.calib = DepthCalibration(calibration_decay)
        vm = self.model if (use_value_model and self.model.has_value) else None
        self.pi = RolloutPolicy(self.subsolver, self.space, vm, t, self.rng)
        self.expanded = 0
        self.rollouts = 0
        self.model_queries = 0

    # -- nodes

    def _model_prior(self, state):
        self.model_queries += 1
        return self.model.prior(state)

    def _lookup(self, state, path, parent: Optional[SearchNode]):
        key = self.store.key_for(state, path)
        node = self.store.get(key)
        if node is None:
            if parent is None:
                node = SearchNode.fresh(key, len(path), state.actions,
                                        self._model_prior(state), "model")
            else:
                node = SearchNode.fresh(key, len(path), state.actions,
                                        share_prior(parent, state.actions), "inherited")
        return key, node

    def ensure_root(self, state, path=None):
        """Store node for a search root; the model prior replaces an inherited one."""
        path = tuple(state.path if path is None else path)
        key, node = self._lookup(state, path, None)
        node = self.store.insert(node)
        if self.requery_prior and node.prior_source == "inherited":
            node.P = list(self._model_prior(state))
            node.prior_source = "model"
        return node

    # -- one Knuth rollout

    def rollout(self, state, path=None) -> RolloutTree:
        tree = RolloutTree(state, path)
        queue = deque([tree.root])
        while queue:
            rn = queue.popleft()
            proposal = None
            if rn.state.status is Status.OPEN and rn.depth < self.ell:
                parent_sn = rn.parent.search_node if rn.parent is not None else None
                rn.key, rn.search_node = self._lookup(rn.state, rn.path, parent_sn)
                proposal = self.tree_policy(rn.search_node, self.calib.get(rn.depth),
                                             self.c_puct, self.rng)
            step = step_policy_gamma(tree, rn, proposal, self.ell, self.rng)
            if step is None:
                continue
            # a proposal that gamma discards costs nothing: it needs no model call
            self.expanded += 1
            rn.search_node = self.store.insert(rn.search_node)
            rn.action = step
            lo, hi = self.space.children(rn.state, step)
            self.expanded += 2
            queue.extend(tree.add_children(rn, lo, hi, (-step, step)))
        tree.complete = True
        self._simulate(tree)
        backup(tree, self.store, self.calib)
        self.rollouts += 1
        return tree

    def _simulate(self, tree):
        probe = tree.probe()
        term = probe[-1]
        status = term.state.status
        if status is Status.CONFLICT:
            term.value = 1
        elif status is Status.SATISFIED:
            raise SatisfiableInstanceError("rollout reached a satisfying assignment at %r"
                                           % (term.path,))
        else:
            before = self.pi.cost
            term.value = rollout_policy_pi(self.pi, term)
            self.expanded += self.pi.cost - before
        tree.terminal = term
        # fill in the rest of the probe bottom-up, and mirror values onto off-probe siblings
        for node in reversed(probe[:-1]):
            scale = 1 << (term.depth - node.depth)
            node.value = scale * term.value + scale - 1
        for node in tree.nodes:
            if node.value is None and node.on_path is False:
                node.value = node.sibling.value

    # -- full proof-tree rollout (no Knuth sampling)

    def full_rollout(self, state, path=None):
        """Evaluate the whole hybrid tree under the tree policy and back up exact sizes."""
        path = tuple(state.path if path is None else path)

        def visit(st, p, parent_sn):
            if st.status is Status.CONFLICT:
                return 1
            if st.status is Status.SATISFIED:
                raise SatisfiableInstanceError("full rollout reached a satisfying assignment")
            if len(p) >= self.ell:
                stats = subsolver_stats(self.space, self.subsolver, st)
                if stats.satisfiable:
                    raise SatisfiableInstanceError("subsolver found a model")
                self.expanded += stats.tree_size
                return stats.tree_size
            key, sn = self._lookup(st, p, parent_sn)
            sn = self.store.insert(sn)
            a = self.tree_policy(sn, self.calib.get(len(p)), self.c_puct, self.rng)
            self.expanded += 1
            lo, hi = self.space.children(st, a)
            self.expanded += 2
            v = 1 + visit(lo, p + (-a,), sn) + visit(hi, p + (a,), sn)
            sn.update(a, v)
            self.calib.update(len(p), v)
            return v

        value = visit(state, path, None)
        self.rollouts += 1
        return value

    # -- commitments

    def search(self, state, k, path=None) -> SearchNode:
        path = tuple(state.path if path is None else path)
        self.ensure_root(state, path)
        for _ in range(k):
            self.rollout(state, path)
        return self.store.get(self.store.key_for(state, path))

    def run_episode(self, k=1000, instance="") -> EpisodeResult:
        """Search, commit, and recurse into both children until depth ``ell`` or conflict."""
        res = EpisodeResult()
        frontier = deque([(self.space.root, ())])
        while frontier:
            state, path = frontier.popleft()
            if state.status is Status.CONFLICT:
                res.conflict_leaves += 1
                res.tree_size += 1
                continue
            if state.status is Status.SATISFIED:
                raise SatisfiableInstanceError("satisfiable branch at %r" % (path,))
            if len(path) >= self.ell:
                stats = subsolver_stats(self.space, self.subsolver, state)
                if stats.satisfiable:
                    raise SatisfiableInstanceError("subsolver found a model at %r" % (path,))
                res.frontier_leaves += 1
                res.tree_size += stats.tree_size
                res.examples.append(TrainingExample(
                    state.key.hex(), state.actions, log2_size=math.log2(stats.tree_size),
                    depth=len(path), instance=instance))
                continue
            node = self.search(state, k, path)
            mode = SAMPLE_PRIOR if self.rng.random() < self.commit_mix else MAX_COUNT
            action = commit_action(node, mode, self.rng)
            res.commitments += 1
            res.tree_size += 1
            res.examples.append(TrainingExample(
                state.key.hex(), node.actions, normalise_counts(node.N), tuple(node.Q),
                depth=len(path), instance=instance))
            res.trace.append({
                "key": state.key.hex(), "depth": len(path), "action": action, "mode": mode,
                "actions": list(node.actions), "N": list(node.N), "Q": list(node.Q),
                "P": list(node.P)})
            lo, hi = self.space.children(state, action)
            frontier.append((lo, path + (-action,)))
            frontier.append((hi, path + (action,)))
        res.rollouts = self.rollouts
        res.expanded = self.expanded
        res.subsolver_calls = self.pi.subsolver_calls
        res.value_calls = self.pi.value_calls
        res.store_size = len(self.store)
        return res


def run_episode(formula, model=None, subsolver=None, ell=4, k=1000, c_puct=0.5, seed=None,
                **kwargs) -> EpisodeResult:
    engine = KnuthSynthesis(formula, model, subsolver, ell=ell, c_puct=c_puct, seed=seed,
                            **kwargs)
    return engine.run_episode(k)


def write_trace(path, trace):
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------- incumbents


def _tie_rng(key, seed):
    return random.Random(int.from_bytes(bytes(key)[:8], "big") ^ (seed or 0))


class IncumbentPolicy(BranchingPolicy):
    """Greedy policy read off the search statistics.

    Most visited action, ties to the lower Q, remaining ties broken by a
    per-state pseudo-random draw so repeated evaluations agree.  States the
    search never backed up fall back to the argmax of ``fallback``'s prior.
    """

    name = "incumbent"

    def __init__(self, store: ForestStore, fallback: Optional[Model] = None, seed=0):
        self.store = store
        self.fallback = fallback or UniformModel()
        self.seed = seed

    def candidates(self, state):
        node = self.store.get(self.store.key_for(state))
        if node is not None and node.backups > 0 and node.actions == state.actions:
            best = max(node.N)
            tied = [i for i, n in enumerate(node.N) if n == best]
            qs = [node.Q[i] if node.Q[i] is not None else math.inf for i in tied]
            low = min(qs)
            return [node.actions[i] for i, q in zip(tied, qs) if q == low]
        prior = self.fallback.prior(state)
        top = max(prior)
        return [a for a, p in zip(state.actions, prior) if p == top]

    def choose(self, state):
        cands = self.candidates(state)
        if len(cands) == 1:
            return cands[0]
        return _tie_rng(state.key, self.seed).choice(cands)

    def distribution(self, state):
        cands = self.candidates(state)
        return {a: 1.0 / len(cands) for a in cands}
