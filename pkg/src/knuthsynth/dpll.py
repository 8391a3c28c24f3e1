"""Complete DPLL search with pluggable branching, exact proof-tree sizes and subsolvers."""

import enum
import os
import random
import re
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .cnf import (Formula, Status, SubproblemState, clause_to_dimacs, initial_state,
                  lit_int, transition)
from .errors import (ContractViolation, IncompleteSearchError, SatisfiableInstanceError,
                     SubsolverExitError, SubsolverOutputError, SubsolverTimeout)

SUBSOLVER_ENV = "KNUTHSYNTH_SUBSOLVER"


class StateSpace:
    """Memoised view of one instance's DPLL tree.

    Children are cached by (decision-set key, literal), so transpositions are
    computed once.  A cached child's ``path`` records whichever order reached
    it first.
    """

    def __init__(self, formula: Formula, pure_literals=True):
        self.formula = formula
        self.pure_literals = pure_literals
        self.root = initial_state(formula, pure_literals)
        self._children = {}
        self._sizes = {}

    def child(self, state: SubproblemState, lit) -> SubproblemState:
        lit = lit_int(lit)
        k = (state.key, lit)
        c = self._children.get(k)
        if c is None:
            c = transition(state, lit, self.pure_literals)
            self._children[k] = c
        return c

    def children(self, state, var, order=(False, True)):
        return tuple(self.child(state, var if pol else -var) for pol in order)

    def cached_size(self, tag, state, compute):
        k = (tag, state.key)
        v = self._sizes.get(k)
        if v is None:
            v = self._sizes[k] = compute()
        return v

    def __len__(self):
        return len(self._children)


def space_for(formula_or_space, pure_literals=True) -> StateSpace:
    if isinstance(formula_or_space, StateSpace):
        return formula_or_space
    return StateSpace(formula_or_space, pure_literals)


# ---------------------------------------------------------------- policies


class BranchingPolicy:
    """Chooses a branching variable among ``state.actions``."""

    name = "policy"
    deterministic = True

    def choose(self, state: SubproblemState) -> int:
        raise NotImplementedError

    def distribution(self, state: SubproblemState) -> dict:
        """Probability of each branching variable; deterministic policies return a point mass."""
        return {self.choose(state): 1.0}

    def __call__(self, state):
        return self.choose(state)

    def __repr__(self):
        return "<%s %s>" % (type(self).__name__, self.name)


def _need_actions(state):
    if not state.actions:
        raise ContractViolation("no unassigned variables to branch on")
    return state.actions


def jw_scores(clauses, variables=None) -> dict:
    """Two-sided Jeroslow-Wang: sum of 2^-|c| over clauses mentioning the variable."""
    scores = dict.fromkeys(variables, 0.0) if variables is not None else {}
    for c in clauses:
        w = 2.0 ** -len(c)
        for l in c:
            v = abs(l)
            if variables is None or v in scores:
                scores[v] = scores.get(v, 0.0) + w
    return scores


class JWPolicy(BranchingPolicy):
    name = "jw"

    def choose(self, state):
        actions = _need_actions(state)
        scores = jw_scores(state.residual, actions)
        best = max(scores.values())
        return min(v for v in actions if scores[v] == best)


class FixedOrderPolicy(BranchingPolicy):
    """Branch on the first available variable of ``order`` (ascending index by default)."""

    name = "fixed"

    def __init__(self, order: Optional[Sequence[int]] = None):
        self.order = list(order) if order is not None else None

    def choose(self, state):
        actions = _need_actions(state)
        if self.order is None:
            return actions[0]
        avail = set(actions)
        for v in self.order:
            if v in avail:
                return v
        return actions[0]


class UniformPolicy(BranchingPolicy):
    name = "uniform"
    deterministic = False

    def __init__(self, seed=None):
        self.seed = seed
        self.rng = random.Random(seed)

    def choose(self, state):
        return self.rng.choice(_need_actions(state))

    def distribution(self, state):
        actions = _need_actions(state)
        p = 1.0 / len(actions)
        return {v: p for v in actions}


class FunctionPolicy(BranchingPolicy):
    def __init__(self, fn: Callable[[SubproblemState], int], name="function"):
        self.fn = fn
        self.name = name

    def choose(self, state):
        return self.fn(state)


def jw_policy():
    return JWPolicy()


def uniform_policy(seed=None):
    return UniformPolicy(seed)


def fixed_order_policy(order=None):
    return FixedOrderPolicy(order)


POLICIES = {"jw": JWPolicy, "uniform": UniformPolicy, "fixed": FixedOrderPolicy}


def make_policy(name, seed=None) -> BranchingPolicy:
    if name == "uniform":
        return UniformPolicy(seed)
    try:
        return POLICIES[name]()
    except KeyError:
        raise ValueError("unknown policy %r (choose from %s)" % (name, sorted(POLICIES))) from None


# ---------------------------------------------------------------- results


class Outcome(str, enum.Enum):
    UNSAT = "unsatisfiable"
    SAT = "satisfiable"


@dataclass
class ProofTreeStats:
    tree_size: int = 0
    max_depth: int = 0
    leaf_count: int = 0
    outcome: Outcome = Outcome.UNSAT
    decisions: int = 0
    subsolver_calls: int = 0
    subsolver_nodes: int = 0

    @property
    def satisfiable(self):
        return self.outcome is Outcome.SAT


# ---------------------------------------------------------------- subsolvers


class SubsolverKind(str, enum.Enum):
    INTERNAL = "internal_policy"
    EXTERNAL = "external_process"


@dataclass
class SubsolverHandle:
    """Where subproblems below the learned-policy depth are sent.

    ``args`` is the argument template for external solvers; the token
    ``{cnf}`` is replaced by the path of the DIMACS file.  ``pattern`` must
    capture the node count in its first group.
    """

    kind: SubsolverKind = SubsolverKind.INTERNAL
    policy: object = "jw"
    executable: Optional[str] = None
    args: Sequence[str] = ("{cnf}",)
    pattern: str = r"nodes:\s*(\d+)"
    timeout: float = 60.0
    _policy_obj: Optional[BranchingPolicy] = field(default=None, repr=False, compare=False)

    @classmethod
    def internal(cls, policy="jw"):
        return cls(SubsolverKind.INTERNAL, policy=policy)

    @classmethod
    def external(cls, executable, args=("{cnf}",), pattern=r"nodes:\s*(\d+)", timeout=60.0):
        return cls(SubsolverKind.EXTERNAL, policy=None, executable=executable,
                   args=tuple(args), pattern=pattern, timeout=timeout)

    @property
    def deterministic(self):
        if self.kind is SubsolverKind.EXTERNAL:
            return True
        return self.branching_policy().deterministic

    def branching_policy(self) -> BranchingPolicy:
        if self._policy_obj is None:
            p = self.policy
            self._policy_obj = p if isinstance(p, BranchingPolicy) else make_policy(p)
        return self._policy_obj

    def to_dict(self):
        if self.kind is SubsolverKind.INTERNAL:
            p = self.policy if isinstance(self.policy, str) else self.branching_policy().name
            return {"kind": self.kind.value, "policy": p}
        return {"kind": self.kind.value, "executable": self.executable,
                "args": list(self.args), "pattern": self.pattern, "timeout": self.timeout}

    @classmethod
    def from_dict(cls, d):
        kind = SubsolverKind(d.get("kind", SubsolverKind.INTERNAL.value))
        if kind is SubsolverKind.INTERNAL:
            return cls.internal(d.get("policy", "jw"))
        return cls.external(d["executable"], d.get("args", ("{cnf}",)),
                            d.get("pattern", r"nodes:\s*(\d+)"), d.get("timeout", 60.0))

    def solve(self, state: SubproblemState, space: Optional[StateSpace] = None) -> ProofTreeStats:
        """Tree size of the subsolver's proof for ``state``, counting ``state`` itself."""
        if self.kind is SubsolverKind.EXTERNAL:
            return run_external_subsolver_stats(self, state)
        space = space or StateSpace(state.formula)
        stats = ProofTreeStats()
        sat = _search(space, state, self.branching_policy(), None, None, stats, (False, True),
                      state.decision_depth)
        stats.outcome = Outcome.SAT if sat else Outcome.UNSAT
        return stats

    def tree_size(self, state, space=None) -> int:
        return self.solve(state, space).tree_size


def _residual_dimacs(state):
    lines = ["c residual subproblem, decisions: %s\n" % " ".join(map(str, state.path)),
             "p cnf %d %d\n" % (state.formula.num_variables, len(state.residual))]
    lines.extend(clause_to_dimacs(c) + "\n" for c in state.residual)
    return "".join(lines)


def run_external_subsolver_stats(handle: SubsolverHandle, state: SubproblemState) -> ProofTreeStats:
    if handle.kind is not SubsolverKind.EXTERNAL:
        raise ContractViolation("run_external_subsolver needs an external_process handle")
    exe = os.environ.get(SUBSOLVER_ENV) or handle.executable
    if not exe:
        raise ContractViolation("external subsolver has no executable (set %s)" % SUBSOLVER_ENV)
    fd, path = tempfile.mkstemp(suffix=".cnf", prefix="ksub_")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(_residual_dimacs(state))
        cmd = [exe] + [a.replace("{cnf}", path) for a in handle.args]
        if exe.endswith(".py"):
            cmd.insert(0, sys.executable)
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=handle.timeout)
        except subprocess.TimeoutExpired as exc:
            out = exc.stdout.decode() if isinstance(exc.stdout, bytes) else (exc.stdout or "")
            raise SubsolverTimeout(
                "subsolver timed out after %g s" % handle.timeout, out) from None
    finally:
        os.unlink(path)
    out = proc.stdout
    if proc.returncode not in (0, 10, 20):
        raise SubsolverExitError("subsolver exited with code %d" % proc.returncode,
                                 proc.returncode, out + proc.stderr)
    m = re.search(handle.pattern, out)
    if m is None:
        raise SubsolverOutputError("no node count matching %r in subsolver output"
                                   % handle.pattern, out)
    try:
        size = int(m.group(1))
    except (IndexError, ValueError):
        raise SubsolverOutputError("unparsable node count %r" % m.group(0), out) from None
    outcome = Outcome.SAT if proc.returncode == 10 else Outcome.UNSAT
    return ProofTreeStats(tree_size=size, outcome=outcome, subsolver_calls=1,
                          subsolver_nodes=size)


def run_external_subsolver(handle: SubsolverHandle, state: SubproblemState) -> int:
    return run_external_subsolver_stats(handle, state).tree_size


# ---------------------------------------------------------------- search


def _search(space, state, policy, depth_limit, frontier, stats, order, base_depth):
    stats.tree_size += 1
    rel = state.decision_depth - base_depth
    if rel > stats.max_depth:
        stats.max_depth = rel
    if state.status is Status.CONFLICT:
        stats.leaf_count += 1
        return False
    if state.status is Status.SATISFIED:
        stats.leaf_count += 1
        return True
    if depth_limit is not None and state.decision_depth >= depth_limit:
        if frontier is None:
            raise IncompleteSearchError(
                "incomplete search: depth limit %d reached with open subproblems and no "
                "subsolver" % depth_limit)
        sub = frontier(state)
        stats.tree_size += sub.tree_size - 1
        stats.leaf_count += sub.leaf_count
        stats.max_depth = max(stats.max_depth, rel + sub.max_depth)
        stats.decisions += sub.decisions
        stats.subsolver_calls += 1
        stats.subsolver_nodes += sub.tree_size
        return sub.outcome is Outcome.SAT
    var = policy(state)
    if var not in state.actions:
        raise ContractViolation("policy %r chose variable %r, not among %s"
                                % (policy, var, list(state.actions)))
    stats.decisions += 1
    for pol in order:
        child = space.child(state, var if pol else -var)
        if _search(space, child, policy, depth_limit, frontier, stats, order, base_depth):
            return True
    return False


def dpll_solve(formula, policy: BranchingPolicy, depth_limit=None, pure_literals=True,
               polarity_order=(False, True)) -> ProofTreeStats:
    """Run DPLL under ``policy`` and count every call in the proof tree.

    ``formula`` may be a Formula or a prepared StateSpace.  On UNSAT the
    count is the exact proof-tree size; on SAT the search stops at the first
    satisfying leaf.
    """
    space = space_for(formula, pure_literals)
    stats = ProofTreeStats()
    sat = _search(space, space.root, policy, depth_limit, None, stats, tuple(polarity_order), 0)
    stats.outcome = Outcome.SAT if sat else Outcome.UNSAT
    return stats


def subsolver_stats(space: StateSpace, handle: SubsolverHandle, state) -> ProofTreeStats:
    """Run ``handle`` on ``state``, memoised per space for deterministic subsolvers."""
    if not handle.deterministic:
        return handle.solve(state, space)
    return space.cached_size(id(handle), state, lambda: handle.solve(state, space))


def hybrid_solve(formula, top_policy: BranchingPolicy, subsolver: SubsolverHandle, ell: int,
                 pure_literals=True, polarity_order=(False, True)) -> ProofTreeStats:
    """``top_policy`` above decision depth ``ell``; the subsolver finishes every open state at depth ``ell``."""
    if ell < 0:
        raise ContractViolation("ell must be >= 0")
    space = space_for(formula, pure_literals)
    stats = ProofTreeStats()
    frontier = lambda s: subsolver_stats(space, subsolver, s)
    sat = _search(space, space.root, top_policy, ell, frontier, stats, tuple(polarity_order), 0)
    stats.outcome = Outcome.SAT if sat else Outcome.UNSAT
    return stats


def expected_hybrid_size(formula, policy: BranchingPolicy, subsolver: SubsolverHandle,
                         ell: int, pure_literals=True) -> float:
    """Exact expected hybrid tree size when ``policy`` is stochastic.

    Uses ``policy.distribution``; memoised by state key.  Satisfiable
    branches make the expectation undefined and raise.
    """
    space = space_for(formula, pure_literals)
    memo = {}

    def size(state):
        if state.status is Status.CONFLICT:
            return 1.0
        if state.status is Status.SATISFIED:
            raise SatisfiableInstanceError("satisfiable branch at %r" % (state.path,))
        if state.decision_depth >= ell:
            sub = subsolver_stats(space, subsolver, state)
            if sub.satisfiable:
                raise SatisfiableInstanceError("subsolver found a model")
            return float(sub.tree_size)
        k = state.key
        if k in memo:
            return memo[k]
        total = 0.0
        for var, p in policy.distribution(state).items():
            if p:
                lo, hi = space.children(state, var)
                total += p * (1.0 + size(lo) + size(hi))
        memo[k] = total
        return total

    return size(space.root)
