"""Knuth's random-probe estimate of DPLL proof-tree size.

A probe walks from the root, letting the branching policy pick the variable
and a fair coin pick the polarity, until it hits a conflict or (when a depth
bound is given) hands the open state to a subsolver.  For a probe of length
``L`` ending in weight ``T`` (1 for a conflict, the subsolver's tree size
otherwise) the node at depth ``d`` on the probe gets::

    2**(L - d) * T + 2**(L - d) - 1

which is an unbiased estimate of the size of the tree below it.  Integer
weights are kept as Python ints so large depths never overflow.
"""

import enum
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .cnf import Status
from .dpll import BranchingPolicy, SubsolverHandle, space_for, subsolver_stats
from .errors import ContractViolation, SatisfiableInstanceError


class Terminal(str, enum.Enum):
    CONFLICT = "conflict"
    SUBSOLVER = "subsolver"
    SATISFIED = "satisfied"


@dataclass
class KnuthPath:
    decisions: list = field(default_factory=list)  # (state key, variable, polarity)
    terminal: Terminal = Terminal.CONFLICT
    t_sub: object = 1

    @property
    def length(self) -> int:
        return len(self.decisions)

    @property
    def satisfiable(self):
        return self.terminal is Terminal.SATISFIED


def sample_path(formula, policy: BranchingPolicy, ell: Optional[int] = None,
                subsolver: Optional[SubsolverHandle] = None, seed=None, rng=None,
                pure_literals=True) -> KnuthPath:
    """Draw one random root-to-leaf probe.  ``rng`` needs only ``getrandbits``."""
    if ell is not None and subsolver is None:
        raise ContractViolation("a depth bound needs a subsolver")
    space = space_for(formula, pure_literals)
    if rng is None:
        rng = random.Random(seed)
    path = KnuthPath()
    state = space.root
    while True:
        if state.status is Status.CONFLICT:
            path.terminal, path.t_sub = Terminal.CONFLICT, 1
            return path
        if state.status is Status.SATISFIED:
            path.terminal, path.t_sub = Terminal.SATISFIED, None
            return path
        if ell is not None and state.decision_depth >= ell:
            sub = subsolver_stats(space, subsolver, state)
            if sub.satisfiable:
                path.terminal, path.t_sub = Terminal.SATISFIED, None
            else:
                path.terminal, path.t_sub = Terminal.SUBSOLVER, sub.tree_size
            return path
        var = policy(state)
        polarity = bool(rng.getrandbits(1))
        path.decisions.append((state.key, var, polarity))
        state = space.child(state, var if polarity else -var)


def _weight(path):
    if path.terminal is Terminal.SATISFIED:
        raise SatisfiableInstanceError("tree size is undefined on a satisfiable branch")
    return 1 if path.terminal is Terminal.CONFLICT else path.t_sub


def depth_update_value(path: KnuthPath, d: int):
    """Backup value for the probe's node at depth ``d``."""
    if not 0 <= d <= path.length:
        raise ContractViolation("depth %d outside 0..%d" % (d, path.length))
    t = _weight(path)
    scale = 1 << (path.length - d)
    return scale * t + scale - 1


def node_estimate_from_path(path: KnuthPath):
    return depth_update_value(path, 0)


def leaf_estimate_from_path(path: KnuthPath):
    _weight(path)
    return 1 << path.length


@dataclass
class SizeEstimate:
    """Running mean and variance (Welford)."""

    mean: float = 0.0
    sample_count: int = 0
    variance_accumulator: float = 0.0

    def add(self, x):
        self.sample_count += 1
        delta = x - self.mean
        self.mean += delta / self.sample_count
        self.variance_accumulator += delta * (x - self.mean)

    def merge(self, other: "SizeEstimate") -> "SizeEstimate":
        n = self.sample_count + other.sample_count
        if n == 0:
            return SizeEstimate()
        delta = other.mean - self.mean
        mean = self.mean + delta * other.sample_count / n
        m2 = (self.variance_accumulator + other.variance_accumulator
              + delta * delta * self.sample_count * other.sample_count / n)
        return SizeEstimate(mean, n, m2)

    @property
    def variance(self):
        if self.sample_count < 2:
            return 0.0
        return self.variance_accumulator / (self.sample_count - 1)

    @property
    def stderr(self):
        if self.sample_count == 0:
            return math.inf
        return math.sqrt(self.variance / self.sample_count)


def estimate_tree_size(formula, policy, ell=None, subsolver=None, k=1000, seed=None,
                       estimator="node", pure_literals=True) -> SizeEstimate:
    """Mean of ``k`` independent probe estimates (``estimator`` is ``node`` or ``leaf``)."""
    if k < 1:
        raise ContractViolation("need at least one sample")
    space = space_for(formula, pure_literals)
    rng = random.Random(seed)
    f = node_estimate_from_path if estimator == "node" else leaf_estimate_from_path
    est = SizeEstimate()
    for _ in range(k):
        path = sample_path(space, policy, ell, subsolver, rng=rng)
        if path.satisfiable:
            raise SatisfiableInstanceError("probe reached a satisfying assignment")
        est.add(f(path))
    return est
