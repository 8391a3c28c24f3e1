"""Prior and value models used by the forest search.

A prior is a tuple of probabilities aligned with ``state.actions`` (the
branching candidates in ascending variable order).  A value is a predicted
log2 subtree size.  :class:`TableModel` is the in-process learner; anything
else can be plugged in through :mod:`knuthsynth.bridge`.
"""

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Optional

from .dpll import jw_scores, subsolver_stats
from .errors import ContractViolation, DataError


def _actions(state):
    if not state.actions:
        raise ContractViolation("no unassigned variables")
    return state.actions


def uniform_distribution(variables):
    if not variables:
        raise ContractViolation("no unassigned variables")
    p = 1.0 / len(variables)
    return tuple(p for _ in variables)


def jw_distribution(clauses, variables):
    """JW scores normalised to a distribution over ``variables``; all-zero scores give uniform."""
    if not variables:
        raise ContractViolation("no unassigned variables")
    scores = jw_scores(clauses, variables)
    total = math.fsum(scores.values())
    if total <= 0:
        return uniform_distribution(variables)
    return tuple(scores[v] / total for v in variables)


def uniform_prior(state):
    return uniform_distribution(_actions(state))


def jw_prior(state):
    return jw_distribution(state.residual, _actions(state))


class Model:
    """Base prior/value model.  ``has_value`` says whether :meth:`value` means anything."""

    name = "model"
    has_value = False

    def prior(self, state):
        return uniform_prior(state)

    def value(self, state) -> float:
        return 0.0

    def q_values(self, state):
        return None


class UniformModel(Model):
    name = "uniform"


class JWModel(Model):
    name = "jw"

    def prior(self, state):
        return jw_prior(state)


class ConstantValueModel(Model):
    """Uniform prior plus a fixed log2 prediction."""

    has_value = True

    def __init__(self, log2_size=0.0, fallback=None):
        self.log2_size = float(log2_size)
        self.fallback = fallback or UniformModel()
        self.name = "constant(%g)" % self.log2_size

    def prior(self, state):
        return self.fallback.prior(state)

    def value(self, state):
        return self.log2_size


class ExactValueModel(Model):
    """Value model that asks the subsolver for the true answer.  Test oracle."""

    name = "exact"
    has_value = True

    def __init__(self, space, subsolver, fallback=None):
        self.space = space
        self.subsolver = subsolver
        self.fallback = fallback or UniformModel()

    def prior(self, state):
        return self.fallback.prior(state)

    def value(self, state):
        return math.log2(subsolver_stats(self.space, self.subsolver, state).tree_size)


# ---------------------------------------------------------------- training data


@dataclass
class TrainingExample:
    """One committed decision (counts and Q filled) or one value record (log2_size filled)."""

    key: str
    actions: tuple
    counts: Optional[tuple] = None
    q: Optional[tuple] = None
    log2_size: Optional[float] = None
    depth: int = 0
    weight: float = 1.0
    instance: str = ""

    def __post_init__(self):
        self.actions = tuple(self.actions)
        if self.counts is not None:
            self.counts = tuple(float(c) for c in self.counts)
            if len(self.counts) != len(self.actions):
                raise DataError("count vector length %d != %d actions for key %s"
                                % (len(self.counts), len(self.actions), self.key))
        if self.q is not None:
            self.q = tuple(None if v is None else float(v) for v in self.q)

    def to_json(self):
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def save_examples(path, examples):
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def load_examples(path):
    with open(path) as fh:
        return [TrainingExample.from_json(line) for line in fh if line.strip()]


def normalise_counts(counts):
    total = math.fsum(counts)
    if total <= 0:
        return uniform_distribution(counts)
    return tuple(c / total for c in counts)


@dataclass
class TableEntry:
    actions: tuple
    prior: Optional[tuple] = None
    q: Optional[tuple] = None
    log2_size: Optional[float] = None
    policy_weight: float = 0.0
    value_weight: float = 0.0
    depth: int = 0


class TableModel(Model):
    """Per-state lookup table fitted from search statistics, with a fallback prior."""

    name = "table"
    has_value = True

    def __init__(self, entries=None, fallback: Optional[Model] = None, default_value=0.0):
        self.entries = dict(entries or {})
        self.fallback = fallback or UniformModel()
        self.default_value = default_value

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return _hex(key) in self.entries

    def entry(self, state) -> Optional[TableEntry]:
        return self.entries.get(_hex(state.key))

    def prior(self, state):
        e = self.entry(state)
        if e is None or e.prior is None:
            return self.fallback.prior(state)
        if e.actions == state.actions:
            return e.prior
        stored = dict(zip(e.actions, e.prior))
        raw = [stored.get(v, 0.0) for v in state.actions]
        if math.fsum(raw) <= 0:
            return self.fallback.prior(state)
        return normalise_counts(raw)

    def q_values(self, state):
        e = self.entry(state)
        if e is None or e.q is None:
            return None
        stored = dict(zip(e.actions, e.q))
        return tuple(stored.get(v) for v in state.actions)

    def value(self, state):
        return table_value(self, state)

    def to_examples(self):
        out = []
        for key, e in sorted(self.entries.items()):
            if e.prior is not None:
                out.append(TrainingExample(key, e.actions, e.prior, e.q, None, e.depth,
                                           e.policy_weight))
            if e.log2_size is not None:
                out.append(TrainingExample(key, e.actions, None, None, e.log2_size, e.depth,
                                           e.value_weight))
        return out


def _hex(key):
    return key if isinstance(key, str) else bytes(key).hex()


def _wmean(pairs):
    """Weighted mean of (weight, value) pairs; a lone pair is returned verbatim."""
    if len(pairs) == 1:
        return pairs[0][1]
    total = math.fsum(w for w, _ in pairs)
    return math.fsum(w * v for w, v in pairs) / total


def fit_table(examples, fallback: Optional[Model] = None, default_value=0.0) -> TableModel:
    """Merge training examples by state key into a :class:`TableModel`.

    Count vectors and log2 sizes are weighted means over the examples of a
    key; Q vectors are averaged per action over the examples that have a
    value for it.
    """
    groups = defaultdict(list)
    for ex in examples:
        groups[ex.key].append(ex)
    entries = {}
    for key, exs in groups.items():
        actions = exs[0].actions
        for ex in exs:
            if ex.actions != actions:
                raise DataError("inconsistent action vectors for key %s: %s vs %s"
                                % (key, list(actions), list(ex.actions)))
        pol = [ex for ex in exs if ex.counts is not None]
        val = [ex for ex in exs if ex.log2_size is not None]
        e = TableEntry(actions, depth=exs[0].depth)
        if pol:
            e.policy_weight = math.fsum(ex.weight for ex in pol)
            e.prior = tuple(_wmean([(ex.weight, ex.counts[i]) for ex in pol])
                            for i in range(len(actions)))
            qs = []
            for i in range(len(actions)):
                pairs = [(ex.weight, ex.q[i]) for ex in pol
                         if ex.q is not None and ex.q[i] is not None]
                qs.append(_wmean(pairs) if pairs else None)
            e.q = tuple(qs)
        if val:
            e.value_weight = math.fsum(ex.weight for ex in val)
            e.log2_size = _wmean([(ex.weight, ex.log2_size) for ex in val])
        entries[key] = e
    return TableModel(entries, fallback, default_value)


def table_value(model: TableModel, state) -> float:
    e = model.entry(state)
    if e is None or e.log2_size is None:
        return model.default_value
    return e.log2_size
