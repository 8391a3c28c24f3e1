"""CNF formulas, DIMACS I/O and the DPLL state transition.

Literals are stored the DIMACS way, as nonzero ints (``-3`` is the negation
of variable 3).  :class:`Literal` exists for callers that prefer named
fields; every function here accepts either form.
"""

import enum
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation, DimacsParseError, OracleBoundError

ORACLE_BOUND = 24


class Literal(NamedTuple):
    variable: int
    polarity: bool = True

    @classmethod
    def from_int(cls, lit):
        if lit == 0:
            raise ContractViolation("0 is not a literal")
        return cls(abs(lit), lit > 0)

    def __int__(self):
        return self.variable if self.polarity else -self.variable

    def complement(self):
        return Literal(self.variable, not self.polarity)


def lit_int(lit) -> int:
    if isinstance(lit, Literal):
        if lit.variable < 1:
            raise ContractViolation("variable index must be >= 1")
        return int(lit)
    lit = int(lit)
    if lit == 0:
        raise ContractViolation("0 is not a literal")
    return lit


def make_clause(lits: Iterable) -> "frozenset[int] | None":
    """Normalise a clause; returns None for tautologies."""
    clause = frozenset(lit_int(l) for l in lits)
    for l in clause:
        if -l in clause:
            return None
    return clause


@dataclass(frozen=True)
class Formula:
    num_variables: int
    clauses: tuple

    def __post_init__(self):
        if self.num_variables < 0:
            raise ContractViolation("negative variable count")
        for c in self.clauses:
            for l in c:
                if abs(l) > self.num_variables or l == 0:
                    raise ContractViolation(
                        "literal %d outside 1..%d" % (l, self.num_variables))
                if -l in c:
                    raise ContractViolation("tautological clause %s" % sorted(c))

    @classmethod
    def from_clauses(cls, clauses, num_variables=None):
        """Build from nested int lists, dropping tautologies and repeats within a clause."""
        kept = []
        for lits in clauses:
            c = make_clause(lits)
            if c is not None:
                kept.append(c)
        if num_variables is None:
            num_variables = max((abs(l) for c in kept for l in c), default=0)
        return cls(num_variables, tuple(kept))

    @cached_property
    def identity(self) -> bytes:
        return hashlib.blake2b(to_dimacs(self).encode(), digest_size=16).digest()

    def __len__(self):
        return len(self.clauses)


# ---------------------------------------------------------------- DIMACS


def parse_dimacs(text) -> Formula:
    """Parse DIMACS CNF from a string or an iterable of lines.

    Every clause line must end in ``0``.  A line holding only ``%`` ends the
    clause section (SATLIB files use this).
    """
    lines = text.splitlines() if isinstance(text, str) else text
    nvars = nclauses = None
    clauses = []
    seen = 0
    lineno = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        if line.startswith("%"):
            break
        if line.startswith("p"):
            fields = line.split()
            if nvars is not None:
                raise DimacsParseError("duplicate header", lineno)
            if len(fields) != 4 or fields[1] != "cnf":
                raise DimacsParseError("malformed header %r" % line, lineno)
            try:
                nvars, nclauses = int(fields[2]), int(fields[3])
            except ValueError:
                raise DimacsParseError("malformed header %r" % line, lineno) from None
            if nvars < 0 or nclauses < 0:
                raise DimacsParseError("negative count in header", lineno)
            continue
        if nvars is None:
            raise DimacsParseError("clause before header", lineno)
        try:
            nums = [int(tok) for tok in line.split()]
        except ValueError:
            raise DimacsParseError("non-integer token in %r" % line, lineno) from None
        if nums[-1] != 0:
            raise DimacsParseError("clause missing terminating 0", lineno)
        body = nums[:-1]
        if 0 in body:
            raise DimacsParseError("0 inside clause", lineno)
        for l in body:
            if abs(l) > nvars:
                raise DimacsParseError(
                    "variable index %d out of range (header declares %d)" % (abs(l), nvars),
                    lineno)
        seen += 1
        c = make_clause(body)
        if c is not None:
            clauses.append(c)
    if nvars is None:
        raise DimacsParseError("missing 'p cnf' header", lineno or None)
    if seen != nclauses:
        raise DimacsParseError(
            "header declares %d clauses, found %d" % (nclauses, seen), lineno)
    return Formula(nvars, tuple(clauses))


def _clause_order(l):
    return (abs(l), l < 0)


def clause_to_dimacs(clause) -> str:
    return " ".join(str(l) for l in sorted(clause, key=_clause_order)) + (" 0" if clause else "0")


def to_dimacs(formula: Formula, comments: Sequence[str] = ()) -> str:
    out = ["c %s\n" % c for c in comments]
    out.append("p cnf %d %d\n" % (formula.num_variables, len(formula.clauses)))
    for c in formula.clauses:
        out.append(clause_to_dimacs(c) + "\n")
    return "".join(out)


def read_dimacs(path) -> Formula:
    with open(path) as fh:
        return parse_dimacs(fh)


def write_dimacs(formula: Formula, path, comments=()):
    with open(path, "w", newline="\n") as fh:
        fh.write(to_dimacs(formula, comments))


# ---------------------------------------------------------------- states


class Status(str, enum.Enum):
    OPEN = "open"
    CONFLICT = "conflict"
    SATISFIED = "satisfied"


_EMPTY = frozenset()
_CONFLICT_RESIDUAL = (_EMPTY,)


@dataclass(frozen=True, eq=False)
class SubproblemState:
    """A node of the DPLL tree: what is left of the formula after a run of decisions.

    ``literals`` holds every assigned literal (decisions and implied ones);
    ``path`` holds just the decisions, in the order they were made.
    """

    formula: Formula
    residual: tuple
    literals: frozenset
    path: tuple = ()
    status: Status = Status.OPEN
    _key: bytes = field(default=None, repr=False)

    @property
    def decision_depth(self) -> int:
        return len(self.path)

    depth = decision_depth

    @property
    def decisions(self) -> frozenset:
        return frozenset(self.path)

    @property
    def assigned(self) -> dict:
        return {abs(l): l > 0 for l in self.literals}

    @property
    def is_open(self) -> bool:
        return self.status is Status.OPEN

    @cached_property
    def actions(self) -> tuple:
        """Branching candidates: unassigned variables still occurring in the residual."""
        if self.status is not Status.OPEN:
            return ()
        return tuple(sorted({abs(l) for c in self.residual for l in c}))

    @property
    def key(self) -> "StateKey":
        return state_key(self)

    def __repr__(self):
        return "SubproblemState(depth=%d, status=%s, path=%s, clauses=%d)" % (
            self.decision_depth, self.status.value, list(self.path), len(self.residual))


class StateKey(bytes):
    """16-byte digest of (instance identity, sorted decision literals)."""

    def hex(self, *args):
        return bytes.hex(self, *args)

    def __repr__(self):
        return "StateKey(%s)" % bytes.hex(self)[:12]


def decision_key(formula: Formula, decisions: Iterable[int]) -> StateKey:
    h = hashlib.blake2b(formula.identity, digest_size=16)
    h.update(",".join(map(str, sorted(decisions))).encode())
    return StateKey(h.digest())


def ordered_key(formula: Formula, path: Sequence[int]) -> StateKey:
    """Key that also depends on decision order; used when transpositions must stay apart."""
    h = hashlib.blake2b(formula.identity, digest_size=16, person=b"ordered")
    h.update(",".join(map(str, path)).encode())
    return StateKey(h.digest())


def state_key(state: SubproblemState) -> StateKey:
    if state._key is None:
        object.__setattr__(state, "_key", decision_key(state.formula, state.path))
    return state._key


def _make_true(clauses, true):
    """Drop clauses satisfied by ``true`` and strip literals it falsifies."""
    out = []
    for c in clauses:
        shrink = False
        for l in c:
            if l in true:
                break
            if -l in true:
                shrink = True
        else:
            if shrink:
                c = frozenset(l for l in c if -l not in true)
            out.append(c)
    return out


def _units(clauses):
    units = {next(iter(c)) for c in clauses if len(c) == 1}
    # complementary units: keep the positive one so the negative clause empties
    return {u for u in units if not (u < 0 and -u in units)}


def _pures(clauses):
    lits = set()
    for c in clauses:
        lits.update(c)
    return {l for l in lits if -l not in lits}


def _finish(state, clauses, literals):
    if any(not c for c in clauses):
        return SubproblemState(state.formula, _CONFLICT_RESIDUAL, frozenset(literals),
                               state.path, Status.CONFLICT)
    status = Status.OPEN if clauses else Status.SATISFIED
    return SubproblemState(state.formula, tuple(clauses), frozenset(literals),
                           state.path, status)


def _require_open(state):
    if state.status is not Status.OPEN:
        raise ContractViolation("state is %s, expected open" % state.status.value)


def unit_propagate(state: SubproblemState) -> SubproblemState:
    _require_open(state)
    clauses = list(state.residual)
    literals = set(state.literals)
    while True:
        if any(not c for c in clauses):
            break
        units = _units(clauses)
        if not units:
            break
        literals |= units
        clauses = _make_true(clauses, units)
    return _finish(state, clauses, literals)


def pure_literal_eliminate(state: SubproblemState) -> SubproblemState:
    _require_open(state)
    clauses = list(state.residual)
    literals = set(state.literals)
    while clauses:
        pures = _pures(clauses)
        if not pures:
            break
        literals |= pures
        clauses = _make_true(clauses, pures)
    return _finish(state, clauses, literals)


def _simplify(clauses, literals, pure_literals):
    # unit propagation to fixpoint, then pure literals, repeated until neither fires
    while True:
        if any(not c for c in clauses):
            return clauses, literals
        units = _units(clauses)
        if units:
            literals |= units
            clauses = _make_true(clauses, units)
            continue
        if pure_literals and clauses:
            pures = _pures(clauses)
            if pures:
                literals |= pures
                clauses = _make_true(clauses, pures)
                continue
        return clauses, literals


def simplify(state: SubproblemState, pure_literals=True) -> SubproblemState:
    _require_open(state)
    clauses, literals = _simplify(list(state.residual), set(state.literals), pure_literals)
    return _finish(state, clauses, literals)


def initial_state(formula: Formula, pure_literals=True) -> SubproblemState:
    """Root of the DPLL tree: the formula after propagation with no decisions."""
    raw = SubproblemState(formula, formula.clauses, frozenset())
    clauses, literals = _simplify(list(formula.clauses), set(), pure_literals)
    return _finish(raw, clauses, literals)


def transition(state: SubproblemState, decision, pure_literals=True) -> SubproblemState:
    """Assign ``decision`` and simplify to the joint propagation fixpoint."""
    _require_open(state)
    lit = lit_int(decision)
    if abs(lit) > state.formula.num_variables:
        raise ContractViolation("variable %d not in formula" % abs(lit))
    if lit in state.literals or -lit in state.literals:
        raise ContractViolation("variable %d already assigned" % abs(lit))
    literals = set(state.literals)
    literals.add(lit)
    clauses, literals = _simplify(_make_true(state.residual, (lit,)), literals, pure_literals)
    child = SubproblemState(state.formula, (), frozenset(), state.path + (lit,))
    return _finish(child, clauses, literals)


# ---------------------------------------------------------------- oracle


def _masks(formula):
    pos, neg = [], []
    for c in formula.clauses:
        p = n = 0
        for l in c:
            if l > 0:
                p |= 1 << (l - 1)
            else:
                n |= 1 << (-l - 1)
        pos.append(p)
        neg.append(n)
    return pos, neg


def brute_force_sat(formula: Formula, bound=ORACLE_BOUND) -> bool:
    """Truth-table satisfiability check.  Returns True when satisfiable."""
    n = formula.num_variables
    if n > bound:
        raise OracleBoundError("%d variables exceeds oracle bound %d" % (n, bound))
    if any(not c for c in formula.clauses):
        return False
    if not formula.clauses:
        return True
    pos, neg = _masks(formula)
    total = 1 << n
    chunk = 1 << 18
    for start in range(0, total, chunk):
        a = np.arange(start, min(total, start + chunk), dtype=np.int64)
        ok = np.ones(a.shape, dtype=bool)
        for p, q in zip(pos, neg):
            ok &= ((a & p) != 0) | ((~a & q) != 0)
            if not ok.any():
                break
        if ok.any():
            return True
    return False


def satisfies(formula: Formula, assignment: dict) -> bool:
    return all(any(assignment.get(abs(l)) == (l > 0) for l in c) for c in formula.clauses)
