"""Instance generation, training iterations, evaluation and experiments."""

import csv
import logging
import math
import os
import random
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from .cnf import Formula, Status, brute_force_sat, to_dimacs
from .config import RunConfig
from .dpll import (BranchingPolicy, JWPolicy, SubsolverHandle, UniformPolicy, dpll_solve,
                   expected_hybrid_size, hybrid_solve)
from .errors import ContractViolation, KnuthSynthError
from .mcfs import IncumbentPolicy, KnuthSynthesis
from .models import JWModel, Model, TableModel, UniformModel, fit_table

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 20


# ---------------------------------------------------------------- instances


def r3sat_clause_count(v):
    return round(4.258 * v + 58.26 * v ** (-2.0 / 3.0))


def gen_r3sat(v, seed=None) -> Formula:
    """Random 3-SAT at the phase-transition clause count, no repeated clauses."""
    if v < 3:
        raise ContractViolation("need at least 3 variables")
    rng = random.Random(seed)
    m = r3sat_clause_count(v)
    if m > math.comb(v, 3) * 8:
        raise ContractViolation("%d distinct clauses do not exist over %d variables" % (m, v))
    seen = set()
    clauses = []
    variables = range(1, v + 1)
    while len(clauses) < m:
        vs = rng.sample(variables, 3)
        c = frozenset(x if rng.getrandbits(1) else -x for x in vs)
        if c in seen:
            continue
        seen.add(c)
        clauses.append(c)
    return Formula(v, tuple(clauses))


def is_unsat(formula: Formula) -> bool:
    if formula.num_variables <= BRUTE_FORCE_LIMIT:
        return not brute_force_sat(formula)
    return not dpll_solve(formula, JWPolicy()).satisfiable


@dataclass
class InstanceSet:
    name: str
    formulas: List[Formula] = field(default_factory=list)
    meta: List[dict] = field(default_factory=list)
    attempts: int = 0
    rejected: int = 0

    def __len__(self):
        return len(self.formulas)

    def __iter__(self):
        return iter(zip(self.meta, self.formulas))

    @property
    def rejection_rate(self):
        return self.rejected / self.attempts if self.attempts else 0.0

    def add(self, formula, **meta):
        meta.setdefault("id", "%s-%03d" % (self.name, len(self.formulas)))
        meta.setdefault("vars", formula.num_variables)
        self.formulas.append(formula)
        self.meta.append(meta)

    @classmethod
    def from_formulas(cls, name, formulas):
        s = cls(name)
        for f in formulas:
            s.add(f, outcome="unsatisfiable" if is_unsat(f) else "satisfiable")
        return s

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        paths = []
        for meta, f in self:
            p = os.path.join(directory, meta["id"] + ".cnf")
            with open(p, "w") as fh:
                fh.write(to_dimacs(f, ["seed %s" % meta.get("seed")]))
            paths.append(p)
        return paths


class GenerationBudgetError(KnuthSynthError):
    def __init__(self, message, partial):
        self.partial = partial
        super().__init__(message)


def make_training_set(v, count, seed=0, max_attempts=None, name=None) -> InstanceSet:
    """Draw R3SAT instances until ``count`` verified-UNSAT ones are found."""
    out = InstanceSet(name or "r3sat-v%d" % v)
    if max_attempts is None:
        max_attempts = 100 * count + 100
    i = 0
    while len(out) < count:
        if out.attempts >= max_attempts:
            raise GenerationBudgetError(
                "only %d of %d UNSAT instances after %d attempts (rejection rate %.2f)"
                % (len(out), count, out.attempts, out.rejection_rate), out)
        inst_seed = seed * 1000003 + i
        i += 1
        f = gen_r3sat(v, inst_seed)
        out.attempts += 1
        if not is_unsat(f):
            out.rejected += 1
            continue
        out.add(f, seed=inst_seed, outcome="unsatisfiable")
    return out


# ---------------------------------------------------------------- policies from models


def _hash_rng(key, seed):
    return random.Random(int.from_bytes(bytes(key)[:8], "big") ^ (seed or 0))


class ModelArgmaxPolicy(BranchingPolicy):
    """Argmax of the model prior; ties to the lower model Q, then a per-state hashed draw."""

    def __init__(self, model: Model, seed=0):
        self.model = model
        self.seed = seed
        self.name = "argmax(%s)" % model.name

    def candidates(self, state):
        prior = self.model.prior(state)
        top = max(prior)
        idx = [i for i, p in enumerate(prior) if p == top]
        q = self.model.q_values(state)
        if q is not None and len(idx) > 1:
            qs = [q[i] if q[i] is not None else math.inf for i in idx]
            low = min(qs)
            idx = [i for i, x in zip(idx, qs) if x == low]
        return [state.actions[i] for i in idx]

    def choose(self, state):
        c = self.candidates(state)
        return c[0] if len(c) == 1 else _hash_rng(state.key, self.seed).choice(c)

    def distribution(self, state):
        c = self.candidates(state)
        return {a: 1.0 / len(c) for a in c}


def build_model(config: RunConfig) -> Model:
    if config.model == "jw":
        return JWModel()
    if config.model == "table":
        from .models import load_examples
        if not config.model_path:
            raise ContractViolation("table model needs model_path")
        return fit_table(load_examples(config.model_path), UniformModel())
    return UniformModel()


# ---------------------------------------------------------------- evaluation


@dataclass
class BenchRecord:
    instance: str
    policy: str
    tree_size: float
    decisions: int = 0
    wall_time: float = 0.0
    subsolver_calls: int = 0
    error: str = ""

    FIELDS = ("instance", "policy", "tree_size", "decisions", "wall_time", "subsolver_calls",
              "error")

    def __post_init__(self):
        if not self.error and self.tree_size < 1:
            raise ContractViolation("tree size must be >= 1")


def _run_policy(name, policy, meta, formula, subsolver, ell, exact, pure):
    t0 = time.perf_counter()
    try:
        if exact:
            size = expected_hybrid_size(formula, policy, subsolver, ell, pure)
            rec = BenchRecord(meta["id"], name, size)
        else:
            st = hybrid_solve(formula, policy, subsolver, ell, pure)
            if st.satisfiable:
                raise KnuthSynthError("instance is satisfiable")
            rec = BenchRecord(meta["id"], name, st.tree_size, st.decisions,
                              subsolver_calls=st.subsolver_calls)
    except KnuthSynthError as exc:
        log.warning("%s on %s failed: %s", name, meta["id"], exc)
        rec = BenchRecord(meta["id"], name, math.nan, error=str(exc) or type(exc).__name__)
    rec.wall_time = time.perf_counter() - t0
    return rec


def evaluate_incumbent(model: Model, instances: InstanceSet, config: RunConfig,
                       exact=False, name=None) -> List[BenchRecord]:
    """Hybrid tree size of the model-argmax policy above depth ``ell`` on each instance.

    With ``exact`` the record holds the expectation over the policy's
    remaining ties instead of one tie-broken run.
    """
    policy = ModelArgmaxPolicy(model, config.seed)
    sub = config.subsolver_handle()
    return [_run_policy(name or policy.name, policy, meta, f, sub, config.ell, exact,
                        config.pure_literals) for meta, f in instances]


def uniform_baseline(instances, config, exact=True, name="uniform+subsolver"):
    """The uniform-top-policy hybrid, exact expectation by default."""
    policy = UniformPolicy(config.seed)
    sub = config.subsolver_handle()
    return [_run_policy(name, policy, meta, f, sub, config.ell, exact, config.pure_literals)
            for meta, f in instances]


# ---------------------------------------------------------------- training


@dataclass
class IterationMetrics:
    instances: int = 0
    failures: List[str] = field(default_factory=list)
    examples: int = 0
    value_records: int = 0
    before: Dict[str, float] = field(default_factory=dict)
    after: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0


def train_iteration(instances: InstanceSet, config: RunConfig,
                    incumbent_model: Optional[Model] = None, evaluate=True, exact=True):
    """One round: a search episode per instance, then a table fitted to all examples.

    Returns ``(model, examples, metrics)``.  With no instances the incumbent
    comes back unchanged.
    """
    incumbent_model = incumbent_model or UniformModel()
    metrics = IterationMetrics(instances=len(instances))
    if len(instances) == 0:
        return incumbent_model, [], metrics
    t0 = time.perf_counter()
    sub = config.subsolver_handle()
    examples = []
    for i, (meta, f) in enumerate(instances):
        engine = KnuthSynthesis(
            f, incumbent_model, sub, ell=config.ell, c_puct=config.c_puct, t=config.t,
            commit_mix=config.commit_mix, dag=config.dag, seed=config.seed * 7919 + i,
            calibration_decay=config.calibration_decay, requery_prior=config.requery_prior,
            pure_literals=config.pure_literals, use_value_model=config.use_value_model)
        try:
            res = engine.run_episode(config.k, instance=meta["id"])
        except KnuthSynthError as exc:
            log.warning("episode on %s failed: %s", meta["id"], exc)
            metrics.failures.append(meta["id"])
            continue
        examples.extend(res.examples)
    if len(metrics.failures) * 2 > len(instances):
        raise KnuthSynthError("%d of %d episodes failed" % (len(metrics.failures), len(instances)))
    fallback = incumbent_model if not isinstance(incumbent_model, TableModel) else \
        incumbent_model.fallback
    model = fit_table(examples, fallback)
    metrics.examples = sum(1 for e in examples if e.counts is not None)
    metrics.value_records = sum(1 for e in examples if e.log2_size is not None)
    if evaluate:
        for rec in evaluate_incumbent(incumbent_model, instances, config, exact):
            metrics.before[rec.instance] = rec.tree_size
        for rec in evaluate_incumbent(model, instances, config, exact):
            metrics.after[rec.instance] = rec.tree_size
    metrics.wall_time = time.perf_counter() - t0
    return model, examples, metrics


# ---------------------------------------------------------------- knuth efficiency


@dataclass
class Curve:
    instance: str
    variant: str
    budget: List[int] = field(default_factory=list)
    size: List[float] = field(default_factory=list)
    normalized: List[float] = field(default_factory=list)

    def budget_to_reach(self, level):
        for b, v in zip(self.budget, self.normalized):
            if v <= level:
                return b
        return math.inf


def _incumbent_size(engine, sub, ell, seed, draws=16):
    """Mean hybrid tree size of the incumbent over ``draws`` tie-breaking seeds."""
    total = 0
    for j in range(draws):
        policy = IncumbentPolicy(engine.store, UniformModel(), seed * 1009 + j)
        total += hybrid_solve(engine.space, policy, sub, ell).tree_size
    return total / draws


def run_curve(formula, variant, config: RunConfig, budget, checkpoints=None, instance="",
              seed=0):
    """Anytime search from the root only, recording the incumbent as budget is spent.

    The incumbent is measured after every rollout, or only when a budget
    checkpoint is crossed if ``checkpoints`` is given.

    ``variant`` is ``knuth`` (one probe per rollout) or ``full`` (every
    rollout evaluates the whole hybrid tree under the tree policy).
    """
    sub = config.subsolver_handle()
    engine = KnuthSynthesis(formula, UniformModel(), sub, ell=config.ell, c_puct=config.c_puct,
                            t=config.t, dag=config.dag, seed=seed,
                            calibration_decay=config.calibration_decay,
                            pure_literals=config.pure_literals, use_value_model=False)
    root = engine.space.root
    curve = Curve(instance, variant)
    curve.budget.append(0)
    curve.size.append(_incumbent_size(engine, sub, config.ell, seed))
    if root.status is not Status.OPEN or config.ell == 0:
        return curve
    engine.ensure_root(root, ())
    step = engine.rollout if variant == "knuth" else engine.full_rollout
    marks = sorted(checkpoints) if checkpoints is not None else None
    j = 0
    while engine.expanded < budget:
        step(root, ())
        if marks is not None:
            if j >= len(marks) or engine.expanded < marks[j]:
                continue
            while j < len(marks) and engine.expanded >= marks[j]:
                j += 1
        curve.budget.append(engine.expanded)
        curve.size.append(_incumbent_size(engine, sub, config.ell, seed))
    if curve.budget[-1] != engine.expanded:
        curve.budget.append(engine.expanded)
        curve.size.append(_incumbent_size(engine, sub, config.ell, seed))
    return curve


def normalise_curves(curves):
    """Min-max normalise a group of curves for one instance in place; returns (lo, hi)."""
    lo = min(min(c.size) for c in curves)
    hi = max(max(c.size) for c in curves)
    for c in curves:
        if hi == lo:
            c.normalized = [0.0 for _ in c.size]
        else:
            c.normalized = [(s - lo) / (hi - lo) for s in c.size]
    return lo, hi


@dataclass
class EfficiencyResult:
    curves: List[Curve] = field(default_factory=list)
    rows: List[dict] = field(default_factory=list)

    @property
    def informative(self):
        return [r for r in self.rows if not r["degenerate"]]

    @property
    def success_rate(self):
        """Fraction of all runs that succeeded; degenerate runs count as failures."""
        return sum(r["success"] for r in self.rows) / len(self.rows) if self.rows else math.nan


def knuth_efficiency_experiment(instances: InstanceSet, config: RunConfig, budget=200000,
                                checkpoints=None, level=0.5, ratio=0.5) -> EfficiencyResult:
    """Compare Knuth probes against full-tree rollouts on expanded-node budget.

    For each instance both variants run from the root with the same seed.
    Their curves are normalised by the instance's min and max incumbent
    size.  A run succeeds when the probe variant reaches ``level`` with at
    most ``ratio`` times the budget the full variant needs.  An instance
    whose incumbent never changes, or starts at or below ``level``, is
    reported as degenerate and never counts as a success.
    """
    res = EfficiencyResult()
    for i, (meta, f) in enumerate(instances):
        seed = config.seed * 7919 + i
        ck = run_curve(f, "knuth", config, budget, checkpoints, meta["id"], seed)
        cf = run_curve(f, "full", config, budget, checkpoints, meta["id"], seed)
        lo, hi = normalise_curves([ck, cf])
        bk, bf = ck.budget_to_reach(level), cf.budget_to_reach(level)
        res.curves.extend([ck, cf])
        # nothing to compare when the starting incumbent is already at the target level
        degenerate = hi == lo or ck.normalized[0] <= level
        res.rows.append({
            "instance": meta["id"], "min": lo, "max": hi, "knuth_budget": bk,
            "full_budget": bf, "degenerate": degenerate,
            "success": not degenerate and bk <= ratio * bf})
    return res


def mean_curve(curves, grid):
    """Step-interpolated mean and 95% band of normalised curves on a budget grid."""
    out = []
    for g in grid:
        vals = []
        for c in curves:
            v = None
            for b, y in zip(c.budget, c.normalized):
                if b > g:
                    break
                v = y
            if v is not None:
                vals.append(v)
        if not vals:
            continue
        m = statistics.fmean(vals)
        half = 1.96 * statistics.stdev(vals) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
        out.append((g, m, m - half, m + half, len(vals)))
    return out


def write_curves_csv(path, result: EfficiencyResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "variant", "budget", "tree_size", "normalized"])
        for c in result.curves:
            for b, s, n in zip(c.budget, c.size, c.normalized):
                w.writerow([c.instance, c.variant, b, s, "%.6f" % n])


# ---------------------------------------------------------------- bench


def bench(policies: Dict[str, BranchingPolicy], instances: InstanceSet, config: RunConfig,
          baseline=None, exact=False):
    """Every policy on every instance.  Returns ``(records, summary rows)``.

    Summary rows hold the mean over completed cells and the ratio of the
    baseline's mean to the policy's mean (values above 1 mean smaller trees).
    """
    if not policies:
        return [], []
    sub = config.subsolver_handle()
    records = []
    for meta, f in instances:
        for name, pol in policies.items():
            records.append(_run_policy(name, pol, meta, f, sub, config.ell, exact,
                                       config.pure_literals))
    baseline = baseline or next(iter(policies))
    means = {}
    for name in policies:
        vals = [r.tree_size for r in records if r.policy == name and not r.error]
        means[name] = statistics.fmean(vals) if vals else math.nan
    summary = []
    for name in policies:
        m = means[name]
        summary.append({"policy": name, "mean_tree_size": m,
                        "completed": sum(1 for r in records if r.policy == name and not r.error),
                        "reduction_vs_baseline": means[baseline] / m if m else math.nan})
    return records, summary


def write_bench_csv(path, records, summary=()):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BenchRecord.FIELDS)
        for r in records:
            d = asdict(r)
            w.writerow([d[k] for k in BenchRecord.FIELDS])
        for s in summary:
            w.writerow(["__summary__", s["policy"], s["mean_tree_size"], "", "",
                        "", "reduction=%.4f" % s["reduction_vs_baseline"]])


def hybrid_policy_set(config: RunConfig, model: Optional[Model] = None):
    """Default bench line-up: uniform and JW top policies plus an optional model."""
    out = {"uniform+subsolver": UniformPolicy(config.seed), "jw+subsolver": JWPolicy()}
    if model is not None:
        out["%s+subsolver" % model.name] = ModelArgmaxPolicy(model, config.seed)
    return out


__all__ = [
    "BenchRecord", "Curve", "EfficiencyResult", "GenerationBudgetError", "InstanceSet",
    "IterationMetrics", "ModelArgmaxPolicy", "bench", "build_model", "evaluate_incumbent",
    "gen_r3sat", "hybrid_policy_set", "is_unsat", "knuth_efficiency_experiment",
    "make_training_set", "mean_curve", "normalise_curves", "planted_formula",
    "r3sat_clause_count", "run_curve",
    "train_iteration", "uniform_baseline", "write_bench_csv", "write_curves_csv",
]


# ---------------------------------------------------------------- planted instances


def planted_formula(seed=None, num_variables=10):
    """Two-variable contradiction hidden among satisfiable padding.

    The core is all four 2-clauses over a pair of variables, so branching
    on either of them first gives a three-node proof.  The remaining
    variables carry cyclic not-all-equal triples, which never propagate into
    the core and are never pure.  Variable labels and polarities are
    shuffled by ``seed``.  Returns ``(formula, short_proof_variables)``.
    """
    if num_variables < 5:
        raise ContractViolation("need at least 5 variables (2 core + 3 padding)")
    rng = random.Random(seed)
    label = list(range(1, num_variables + 1))
    rng.shuffle(label)
    flip = [1 if rng.getrandbits(1) else -1 for _ in label]

    def lit(i, positive):
        return (label[i] if positive else -label[i]) * flip[i]

    a, b = 0, 1
    clauses = [[lit(a, s), lit(b, u)] for s in (True, False) for u in (True, False)]
    pad = list(range(2, num_variables))
    m = len(pad)
    for j in range(m):
        tri = [pad[j], pad[(j + 1) % m], pad[(j + 2) % m]]
        clauses.append([lit(i, True) for i in tri])
        clauses.append([lit(i, False) for i in tri])
    return Formula.from_clauses(clauses, num_variables), frozenset((label[a], label[b]))
