"""Command-line entry point: ``knuthsynth <command> ...``."""

import argparse
import json
import logging
import os
import sys

from .cnf import read_dimacs, write_dimacs
from .config import RunConfig, preset
from .dpll import SubsolverHandle, dpll_solve, hybrid_solve, make_policy
from .harness import (InstanceSet, bench, build_model, gen_r3sat, hybrid_policy_set,
                      knuth_efficiency_experiment, make_training_set, mean_curve,
                      train_iteration, write_bench_csv, write_curves_csv)
from .knuth import estimate_tree_size
from .mcfs import KnuthSynthesis, write_trace
from .models import save_examples


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else preset("desk")
    changes = {}
    for name in ("ell", "k", "c_puct", "seed", "t", "commit_mix"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    return cfg.replace(**changes) if changes else cfg


def _load_dir(path, name=None) -> InstanceSet:
    files = sorted(f for f in os.listdir(path) if f.endswith(".cnf"))
    s = InstanceSet(name or os.path.basename(os.path.normpath(path)))
    for fn in files:
        s.add(read_dimacs(os.path.join(path, fn)), id=fn[:-4])
    return s


def _instances(args, cfg):
    if args.instances:
        return _load_dir(args.instances)
    return make_training_set(args.vars, args.count, cfg.seed)


def cmd_gen(args):
    if args.unsat:
        s = make_training_set(args.vars, args.count, args.seed)
        paths = s.write(args.out)
        print("wrote %d UNSAT instances (rejection rate %.2f)" % (len(paths), s.rejection_rate))
        return 0
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        seed = args.seed * 1000003 + i
        write_dimacs(gen_r3sat(args.vars, seed),
                     os.path.join(args.out, "r3sat-v%d-%03d.cnf" % (args.vars, i)),
                     ["seed %d" % seed])
    print("wrote %d instances to %s" % (args.count, args.out))
    return 0


def cmd_solve(args):
    f = read_dimacs(args.cnf)
    policy = make_policy(args.policy, args.seed)
    if args.ell is None:
        stats = dpll_solve(f, policy, pure_literals=not args.no_pure)
    else:
        stats = hybrid_solve(f, policy, SubsolverHandle.internal(args.subsolver), args.ell,
                             pure_literals=not args.no_pure)
    out = dict(vars(stats))
    out["outcome"] = stats.outcome.value
    print(json.dumps(out))
    return 0


def cmd_estimate(args):
    f = read_dimacs(args.cnf)
    sub = SubsolverHandle.internal(args.subsolver) if args.ell is not None else None
    est = estimate_tree_size(f, make_policy(args.policy, args.seed), args.ell, sub, args.samples,
                             args.seed, args.estimator)
    print(json.dumps({"mean": est.mean, "samples": est.sample_count, "stderr": est.stderr}))
    return 0


def cmd_search(args):
    cfg = _config(args)
    f = read_dimacs(args.cnf)
    engine = KnuthSynthesis(f, build_model(cfg), cfg.subsolver_handle(), ell=cfg.ell,
                            c_puct=cfg.c_puct, t=cfg.t, commit_mix=cfg.commit_mix, dag=cfg.dag,
                            seed=cfg.seed, calibration_decay=cfg.calibration_decay,
                            requery_prior=cfg.requery_prior, pure_literals=cfg.pure_literals,
                            use_value_model=cfg.use_value_model)
    res = engine.run_episode(cfg.k, instance=os.path.basename(args.cnf))
    if args.trace:
        write_trace(args.trace, res.trace)
    if args.examples:
        save_examples(args.examples, res.examples)
    print(json.dumps({"commitments": res.commitments, "tree_size": res.tree_size,
                      "rollouts": res.rollouts, "expanded": res.expanded,
                      "subsolver_calls": res.subsolver_calls, "value_calls": res.value_calls,
                      "store_size": res.store_size}))
    return 0


def cmd_train(args):
    cfg = _config(args)
    instances = _instances(args, cfg)
    model = build_model(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    for it in range(args.iterations):
        model, examples, m = train_iteration(instances, cfg, model)
        path = os.path.join(cfg.output_dir, "examples-%d.jsonl" % it)
        save_examples(path, examples)
        before = sum(m.before.values()) / max(1, len(m.before))
        after = sum(m.after.values()) / max(1, len(m.after))
        print("iteration %d: %d examples, mean tree size %.2f -> %.2f, %d failures"
              % (it, len(examples), before, after, len(m.failures)))
    return 0


def cmd_bench(args):
    cfg = _config(args)
    instances = _instances(args, cfg)
    policies = hybrid_policy_set(cfg, build_model(cfg) if cfg.model != "uniform" else None)
    records, summary = bench(policies, instances, cfg, baseline="uniform+subsolver",
                             exact=args.exact)
    write_bench_csv(args.out, records, summary)
    for s in summary:
        print("%-24s mean %10.2f  reduction %.3f" % (s["policy"], s["mean_tree_size"],
                                                    s["reduction_vs_baseline"]))
    return 0


def cmd_knuth_efficiency(args):
    cfg = _config(args)
    instances = _instances(args, cfg)
    res = knuth_efficiency_experiment(instances, cfg, budget=args.budget)
    write_curves_csv(args.out, res)
    for variant in ("knuth", "full"):
        curves = [c for c in res.curves if c.variant == variant]
        pts = mean_curve(curves, sorted({b for c in curves for b in c.budget}))
        if pts:
            print("%s: final mean normalized size %.3f" % (variant, pts[-1][1]))
    print("success rate %.2f over %d informative instances"
          % (res.success_rate, len(res.informative)))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="knuthsynth")
    p.add_argument("-v", "--verbose", action="store_true")
    sp = p.add_subparsers(dest="command", required=True)

    g = sp.add_parser("gen", help="generate random 3-SAT instances")
    g.add_argument("--vars", type=int, required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--unsat", action="store_true", help="keep only verified UNSAT instances")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    s = sp.add_parser("solve", help="DPLL or hybrid solve of one instance")
    s.add_argument("cnf")
    s.add_argument("--policy", default="jw")
    s.add_argument("--ell", type=int)
    s.add_argument("--subsolver", default="jw")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-pure", action="store_true", help="disable pure-literal elimination")
    s.set_defaults(fn=cmd_solve)

    e = sp.add_parser("estimate", help="Knuth tree-size estimate")
    e.add_argument("cnf")
    e.add_argument("--policy", default="jw")
    e.add_argument("--ell", type=int)
    e.add_argument("--subsolver", default="jw")
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--estimator", choices=("node", "leaf"), default="node")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_estimate)

    def common(q, instances=True):
        q.add_argument("--config")
        q.add_argument("--ell", type=int)
        q.add_argument("--k", type=int)
        q.add_argument("--c-puct", dest="c_puct", type=float)
        q.add_argument("--t", type=float)
        q.add_argument("--commit-mix", dest="commit_mix", type=float)
        q.add_argument("--seed", type=int)
        if instances:
            q.add_argument("--instances", help="directory of .cnf files")
            q.add_argument("--vars", type=int, default=10)
            q.add_argument("--count", type=int, default=10)

    m = sp.add_parser("search", help="one search episode with trace export")
    m.add_argument("cnf")
    common(m, instances=False)
    m.add_argument("--trace")
    m.add_argument("--examples")
    m.set_defaults(fn=cmd_search)

    t = sp.add_parser("train", help="training iterations")
    common(t)
    t.add_argument("--iterations", type=int, default=1)
    t.set_defaults(fn=cmd_train)

    b = sp.add_parser("bench", help="benchmark hybrid policies to CSV")
    common(b)
    b.add_argument("--exact", action="store_true", help="exact expectation over policy ties")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)

    k = sp.add_parser("knuth-efficiency", help="probe vs full-tree rollouts")
    common(k)
    k.add_argument("--budget", type=int, default=200000)
    k.add_argument("--out", required=True)
    k.set_defaults(fn=cmd_knuth_efficiency)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
