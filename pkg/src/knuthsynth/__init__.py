"""Knuth Synthesis: learning DPLL branching policies that shrink UNSAT proof trees."""

from .cnf import (Formula, Literal, StateKey, Status, SubproblemState, brute_force_sat,
                  initial_state, parse_dimacs, pure_literal_eliminate, read_dimacs, state_key,
                  to_dimacs, transition, unit_propagate, write_dimacs)
from .config import RunConfig
from .dpll import (BranchingPolicy, ProofTreeStats, SubsolverHandle, SubsolverKind, dpll_solve,
                   fixed_order_policy, hybrid_solve, jw_policy, run_external_subsolver,
                   uniform_policy)
from .errors import *  # noqa: F401,F403
from .harness import (gen_r3sat, knuth_efficiency_experiment, make_training_set,
                      train_iteration, evaluate_incumbent, bench)
from .knuth import (KnuthPath, SizeEstimate, depth_update_value, estimate_tree_size,
                    leaf_estimate_from_path, node_estimate_from_path, sample_path)
from .mcfs import (DepthCalibration, ForestStore, KnuthSynthesis, SearchNode, backup,
                   commit_action, run_episode, share_prior, step_policy_gamma,
                   tree_policy_alpha)
from .models import (TableModel, TrainingExample, fit_table, jw_prior, table_value,
                     uniform_prior)

__version__ = "0.1.0"
