"""Tabular laboratory for top-p temporal-difference distillation.

Soft Bellman solvers and occupancy oracles, nucleus-restricted operators
with numerically certified contraction/sandwich/gap bounds, and a projected
inverse soft-Q trainer with teacher-data generation and evaluation.
"""

from .corpus import NgramTeacher, SparsityProfile, ngram_to_mdp, sparsity_profile, train_ngram
from .distill import (
    EvalReport,
    TrajectoryDataset,
    ablate_p,
    bellman_distill,
    evaluate_student,
    generate_teacher_dataset,
    lm_objective,
)
from .iql import (
    IqlConfig,
    MaskedQ,
    MetricsLog,
    ObjectiveBreakdown,
    TransitionBatch,
    apply_mask,
    finite_diff_check,
    iql_gradient,
    iql_objective,
    phi,
    projected_value,
    projected_values,
    train_iql,
)
from .mdp import (
    MdpGenSpec,
    Policy,
    TokenMdp,
    build_token_mdp,
    check_token_mdp,
    successors,
    uniform_policy,
)
from .soft_rl import (
    OccupancyMeasure,
    expected_return,
    inverse_soft_bellman,
    occupancy_measure,
    policy_from_q,
    soft_bellman_apply,
    soft_policy_evaluation,
    soft_value_iteration,
    telescopic_residual,
    uniform_start,
)
from .top_p import (
    BoundReport,
    CandidateSets,
    build_candidate_sets,
    kappa,
    project_policy,
    supported_norm,
    top_p_bellman_apply,
    top_p_policy_evaluation,
    top_p_soft_value_iteration,
    verify_bounds,
    verify_contraction,
)

__version__ = "0.1.0"
