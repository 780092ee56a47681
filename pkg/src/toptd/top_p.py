"""Nucleus (top-p) candidate sets, the state-wise policy projection, the
restricted soft Bellman operator and value iteration, supported q-norms,
the kappa(p) budget, and numerical certification of the contraction,
sandwich, and gap bounds.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import DegenerateSupportError, TeacherNotOptimalError
from .mdp import Policy
from .soft_rl import (
    DEFAULT_TOL,
    _iterate_to_fixed_point,
    soft_value_iteration,
)

# Slack when comparing cumulative teacher mass against p, so that prefixes
# whose exact mass ties p are not over-extended by rounding noise.
_CUM_ATOL = 1e-12

CONTRACTION_SLACK = 1e-9


@dataclass(eq=False)
class CandidateSets:
    """Per-state top-p action subsets in a CSR layout.

    ``actions[offsets[s]:offsets[s+1]]`` lists state ``s``'s candidate
    actions in descending teacher probability (ties broken by ascending
    action index). ``realized_mass[s]`` is the cumulative teacher probability
    of the listed actions.
    """

    actions: np.ndarray
    offsets: np.ndarray
    realized_mass: np.ndarray
    nominal_p: float
    vocab_size: int
    union_mode: bool = False
    member: np.ndarray = field(init=False)      # (n, v) bool
    flat_index: np.ndarray = field(init=False)  # (n, v) int64, -1 off support
    row_of: np.ndarray = field(init=False)      # (nnz,) owning state per slot

    def __post_init__(self):
        n = self.n_states
        sizes = np.diff(self.offsets)
        self.row_of = np.repeat(np.arange(n, dtype=np.int64), sizes)
        self.member = np.zeros((n, self.vocab_size), dtype=bool)
        self.member[self.row_of, self.actions] = True
        self.flat_index = np.full((n, self.vocab_size), -1, dtype=np.int64)
        self.flat_index[self.row_of, self.actions] = np.arange(
            self.actions.shape[0], dtype=np.int64
        )

    @property
    def n_states(self):
        return self.offsets.shape[0] - 1

    @property
    def sizes(self):
        return np.diff(self.offsets)

    @property
    def nnz(self):
        return int(self.actions.shape[0])

    def gather(self, table):
        """Flatten a dense (n, v) table onto the supported slots."""
        return np.ascontiguousarray(table[self.row_of, self.actions])

    def scatter(self, flat, fill=0.0):
        """Expand a flat supported vector into a dense (n, v) table."""
        out = np.full((self.n_states, self.vocab_size), fill, dtype=np.float64)
        out[self.row_of, self.actions] = flat
        return out

    def state_set(self, s):
        return self.actions[self.offsets[s] : self.offsets[s + 1]]


def build_candidate_sets(teacher, p, union=False):
    """Smallest descending-probability prefix per state with mass >= p.

    With ``union=True`` every state instead gets the union of all per-state
    sets (the state-independent simplification), re-ordered per state by
    teacher probability.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    teacher.validate()
    probs = teacher.probs
    n, v = probs.shape

    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_probs = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(sorted_probs, axis=1)
    reached = cum >= p - _CUM_ATOL
    ks = np.where(reached.any(axis=1), np.argmax(reached, axis=1) + 1, v)
    realized = np.minimum(cum[np.arange(n), ks - 1], 1.0)

    if union:
        in_union = np.zeros(v, dtype=bool)
        for s in range(n):
            in_union[order[s, : ks[s]]] = True
        union_actions = np.flatnonzero(in_union)
        u = union_actions.shape[0]
        per_state = np.argsort(-probs[:, union_actions], axis=1, kind="stable")
        actions = union_actions[per_state].ravel().astype(np.int64)
        offsets = np.arange(n + 1, dtype=np.int64) * u
        realized = np.minimum(probs[:, union_actions].sum(axis=1), 1.0)
        return CandidateSets(actions, offsets, realized, p, v, union_mode=True)

    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(ks, out=offsets[1:])
    actions = np.concatenate([order[s, : ks[s]] for s in range(n)]).astype(np.int64)
    return CandidateSets(actions, offsets, realized, p, v)


def _project_flat(probs, sets):
    """In-set probabilities renormalized per state, in flat layout."""
    inset = sets.gather(probs)
    z = K.seg_sum(inset, sets.offsets)
    if np.any(z <= 0.0):
        s = int(np.argmax(z <= 0.0))
        raise DegenerateSupportError(
            f"policy carries no mass on the candidate set of state {s}"
        )
    return inset / np.repeat(z, sets.sizes)


def project_policy(policy, sets):
    """State-wise projection onto the candidate sets (Definition of proj_p)."""
    policy.validate()
    flat = _project_flat(policy.probs, sets)
    return Policy(probs=sets.scatter(flat), support=sets.member.copy())


def top_p_bellman_apply(mdp, policy, qbar, sets):
    """One application of the top-p soft Bellman operator to a supported table.

    ``policy`` lives on the full action set and is projected internally;
    ``qbar`` is flat over the supported slots.
    """
    policy.validate()
    proj = _project_flat(policy.probs, sets)
    return _restricted_step(mdp, sets, proj, np.ascontiguousarray(qbar, dtype=np.float64))


def _restricted_step(mdp, sets, proj_flat, qbar):
    return K.restricted_backup_eval(
        qbar,
        proj_flat,
        sets.gather(mdp.reward),
        sets.gather(mdp.next_state),
        sets.offsets,
        mdp.gamma,
    )


def top_p_policy_evaluation(mdp, policy, sets, tol=DEFAULT_TOL, qbar0=None):
    """Fixed point of the top-p soft Bellman operator for proj_p(policy)."""
    policy.validate()
    proj = _project_flat(policy.probs, sets)
    r_flat = sets.gather(mdp.reward)
    next_flat = sets.gather(mdp.next_state)

    def step(qbar):
        return K.restricted_backup_eval(qbar, proj, r_flat, next_flat, sets.offsets, mdp.gamma)

    q0 = np.zeros(sets.nnz) if qbar0 is None else np.ascontiguousarray(qbar0, dtype=np.float64)
    return _iterate_to_fixed_point(step, q0, mdp.gamma, mdp.horizon, tol)


def top_p_soft_value_iteration(mdp, sets, tol=DEFAULT_TOL, qbar0=None):
    """Optimal soft backup restricted to the candidate actions.

    Returns the flat fixed point and the optimal policy of the top-p MDP
    (softmax over each state's candidate set, zero elsewhere).
    """
    r_flat = sets.gather(mdp.reward)
    next_flat = sets.gather(mdp.next_state)

    def step(qbar):
        return K.restricted_backup_opt(qbar, r_flat, next_flat, sets.offsets, mdp.gamma)

    q0 = np.zeros(sets.nnz) if qbar0 is None else np.ascontiguousarray(qbar0, dtype=np.float64)
    qbar = _iterate_to_fixed_point(step, q0, mdp.gamma, mdp.horizon, tol)
    policy = Policy(
        probs=sets.scatter(K.seg_softmax(qbar, sets.offsets)),
        support=sets.member.copy(),
    )
    return qbar, policy


def supported_norm(table_diff, sets, q=np.inf):
    """max over states of the per-state q-norm restricted to the candidate set.

    ``table_diff`` may be dense (n, v) or already flat over the support.
    """
    d = np.asarray(table_diff, dtype=np.float64)
    flat = d if d.ndim == 1 else sets.gather(d)
    a = np.abs(flat)
    if q == np.inf:
        per_state = K.seg_max(a, sets.offsets)
    elif q == 1:
        per_state = K.seg_sum(a, sets.offsets)
    elif q == 2:
        per_state = np.sqrt(K.seg_sum(a * a, sets.offsets))
    else:
        raise ValueError("q must be 1, 2, or inf")
    return float(per_state.max())


def kappa(p, gamma):
    """Sub-optimality budget -gamma/(1-gamma) * log(p)."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    return -gamma / (1.0 - gamma) * float(np.log(p))


def verify_contraction(mdp, sets, n_trials=1000, seed=0, q_scale=2.0):
    """Max contraction ratio of the top-p operator over random triples.

    Each trial draws a random full-support policy and two random supported
    tables with a per-trial generator derived from (seed, trial), applies the
    operator, and measures the supported-infinity-norm ratio. Zero-denominator
    draws are skipped. The result must not exceed gamma (plus float slack).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    n, v = mdp.next_state.shape
    r_flat = sets.gather(mdp.reward)
    next_flat = sets.gather(mdp.next_state)
    worst = 0.0
    for t in range(n_trials):
        rng = np.random.default_rng([seed, t])
        probs = rng.dirichlet(np.ones(v), size=n)
        proj = _project_flat(probs, sets)
        q1 = rng.normal(0.0, q_scale, size=sets.nnz)
        q2 = rng.normal(0.0, q_scale, size=sets.nnz)
        denom = float(np.max(np.abs(q1 - q2)))
        if denom == 0.0:
            continue
        b1 = K.restricted_backup_eval(q1, proj, r_flat, next_flat, sets.offsets, mdp.gamma)
        b2 = K.restricted_backup_eval(q2, proj, r_flat, next_flat, sets.offsets, mdp.gamma)
        ratio = float(np.max(np.abs(b1 - b2))) / denom
        worst = max(worst, ratio)
    return worst


BOUND_CSV_HEADER = (
    "seed",
    "V",
    "H",
    "gamma",
    "p",
    "min_realized_mass",
    "kappa_nominal",
    "kappa_realized",
    "gap_proj",
    "gap_opt",
    "sandwich_violation",
    "contraction_max_ratio",
    "pass",
)


@dataclass(eq=False)
class BoundReport:
    vocab_size: int
    horizon: int
    gamma: float
    p: float
    min_realized_mass: float
    kappa_nominal: float
    kappa_realized: float
    gap_proj: float
    gap_opt: float
    sandwich_violation: float
    contraction_max_ratio: float
    checks: dict
    asserted_gap_bounds: bool
    seed: int = None

    @property
    def passed(self):
        if self.asserted_gap_bounds:
            return all(self.checks.values())
        return self.checks["sandwich"] and self.checks["contraction"]

    def csv_row(self):
        return (
            "" if self.seed is None else self.seed,
            self.vocab_size,
            self.horizon,
            self.gamma,
            self.p,
            self.min_realized_mass,
            self.kappa_nominal,
            self.kappa_realized,
            self.gap_proj,
            self.gap_opt,
            self.sandwich_violation,
            self.contraction_max_ratio,
            self.passed,
        )


def verify_bounds(
    mdp,
    teacher,
    p,
    tol=1e-6,
    *,
    strict=True,
    solver_tol=DEFAULT_TOL,
    contraction_trials=50,
    seed=0,
    union=False,
    instance_seed=None,
    teacher_match_tol=1e-8,
):
    """Certify the contraction, sandwich, and kappa gap bounds numerically.

    With ``strict=True`` the teacher must be the soft-optimal policy of the
    MDP (the gap bounds' proof substitutes the softmax form of the teacher);
    with ``strict=False`` non-optimal teachers are allowed and the gap bounds
    are reported but excluded from the overall pass flag.
    """
    q_star, pi_star = soft_value_iteration(mdp, tol=solver_tol)
    mismatch = float(np.max(np.abs(teacher.probs - pi_star.probs)))
    if strict and mismatch > teacher_match_tol:
        raise TeacherNotOptimalError(
            f"teacher deviates from the soft-optimal policy by {mismatch:.3e}; "
            "pass strict=False to report bounds without asserting them"
        )

    sets = build_candidate_sets(teacher, p, union=union)
    qbar_proj = top_p_policy_evaluation(mdp, teacher, sets, tol=solver_tol)
    qbar_opt, _ = top_p_soft_value_iteration(mdp, sets, tol=solver_tol)
    q_star_flat = sets.gather(q_star)

    gap_proj = float(np.max(np.abs(q_star_flat - qbar_proj)))
    gap_opt = float(np.max(np.abs(q_star_flat - qbar_opt)))
    sandwich_violation = max(
        0.0,
        float(np.max(qbar_proj - qbar_opt)),
        float(np.max(qbar_opt - q_star_flat)),
    )
    ratio = verify_contraction(mdp, sets, n_trials=contraction_trials, seed=seed)

    k_nom = kappa(p, mdp.gamma)
    min_mass = float(sets.realized_mass.min())
    k_real = kappa(min(min_mass, 1.0), mdp.gamma)

    checks = {
        "sandwich": sandwich_violation <= tol,
        "gap_proj_nominal": gap_proj <= k_nom + tol,
        "gap_opt_nominal": gap_opt <= k_nom + tol,
        "gap_proj_realized": gap_proj <= k_real + tol,
        "gap_opt_realized": gap_opt <= k_real + tol,
        "contraction": ratio <= mdp.gamma + CONTRACTION_SLACK,
    }
    return BoundReport(
        vocab_size=mdp.vocab_size,
        horizon=mdp.horizon,
        gamma=mdp.gamma,
        p=p,
        min_realized_mass=min_mass,
        kappa_nominal=k_nom,
        kappa_realized=k_real,
        gap_proj=gap_proj,
        gap_opt=gap_opt,
        sandwich_violation=sandwich_violation,
        contraction_max_ratio=ratio,
        checks=checks,
        asserted_gap_bounds=strict,
        seed=instance_seed,
    )
