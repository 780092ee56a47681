"""End-to-end distillation: teacher dataset generation, training on the
projected IQL objective with an optional language-modeling auxiliary,
checkpoint selection on validation KL, evaluation metrics, and the
p-ablation driver.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigError
from .iql import TransitionBatch, _check_config, train_iql
from .mdp import Policy
from .soft_rl import (
    expected_return,
    occupancy_measure,
    soft_value_iteration,
    uniform_start,
)
from .top_p import (
    build_candidate_sets,
    project_policy,
    supported_norm,
    top_p_policy_evaluation,
    _project_flat,
)


@dataclass(eq=False)
class Transitions:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    step: np.ndarray  # step index within the trajectory


@dataclass(eq=False)
class TrajectoryDataset:
    """Teacher-sampled (prompt, token sequence) records with a transition view."""

    records: list  # (prompt_state, tuple of tokens)
    transitions: Transitions
    lengths: np.ndarray
    seed: int
    projected: bool
    n_per_prompt: int
    teacher_id: str = "teacher"

    def __post_init__(self):
        self._sampling_cache = {}

    @property
    def n_records(self):
        return len(self.records)

    def sampling_distribution(self, gamma):
        """Discounted step-sampling distribution; see iql.draw_batch."""
        key = float(gamma)
        if key not in self._sampling_cache:
            n_traj = self.n_records
            w = (1.0 - gamma) * gamma ** self.transitions.step.astype(np.float64)
            w /= n_traj
            p_term = float(np.sum(gamma ** self.lengths.astype(np.float64))) / n_traj
            probs = np.append(w, p_term)
            self._sampling_cache[key] = (probs / probs.sum(), w.shape[0])
        return self._sampling_cache[key]

    def to_lines(self):
        lines = []
        for prompt_state, tokens in self.records:
            lines.append(
                json.dumps(
                    {
                        "prompt_id": int(prompt_state),
                        "tokens": [int(t) for t in tokens],
                        "seed": int(self.seed),
                        "projected": bool(self.projected),
                    },
                    separators=(", ", ": "),
                )
            )
        return "\n".join(lines) + "\n"


def dataset_from_records(mdp, records, seed, projected, n_per_prompt, teacher_id="teacher"):
    """Build the transition view, checking consistency with the next map."""
    s_list, a_list, nxt_list, step_list, lengths = [], [], [], [], []
    for prompt_state, tokens in records:
        s = int(prompt_state)
        for t, tok in enumerate(tokens):
            nxt = int(mdp.next_state[s, tok])
            s_list.append(s)
            a_list.append(int(tok))
            nxt_list.append(nxt)
            step_list.append(t)
            s = nxt
        if s != mdp.terminal_state and len(tokens) >= mdp.horizon:
            raise ValueError("trajectory exceeds the horizon without terminating")
        lengths.append(len(tokens))
    transitions = Transitions(
        s=np.asarray(s_list, dtype=np.int64),
        a=np.asarray(a_list, dtype=np.int64),
        s_next=np.asarray(nxt_list, dtype=np.int64),
        step=np.asarray(step_list, dtype=np.int64),
    )
    return TrajectoryDataset(
        records=records,
        transitions=transitions,
        lengths=np.asarray(lengths, dtype=np.int64),
        seed=seed,
        projected=projected,
        n_per_prompt=n_per_prompt,
        teacher_id=teacher_id,
    )


def dataset_from_lines(mdp, text, n_per_prompt=0, teacher_id="teacher"):
    records, seed, projected = [], 0, False
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append((obj["prompt_id"], tuple(obj["tokens"])))
        seed, projected = obj["seed"], obj["projected"]
    return dataset_from_records(mdp, records, seed, projected, n_per_prompt, teacher_id)


def _row_cumulatives(probs):
    cum = np.cumsum(probs, axis=1)
    # Last index with positive probability per row, for inverse-CDF clamping.
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0.0, axis=1)
    return cum, last


def sample_trajectory(mdp, cum, last, s0, rng):
    """Ancestral rollout from state ``s0`` until the terminal state."""
    n = mdp.n_nonterminal
    tokens = []
    s = int(s0)
    for _ in range(n + 1):
        if s == n:
            break
        u = rng.random()
        a = int(np.searchsorted(cum[s], u, side="right"))
        a = min(a, int(last[s]))
        tokens.append(a)
        s = int(mdp.next_state[s, a])
    return tuple(tokens)


def generate_teacher_dataset(mdp, teacher, sets=None, n_per_prompt=8, seed=0, prompt_indices=None):
    """Sample ``n_per_prompt`` rollouts per prompt from the teacher.

    When ``sets`` is given, sampling uses the projected teacher so every
    recorded action lies in its state's candidate set. Each (prompt, sample)
    pair has its own generator derived from the seed, so sharding across
    prompts cannot change the result.
    """
    if n_per_prompt < 1:
        raise ValueError("n_per_prompt must be >= 1")
    policy = teacher if sets is None else project_policy(teacher, sets)
    policy.validate()
    cum, last = _row_cumulatives(policy.probs)
    if prompt_indices is None:
        prompt_indices = range(len(mdp.prompts))
    records = []
    for k in prompt_indices:
        s0 = int(mdp.prompts[k])
        for j in range(n_per_prompt):
            rng = np.random.default_rng([seed, int(k), j])
            records.append((s0, sample_trajectory(mdp, cum, last, s0, rng)))
    return dataset_from_records(
        mdp, records, seed=seed, projected=sets is not None, n_per_prompt=n_per_prompt
    )


def lm_objective(q, batch):
    """Mean log-softmax of observed actions over the full action set.

    Returns the objective value and its dense analytic gradient.
    """
    s, a = np.asarray(batch.s), np.asarray(batch.a)
    m = s.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    q = np.ascontiguousarray(q, dtype=np.float64)
    lse = K.dense_logsumexp(q)
    value = float(np.mean(q[s, a] - lse[s]))
    grad = np.zeros_like(q)
    np.add.at(grad, (s, a), 1.0 / m)
    counts = np.bincount(s, minlength=q.shape[0]) / m
    grad -= counts[:, None] * K.dense_softmax(q)
    return value, grad


@dataclass(frozen=True)
class EvalReport:
    kl_forward: float
    kl_reverse: float
    return_gap: float
    q_gap_supported: float


def _state_weights(mdp, policy, start_dist):
    """(1-gamma)-normalized state visitation; terminal weight is implicit."""
    occ = occupancy_measure(mdp, policy, start_dist)
    return (1.0 - mdp.gamma) * occ.mass.sum(axis=1)


def _kl_rows(p_flat, q_flat, sets):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_flat > 0.0, p_flat * (np.log(p_flat) - np.log(q_flat)), 0.0)
    return K.seg_sum(terms, sets.offsets)


def evaluate_student(mdp, teacher, student_q, sets, solver_tol=1e-10):
    """Distribution and value metrics of a trained student against the teacher.

    KLs compare the projected teacher with the student's candidate-set softmax
    and are averaged under the teacher occupancy normalized to a distribution
    (the absorbing terminal state carries its share of that distribution and
    contributes zero divergence). The supported Q gap compares the optimal
    soft values with the values the student's projected policy achieves in
    the top-p MDP; raw student logits are only identified up to the near-flat
    level modes of the training objective, so the policy's evaluation fixed
    point is the meaningful value object.
    """
    start = uniform_start(mdp)
    weights = _state_weights(mdp, teacher, start)
    pt = _project_flat(teacher.probs, sets)
    ps = K.seg_softmax(sets.gather(np.ascontiguousarray(student_q, dtype=np.float64)), sets.offsets)

    kl_forward = float(np.dot(weights, _kl_rows(pt, ps, sets)))
    kl_reverse = float(np.dot(weights, _kl_rows(ps, pt, sets)))

    student_policy = Policy(probs=sets.scatter(ps), support=sets.member.copy())
    return_gap = expected_return(mdp, teacher, start, tol=solver_tol) - expected_return(
        mdp, student_policy, start, tol=solver_tol
    )
    q_star, _ = soft_value_iteration(mdp, tol=solver_tol)
    qbar_student = top_p_policy_evaluation(mdp, student_policy, sets, tol=solver_tol)
    q_gap = supported_norm(sets.gather(q_star) - qbar_student, sets, np.inf)
    return EvalReport(
        kl_forward=kl_forward,
        kl_reverse=kl_reverse,
        return_gap=float(return_gap),
        q_gap_supported=float(q_gap),
    )


def _prompt_split(n_prompts, val_fraction, seed):
    rng = np.random.default_rng([seed, 101])
    perm = rng.permutation(n_prompts)
    n_val = int(round(val_fraction * n_prompts))
    if n_prompts > 1 and val_fraction > 0:
        n_val = min(max(n_val, 1), n_prompts - 1)
    else:
        n_val = 0
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    if val.size == 0:
        val = train
    return train, val


def _start_over(mdp, prompt_indices):
    start = np.zeros(len(mdp.prompts))
    start[prompt_indices] = 1.0 / len(prompt_indices)
    return start


def bellman_distill(
    mdp,
    teacher,
    config,
    pt_data=None,
    *,
    lm_weight=None,
    n_per_prompt=8,
    val_fraction=0.2,
    step_halving=False,
    init_q=None,
    solver_tol=1e-10,
):
    """Full offline distillation loop.

    Builds candidate sets from the teacher at ``config.p``, prepares teacher
    data (exact occupancy or sampled trajectories) over a training prompt
    split, trains on the projected IQL objective plus ``lm_weight`` times the
    language-modeling auxiliary when ``pt_data`` is given (weight defaults to
    1 in that case), and returns the checkpoint with the best validation
    forward KL (earliest epoch on ties) along with the per-epoch metrics.
    """
    _check_config(mdp, config)
    lam = (1.0 if pt_data is not None else 0.0) if lm_weight is None else float(lm_weight)
    sets = build_candidate_sets(teacher, config.p)
    proj_teacher = project_policy(teacher, sets)
    sampling_policy = proj_teacher if config.projected_sampling else teacher

    train_idx, val_idx = _prompt_split(len(mdp.prompts), val_fraction, config.seed)
    if config.exact_mode:
        data = occupancy_measure(mdp, sampling_policy, _start_over(mdp, train_idx))
    else:
        data = generate_teacher_dataset(
            mdp,
            teacher,
            sets if config.projected_sampling else None,
            n_per_prompt=n_per_prompt,
            seed=config.seed,
            prompt_indices=train_idx,
        )

    val_start = _start_over(mdp, val_idx)
    val_weights = _state_weights(mdp, teacher, val_start)
    pt_flat = _project_flat(teacher.probs, sets)
    teacher_return = expected_return(mdp, teacher, val_start, tol=solver_tol)

    best = {"kl": np.inf, "q": None, "epoch": -1, "counter": 0}

    def evaluator(q_cur):
        ps = K.seg_softmax(sets.gather(q_cur), sets.offsets)
        kl = float(np.dot(val_weights, _kl_rows(pt_flat, ps, sets)))
        student = Policy(probs=sets.scatter(ps), support=sets.member.copy())
        gap = teacher_return - expected_return(mdp, student, val_start, tol=solver_tol)
        if kl < best["kl"]:
            best.update(kl=kl, q=q_cur.copy(), epoch=best["counter"])
        best["counter"] += 1
        return {"kl_to_proj_teacher": kl, "return_gap": float(gap)}

    aux = None
    if pt_data is not None and lam != 0.0:
        pt_transitions = pt_data.transitions

        def aux(rng):
            if config.exact_mode:
                batch = pt_transitions
            else:
                pick = rng.integers(0, pt_transitions.s.shape[0], size=config.batch_size)
                batch = TransitionBatch(
                    s=pt_transitions.s[pick],
                    a=pt_transitions.a[pick],
                    s_next=pt_transitions.s_next[pick],
                )

            def step_fn(q_cur):
                value, grad = lm_objective(q_cur, batch)
                return lam * value, lam * grad

            return step_fn

    q_final, history = train_iql(
        mdp,
        data,
        sets,
        config,
        step_halving=step_halving,
        init_q=init_q,
        evaluator=evaluator,
        aux=aux,
    )
    q_best = q_final if best["q"] is None else best["q"]
    return q_best, history


ABLATION_CSV_HEADER = (
    "p",
    "kl_forward",
    "kl_reverse",
    "return_gap",
    "q_gap_supported",
    "best_epoch",
    "n_epochs",
)


def ablate_p(mdp, teacher, p_list, config, **distill_kwargs):
    """Run the distillation loop for each p with a shared seed.

    Returns one metrics row per p, aligned with ``ABLATION_CSV_HEADER``.
    """
    if not p_list:
        raise ValueError("p_list must be nonempty")
    for p in p_list:
        if not 0.0 < p <= 1.0:
            raise ConfigError(f"p values must lie in (0, 1], got {p}")
    rows = []
    for p in p_list:
        cfg = config.with_p(float(p))
        q, history = bellman_distill(mdp, teacher, cfg, **distill_kwargs)
        sets = build_candidate_sets(teacher, float(p))
        report = evaluate_student(mdp, teacher, q, sets)
        kls = [row["kl_to_proj_teacher"] for row in history]
        rows.append(
            (
                float(p),
                report.kl_forward,
                report.kl_reverse,
                report.return_gap,
                report.q_gap_supported,
                int(np.argmin(kls)),
                len(history),
            )
        )
    return rows
