"""Projected inverse soft-Q objective with chi-square regularization,
top-p masking, analytic tabular gradients, finite-difference validation,
and a deterministic gradient-ascent trainer.

Expectations are taken under the teacher occupancy normalized to a
distribution, mu = (1-gamma) * rho. The absorbing terminal pair contributes
zero to both objective terms, so exact mode sums (1-gamma)-weighted masses
over non-terminal pairs, and minibatch mode draws trajectory steps with
probability (1-gamma) * gamma^t (the residual gamma^L mass lands on a
degenerate terminal draw that contributes zero but counts in the batch
average). This makes the minibatch estimator unbiased for the exact-mode
value of both terms.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import kernels as K
from .errors import ConfigError, MaskedAccessError, TrainingDivergedError
from .soft_rl import OccupancyMeasure, _append_terminal


@dataclass(frozen=True)
class IqlConfig:
    alpha: float = 0.1
    gamma: float = 0.99
    p: float = 0.8
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    q_min: float = -10.0
    seed: int = 0
    projected_sampling: bool = True
    exact_mode: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("p must be in (0, 1]")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")

    def with_p(self, p):
        return replace(self, p=p)


def phi(x, alpha):
    """Concave reward regularizer x - x^2/(4*alpha) (chi-square)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = x - x * x / (4.0 * alpha)
    return float(out) if out.ndim == 0 else out


def phi_prime(x, alpha):
    x = np.asarray(x, dtype=np.float64)
    out = 1.0 - x / (2.0 * alpha)
    return float(out) if out.ndim == 0 else out


def projected_values(q, sets):
    """Restricted logsumexp of each state's candidate entries."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    return K.seg_logsumexp(sets.gather(q), sets.offsets)


def projected_value(q, sets, s):
    start, stop = sets.offsets[s], sets.offsets[s + 1]
    row = sets.gather(np.ascontiguousarray(q, dtype=np.float64))[start:stop]
    m = row.max()
    return float(m + np.log(np.sum(np.exp(row - m))))


@dataclass(eq=False)
class MaskedQ:
    """Support-restricted view of a Q table.

    Off-support reads raise instead of materializing -infinity; softmax and
    logsumexp range only over the support, which is mathematically identical
    to literal -infinity entries without the NaN hazards.
    """

    q: np.ndarray
    sets: object

    def __getitem__(self, key):
        s, a = key
        if not self.sets.member[s, a]:
            raise MaskedAccessError(f"entry ({s}, {a}) is outside the candidate set")
        return float(self.q[s, a])

    def flat(self):
        return self.sets.gather(self.q)

    def logsumexp(self, s):
        return projected_value(self.q, self.sets, s)

    def softmax_row(self, s):
        idx = self.sets.state_set(s)
        row = self.q[s, idx]
        e = np.exp(row - row.max())
        out = np.zeros(self.sets.vocab_size)
        out[idx] = e / e.sum()
        return out


def apply_mask(q, sets):
    return MaskedQ(np.ascontiguousarray(q, dtype=np.float64), sets)


@dataclass(eq=False)
class TransitionBatch:
    """Sampled (s, a, s') steps plus degenerate terminal draws.

    ``n_terminal`` counts draws that landed in the absorbing tail; they
    contribute zero to both objective terms but belong in the batch average.
    """

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    n_terminal: int = 0

    @property
    def size(self):
        return int(self.s.shape[0]) + int(self.n_terminal)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    total: float
    term_phi: float
    term_td: float
    n_samples_used: int
    n_samples_skipped: int


def _check_config(mdp, config):
    if abs(config.gamma - mdp.gamma) > 1e-15:
        raise ConfigError(
            f"config.gamma={config.gamma!r} does not match mdp.gamma={mdp.gamma!r}"
        )


def iql_objective(q, data, mdp, sets, config):
    """Evaluate the projected, masked IQL objective.

    ``data`` is either a :class:`TransitionBatch` (minibatch mode) or an
    :class:`OccupancyMeasure` (exact mode). Samples whose action falls
    outside the candidate set contribute zero to the phi term and are counted
    as skipped.
    """
    _check_config(mdp, config)
    q = np.ascontiguousarray(q, dtype=np.float64)
    gamma = mdp.gamma
    v_ext = _append_terminal(projected_values(q, sets))

    if isinstance(data, OccupancyMeasure):
        w = (1.0 - gamma) * data.mass
        x = q - gamma * v_ext[mdp.next_state]
        in_sup = sets.member
        term_phi = float(np.sum(w[in_sup] * phi(x[in_sup], config.alpha)))
        td = v_ext[: mdp.n_nonterminal][:, None] - gamma * v_ext[mdp.next_state]
        term_td = float(np.sum(w * td))
        has_mass = data.mass > 0.0
        used = int(np.count_nonzero(has_mass & in_sup))
        skipped = int(np.count_nonzero(has_mass & ~in_sup))
    elif isinstance(data, TransitionBatch):
        m = data.size
        if m == 0:
            raise ValueError("empty batch")
        x = q[data.s, data.a] - gamma * v_ext[data.s_next]
        in_sup = sets.member[data.s, data.a]
        term_phi = float(np.sum(phi(x[in_sup], config.alpha))) / m
        td = v_ext[data.s] - gamma * v_ext[data.s_next]
        term_td = float(np.sum(td)) / m
        used = int(np.count_nonzero(in_sup))
        skipped = int(data.s.shape[0]) - used
    else:
        raise TypeError(f"unsupported data type {type(data).__name__}")

    return ObjectiveBreakdown(
        total=term_phi - term_td,
        term_phi=term_phi,
        term_td=term_td,
        n_samples_used=used,
        n_samples_skipped=skipped,
    )


def iql_gradient(q, data, mdp, sets, config):
    """Analytic dJ/dQ as a dense table; identically zero off support."""
    _check_config(mdp, config)
    q = np.ascontiguousarray(q, dtype=np.float64)
    gamma = mdp.gamma
    n = mdp.n_nonterminal
    v_ext = _append_terminal(projected_values(q, sets))
    soft = K.seg_softmax(sets.gather(q), sets.offsets)

    grad_flat = np.zeros(sets.nnz)
    beta = np.zeros(n)  # per-state coefficient of the restricted softmax row

    if isinstance(data, OccupancyMeasure):
        w = (1.0 - gamma) * data.mass
        x = q - gamma * v_ext[mdp.next_state]
        c_flat = sets.gather(w) * phi_prime(sets.gather(x), config.alpha)
        grad_flat += c_flat
        nf = sets.gather(mdp.next_state)
        live = nf < n
        beta -= gamma * np.bincount(nf[live], weights=c_flat[live], minlength=n)
        beta -= w.sum(axis=1)
        dst = mdp.next_state.ravel()
        keep = dst < n
        beta += gamma * np.bincount(dst[keep], weights=w.ravel()[keep], minlength=n)
    elif isinstance(data, TransitionBatch):
        m = data.size
        if m == 0:
            raise ValueError("empty batch")
        wk = 1.0 / m
        x = q[data.s, data.a] - gamma * v_ext[data.s_next]
        in_sup = sets.member[data.s, data.a]
        c = wk * phi_prime(x[in_sup], config.alpha)
        idx = sets.flat_index[data.s[in_sup], data.a[in_sup]]
        grad_flat += np.bincount(idx, weights=c, minlength=sets.nnz)
        sn = data.s_next[in_sup]
        live = sn < n
        beta -= gamma * np.bincount(sn[live], weights=c[live], minlength=n)
        beta -= wk * np.bincount(data.s, minlength=n)
        snt = data.s_next[data.s_next < n]
        beta += gamma * wk * np.bincount(snt, minlength=n)
    else:
        raise TypeError(f"unsupported data type {type(data).__name__}")

    grad_flat += np.repeat(beta, sets.sizes) * soft
    return sets.scatter(grad_flat)


def finite_diff_check(q, data, mdp, sets, config, epsilon=1e-5, max_entries=200, seed=0):
    """Max relative error of the analytic gradient vs central differences.

    Checks every supported entry, or a seeded subsample of at least
    ``max_entries`` on large tables. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    q = np.ascontiguousarray(q, dtype=np.float64)
    analytic = iql_gradient(q, data, mdp, sets, config)

    slots = np.arange(sets.nnz)
    if sets.nnz > max_entries:
        rng = np.random.default_rng(seed)
        slots = np.sort(rng.choice(sets.nnz, size=max_entries, replace=False))

    worst = 0.0
    for k in slots:
        s, a = int(sets.row_of[k]), int(sets.actions[k])
        qp = q.copy()
        qp[s, a] += epsilon
        jp = iql_objective(qp, data, mdp, sets, config).total
        qp[s, a] = q[s, a] - epsilon
        jm = iql_objective(qp, data, mdp, sets, config).total
        numeric = (jp - jm) / (2.0 * epsilon)
        err = abs(numeric - analytic[s, a]) / max(abs(numeric), abs(analytic[s, a]), 1e-8)
        worst = max(worst, err)
    return worst


def draw_batch(dataset, batch_size, gamma, rng):
    """Sample a gamma-weighted transition batch from a trajectory dataset.

    Step t of each trajectory is drawn with probability (1-gamma)*gamma^t /
    n_trajectories; the leftover gamma^L mass per trajectory becomes
    degenerate terminal draws.
    """
    probs, n_items = dataset.sampling_distribution(gamma)
    idx = rng.choice(n_items + 1, size=batch_size, p=probs)
    live = idx < n_items
    tr = dataset.transitions
    return TransitionBatch(
        s=tr.s[idx[live]],
        a=tr.a[idx[live]],
        s_next=tr.s_next[idx[live]],
        n_terminal=int(np.count_nonzero(~live)),
    )


_HALVING_TOL = 1e-9
_MAX_HALVINGS = 60

METRIC_COLUMNS = (
    "epoch",
    "J_total",
    "term_phi",
    "term_td",
    "grad_norm",
    "n_skipped",
    "kl_to_proj_teacher",
    "return_gap",
)


class MetricsLog:
    """Append-only per-epoch scalar rows with a fixed header."""

    def __init__(self, columns=METRIC_COLUMNS):
        self.columns = tuple(columns)
        self.rows = []

    def append(self, row):
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"metric row is missing columns {sorted(missing)}")
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch indices must be strictly increasing")
        self.rows.append(dict(row))

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, idx):
        return self.rows[idx]

    def column(self, name):
        return [row[name] for row in self.rows]

    def write_csv(self, path):
        from .serialize import write_csv

        write_csv(path, self.columns, [tuple(r[c] for c in self.columns) for r in self.rows])


def _clamp(q, sets, q_min):
    return np.where(sets.member, np.maximum(q, q_min), q)


def train_iql(
    mdp,
    teacher_data,
    sets,
    config,
    *,
    step_halving=False,
    init_q=None,
    evaluator=None,
    aux=None,
):
    """Gradient ascent on the projected IQL objective.

    ``teacher_data`` is an :class:`OccupancyMeasure` in exact mode or a
    trajectory dataset in minibatch mode. ``evaluator(q) -> dict`` may add
    per-epoch metrics. ``aux(rng)`` may supply a per-step auxiliary objective
    (the language-modeling term of the full distillation loop): it returns a
    closure ``step_fn(q) -> (value, grad)`` that is reused for every
    re-evaluation within the step. With ``step_halving`` the learning rate of
    a step is halved until the step does not decrease its objective
    (within 1e-9).

    Returns the trained dense Q table and a :class:`MetricsLog` with one row
    per epoch.
    """
    _check_config(mdp, config)
    exact = isinstance(teacher_data, OccupancyMeasure)
    if config.exact_mode and not exact:
        raise TypeError("exact_mode requires an OccupancyMeasure as teacher_data")
    rng = np.random.default_rng(config.seed)

    q = np.zeros_like(mdp.reward) if init_q is None else np.array(init_q, dtype=np.float64)
    if exact:
        steps_per_epoch = 1
    else:
        n_tr = teacher_data.transitions.s.shape[0]
        steps_per_epoch = max(1, n_tr // config.batch_size)

    def evaluate(q_cur, data, aux_step):
        breakdown = iql_objective(q_cur, data, mdp, sets, config)
        total = breakdown.total
        aux_grad = None
        if aux_step is not None:
            aux_val, aux_grad = aux_step(q_cur)
            total = total + aux_val
        return total, breakdown, aux_grad

    history = MetricsLog()
    for epoch in range(config.epochs):
        totals, phis, tds, skips, gnorms = [], [], [], 0, []
        for _ in range(steps_per_epoch):
            data = teacher_data if exact else draw_batch(
                teacher_data, config.batch_size, mdp.gamma, rng
            )
            aux_step = aux(rng) if aux is not None else None
            total, breakdown, aux_grad = evaluate(q, data, aux_step)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    "objective became non-finite",
                    diagnostics={
                        "epoch": epoch,
                        "term_phi": breakdown.term_phi,
                        "term_td": breakdown.term_td,
                        "q_min_entry": float(q.min()),
                        "q_max_entry": float(q.max()),
                    },
                )
            grad = iql_gradient(q, data, mdp, sets, config)
            if aux_grad is not None:
                grad = grad + aux_grad

            lr = config.learning_rate
            proposal = _clamp(q + lr * grad, sets, config.q_min)
            if step_halving:
                for _ in range(_MAX_HALVINGS):
                    new_total, _, _ = evaluate(proposal, data, aux_step)
                    if new_total >= total - _HALVING_TOL:
                        break
                    lr *= 0.5
                    proposal = _clamp(q + lr * grad, sets, config.q_min)
            q = proposal

            totals.append(total)
            phis.append(breakdown.term_phi)
            tds.append(breakdown.term_td)
            skips += breakdown.n_samples_skipped
            gnorms.append(float(np.linalg.norm(grad)))

        row = {
            "epoch": epoch,
            "J_total": float(np.mean(totals)),
            "term_phi": float(np.mean(phis)),
            "term_td": float(np.mean(tds)),
            "grad_norm": float(np.mean(gnorms)),
            "n_skipped": skips,
            "kl_to_proj_teacher": float("nan"),
            "return_gap": float("nan"),
        }
        if evaluator is not None:
            row.update(evaluator(q))
        history.append(row)
    return q, history
