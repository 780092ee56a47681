"""Exact entropy-regularized policy evaluation, value iteration, occupancy
measures, reward recovery, and the telescopic identity.

Q tables are dense ``(n, vocab_size)`` float64 arrays over non-terminal
states; the terminal state has Q identically 0 and state value 0, realized by
appending a zero to state-value vectors before gathering successors.

Conventions: ``0 * log 0 := 0`` in every entropy expectation; logsumexp uses
max-subtraction throughout.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConvergenceError
from .mdp import Policy

DEFAULT_TOL = 1e-10

_EXTRA_ITERS = 16


def _as_table(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _append_terminal(v):
    return np.append(v, 0.0)


def state_values(mdp, policy, q):
    """V^pi(s) = E_{a~pi}[Q(s,a) - log pi(a|s)] for each non-terminal s."""
    return K.dense_expect_smooth(_as_table(q), policy.probs)


def soft_bellman_apply(mdp, policy, q):
    """One exact application of the soft Bellman evaluation operator."""
    policy.validate()
    return _bellman_step(mdp, policy.probs, _as_table(q))


def _bellman_step(mdp, probs, q):
    return K.dense_backup_eval(q, probs, mdp.reward, mdp.next_state, mdp.gamma)


def _iterate_to_fixed_point(step, q0, gamma, horizon, tol):
    """Iterate ``q <- step(q)`` until the sup-norm residual is <= tol."""
    q = q0
    max_iter = horizon + _EXTRA_ITERS
    for it in range(1_000_000):
        q_next = step(q)
        res = float(np.max(np.abs(q_next - q)))
        if not np.isfinite(res):
            raise ConvergenceError("fixed-point iteration produced non-finite values")
        if res <= tol:
            return q_next
        if it == 0 and gamma > 0.0 and res > tol:
            # Contraction bound: residual shrinks by gamma each sweep.
            needed = int(np.ceil(np.log(res / (tol * (1.0 - gamma))) / np.log(1.0 / gamma)))
            max_iter = max(max_iter, needed + horizon + _EXTRA_ITERS)
        if it + 1 >= max_iter:
            raise ConvergenceError(
                f"no fixed point within {max_iter} sweeps (residual {res:.3e}); "
                "check gamma < 1 and finite rewards"
            )
        q = q_next
    raise ConvergenceError("iteration cap exhausted")


def soft_policy_evaluation(mdp, policy, tol=DEFAULT_TOL, q0=None):
    """Solve Q = B^pi Q to the given sup-norm residual tolerance."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    policy.validate()
    q = np.zeros_like(mdp.reward) if q0 is None else _as_table(q0)
    return _iterate_to_fixed_point(
        lambda t: _bellman_step(mdp, policy.probs, t), q, mdp.gamma, mdp.horizon, tol
    )


def soft_value_iteration(mdp, tol=DEFAULT_TOL, q0=None):
    """Solve the optimal soft backup; returns (Q*, soft-optimal policy)."""
    if tol <= 0:
        raise ValueError("tol must be positive")

    def step(q):
        return K.dense_backup_opt(q, mdp.reward, mdp.next_state, mdp.gamma)

    q = np.zeros_like(mdp.reward) if q0 is None else _as_table(q0)
    q_star = _iterate_to_fixed_point(step, q, mdp.gamma, mdp.horizon, tol)
    return q_star, policy_from_q(q_star)


def policy_from_q(q):
    """Row-wise softmax of a Q table (the closed-form soft-greedy policy)."""
    return Policy(probs=K.dense_softmax(_as_table(q)))


@dataclass(eq=False)
class OccupancyMeasure:
    """Discounted state-action visitation; total mass 1/(1-gamma).

    ``mass`` covers non-terminal pairs; ``terminal_mass`` is the discounted
    visitation of the terminal self-loop.
    """

    mass: np.ndarray
    terminal_mass: float
    start_dist: np.ndarray

    def total(self):
        return float(self.mass.sum() + self.terminal_mass)


def uniform_start(mdp):
    p = len(mdp.prompts)
    return np.full(p, 1.0 / p)


def occupancy_measure(mdp, policy, start_dist, max_waves=200_000):
    """Exact discounted visitation by forward mass propagation.

    On prefix trees the sweep terminates exactly once all remaining mass sits
    at the terminal, whose geometric self-loop tail is added in closed form.
    Cyclic fixtures fall back to propagating until the remaining non-terminal
    mass is negligible.
    """
    policy.validate()
    start_dist = np.asarray(start_dist, dtype=np.float64)
    if start_dist.shape != mdp.prompts.shape:
        raise ValueError("start_dist must align with mdp.prompts")
    n = mdp.n_nonterminal
    gamma = mdp.gamma
    flat_next = mdp.next_state.ravel()

    cur = np.zeros(n + 1)
    np.add.at(cur, mdp.prompts, start_dist)
    nu = np.zeros(n)
    terminal_mass = 0.0
    cut = 1e-12 * (1.0 - gamma)
    for _ in range(max_waves):
        nu += cur[:n]
        terminal_mass += cur[n]
        live = float(cur[:n].sum())
        if live == 0.0 or live < cut:
            terminal_mass += cur[n] * gamma / (1.0 - gamma)
            break
        flow = (gamma * cur[:n, None] * policy.probs).ravel()
        nxt = np.zeros(n + 1)
        np.add.at(nxt, flat_next, flow)
        nxt[n] += gamma * cur[n]
        cur = nxt
    else:
        raise ConvergenceError("occupancy propagation did not settle")

    return OccupancyMeasure(
        mass=nu[:, None] * policy.probs,
        terminal_mass=terminal_mass,
        start_dist=start_dist,
    )


def expected_return(mdp, policy, start_dist, tol=DEFAULT_TOL):
    """Entropy-regularized return E_{s0~start}[V^pi(s0)]."""
    q = soft_policy_evaluation(mdp, policy, tol=tol)
    v = state_values(mdp, policy, q)
    return float(np.dot(np.asarray(start_dist, dtype=np.float64), v[mdp.prompts]))


def inverse_soft_bellman(mdp, q, policy):
    """(T^pi Q)(s,a) = Q(s,a) - gamma * V^pi(s'); recovers r at fixed points."""
    q = _as_table(q)
    v_ext = _append_terminal(state_values(mdp, policy, q))
    return q - mdp.gamma * v_ext[mdp.next_state]


def telescopic_residual(mdp, v, occupancy, start_dist):
    """|E_mu[V(s) - gamma V(s')] - (1-gamma) E_{s0}[V(s0)]|.

    ``mu`` is the occupancy normalized by (1-gamma); the terminal self-loop
    contributes zero since V(terminal) = 0. The residual is ~0 for any valid
    occupancy of this MDP and generically large otherwise.
    """
    v = np.asarray(v, dtype=np.float64)
    gamma = mdp.gamma
    v_ext = _append_terminal(v)
    td = v[:, None] - gamma * v_ext[mdp.next_state]
    lhs = (1.0 - gamma) * float(np.sum(occupancy.mass * td))
    rhs = (1.0 - gamma) * float(
        np.dot(np.asarray(start_dist, dtype=np.float64), v[mdp.prompts])
    )
    return abs(lhs - rhs)
