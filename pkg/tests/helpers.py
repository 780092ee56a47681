"""Independent oracles used to cross-check the solvers.

These deliberately avoid the library's fixed-point iteration paths: they
compute exact values by one depth-ordered backward sweep over the prefix
tree, or by brute-force sampling.
"""

import numpy as np

from toptd.mdp import Policy, TokenMdp


def make_self_loop_mdp(n_actions=2, reward=0.0, gamma=0.5):
    """One non-terminal state whose every action loops back to itself."""
    return TokenMdp(
        vocab_size=n_actions,
        horizon=1,
        gamma=gamma,
        prompts=np.array([0], dtype=np.int64),
        next_state=np.zeros((1, n_actions), dtype=np.int64),
        reward=np.full((1, n_actions), float(reward)),
    )


def _entropy_expect(q_row, p_row):
    mask = p_row > 0.0
    return float(np.sum(p_row[mask] * (q_row[mask] - np.log(p_row[mask]))))


def backward_policy_eval(mdp, policy):
    """Exact Q^pi by a single backward sweep over depths (trees only)."""
    n, v = mdp.next_state.shape
    depth = mdp.depths()
    q = np.zeros((n, v))
    val = np.zeros(n + 1)
    for d in range(int(depth.max()), -1, -1):
        states = np.flatnonzero(depth == d)
        for s in states:
            q[s] = mdp.reward[s] + mdp.gamma * val[mdp.next_state[s]]
            val[s] = _entropy_expect(q[s], policy.probs[s])
    return q


def backward_soft_vi(mdp):
    """Exact optimal soft Q by a single backward sweep (trees only)."""
    n, v = mdp.next_state.shape
    depth = mdp.depths()
    q = np.zeros((n, v))
    val = np.zeros(n + 1)
    for d in range(int(depth.max()), -1, -1):
        for s in np.flatnonzero(depth == d):
            q[s] = mdp.reward[s] + mdp.gamma * val[mdp.next_state[s]]
            m = q[s].max()
            val[s] = m + np.log(np.sum(np.exp(q[s] - m)))
    return q


def backward_restricted_policy_eval(mdp, proj_probs, sets):
    """Exact fixed point of the restricted operator for an already-projected
    policy, by one backward sweep; returns a flat supported table."""
    n = mdp.n_nonterminal
    depth = mdp.depths()
    qflat = np.zeros(sets.nnz)
    val = np.zeros(n + 1)
    for d in range(int(depth.max()), -1, -1):
        for s in np.flatnonzero(depth == d):
            sl = slice(sets.offsets[s], sets.offsets[s + 1])
            acts = sets.actions[sl]
            qflat[sl] = mdp.reward[s, acts] + mdp.gamma * val[mdp.next_state[s, acts]]
            val[s] = _entropy_expect(qflat[sl], proj_probs[s, acts])
    return qflat


def backward_restricted_vi(mdp, sets):
    """Exact optimal restricted soft Q by one backward sweep, flat layout."""
    n = mdp.n_nonterminal
    depth = mdp.depths()
    qflat = np.zeros(sets.nnz)
    val = np.zeros(n + 1)
    for d in range(int(depth.max()), -1, -1):
        for s in np.flatnonzero(depth == d):
            sl = slice(sets.offsets[s], sets.offsets[s + 1])
            acts = sets.actions[sl]
            qflat[sl] = mdp.reward[s, acts] + mdp.gamma * val[mdp.next_state[s, acts]]
            m = qflat[sl].max()
            val[s] = m + np.log(np.sum(np.exp(qflat[sl] - m)))
    return qflat


def random_policy(mdp, rng):
    return Policy(probs=rng.dirichlet(np.ones(mdp.vocab_size), size=mdp.n_nonterminal))


def rollout_batch(mdp, policy, n_rollouts, rng, start_state=None):
    """Vectorized ancestral rollouts from the first prompt (or a given state).

    Returns (states, actions) int arrays of shape (n_rollouts, horizon) with
    -1 padding once a rollout has reached the terminal state.
    """
    n = mdp.n_nonterminal
    cum = np.cumsum(policy.probs, axis=1)
    s0 = int(mdp.prompts[0]) if start_state is None else int(start_state)
    s = np.full(n_rollouts, s0, dtype=np.int64)
    states = np.full((n_rollouts, mdp.horizon), -1, dtype=np.int64)
    actions = np.full((n_rollouts, mdp.horizon), -1, dtype=np.int64)
    for t in range(mdp.horizon):
        live = s < n
        if not np.any(live):
            break
        u = rng.random(int(live.sum()))
        a = (cum[s[live]] < u[:, None]).sum(axis=1)
        a = np.minimum(a, mdp.vocab_size - 1)
        states[live, t] = s[live]
        actions[live, t] = a
        s = s.copy()
        s[live] = mdp.next_state[s[live], a]
    return states, actions
