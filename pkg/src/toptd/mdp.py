"""Finite autoregressive token MDPs with deterministic concatenation moves.

States are prefix nodes rooted at one or more prompts plus a single absorbing
terminal state. Non-terminal states are indexed ``0..n-1`` in breadth-first
order (prompts first); the terminal state is index ``n``. ``next_state`` and
``reward`` are dense ``(n, vocab_size)`` tables; the terminal self-loop has
reward 0 and is kept implicit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidPolicyError, SizeLimitError

DEFAULT_ENTRY_CAP = 2_000_000

ROW_SUM_ATOL = 1e-9


def _freeze(a):
    a.setflags(write=False)
    return a


@dataclass(eq=False)
class TokenMdp:
    vocab_size: int
    horizon: int
    gamma: float
    prompts: np.ndarray      # (n_prompts,) int64 state indices
    next_state: np.ndarray   # (n, vocab_size) int64, values in [0, n]
    reward: np.ndarray       # (n, vocab_size) float64

    @property
    def n_nonterminal(self):
        return self.next_state.shape[0]

    @property
    def terminal_state(self):
        return self.n_nonterminal

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.next_state.shape != self.reward.shape:
            raise ValueError("next_state and reward shapes differ")
        if self.next_state.shape[1] != self.vocab_size:
            raise ValueError("table width does not match vocab_size")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("reward table contains non-finite entries")
        _freeze(self.prompts)
        _freeze(self.next_state)
        _freeze(self.reward)

    def depths(self):
        """Distance of each non-terminal state from its prompt (BFS)."""
        n = self.n_nonterminal
        depth = np.full(n, -1, dtype=np.int64)
        frontier = np.unique(self.prompts)
        depth[frontier] = 0
        d = 0
        while frontier.size:
            succ = self.next_state[frontier].ravel()
            succ = np.unique(succ[succ < n])
            succ = succ[depth[succ] < 0]
            depth[succ] = d + 1
            frontier = succ
            d += 1
        return depth


@dataclass(eq=False)
class Policy:
    """Row-stochastic action distribution per non-terminal state.

    ``support`` is an optional boolean mask of structurally allowed entries;
    ``None`` means full support. Probabilities outside the support are
    exactly zero.
    """

    probs: np.ndarray
    support: np.ndarray = None

    def __post_init__(self):
        _freeze(self.probs)
        if self.support is not None:
            _freeze(self.support)

    def validate(self, atol=ROW_SUM_ATOL):
        p = self.probs
        if np.any(p < 0.0) or not np.all(np.isfinite(p)):
            raise InvalidPolicyError("policy has negative or non-finite entries")
        sums = p.sum(axis=1)
        bad = np.abs(sums - 1.0) > atol
        if np.any(bad):
            s = int(np.argmax(bad))
            raise InvalidPolicyError(f"policy row {s} sums to {sums[s]!r}, not 1")
        if self.support is not None and np.any(p[~self.support] != 0.0):
            raise InvalidPolicyError("policy has mass outside its structural support")


@dataclass(frozen=True)
class MdpGenSpec:
    vocab_size: int
    horizon: int
    n_prompts: int = 1
    reward_law: str = "uniform"   # "uniform" -> U[-1, 1], "normal" -> N(0, scale)
    reward_scale: float = 1.0
    gamma: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be >= 1")
        if self.reward_law not in ("uniform", "normal"):
            raise ValueError(f"unknown reward_law {self.reward_law!r}")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")


def build_token_mdp(spec, entry_cap=DEFAULT_ENTRY_CAP):
    """Generate the prefix-tree MDP described by ``spec``.

    Non-terminal states are the prefix nodes at depths ``0..horizon-1`` for
    each prompt; depth ``horizon-1`` states transition to the terminal.
    The same spec always produces a bit-identical MDP.
    """
    v, h, p = spec.vocab_size, spec.horizon, spec.n_prompts
    per_prompt = (v**h - 1) // (v - 1)   # 1 + v + ... + v^(h-1)
    n = p * per_prompt
    if n * v > entry_cap:
        raise SizeLimitError(
            f"MDP would need {n * v} reward entries, above the cap of {entry_cap}"
        )

    # Depth-d nodes of prompt k occupy a contiguous block; children of the
    # j-th node at depth d (within its prompt) are at rank j*v + a at depth d+1.
    next_state = np.empty((n, v), dtype=np.int64)
    actions = np.arange(v, dtype=np.int64)
    for k in range(p):
        base = k * per_prompt
        block_start = base
        for d in range(h):
            count = v**d
            rows = np.arange(count, dtype=np.int64)
            if d + 1 < h:
                child_start = block_start + count
                next_state[block_start : block_start + count] = (
                    child_start + rows[:, None] * v + actions[None, :]
                )
            else:
                next_state[block_start : block_start + count] = n
            block_start += count

    rng = np.random.default_rng(spec.seed)
    if spec.reward_law == "uniform":
        reward = rng.uniform(-1.0, 1.0, size=(n, v))
    else:
        reward = rng.normal(0.0, spec.reward_scale, size=(n, v))

    prompts = np.arange(p, dtype=np.int64) * per_prompt
    return TokenMdp(
        vocab_size=v,
        horizon=h,
        gamma=spec.gamma,
        prompts=prompts,
        next_state=next_state,
        reward=reward,
    )


def successors(mdp, s):
    """All (action, successor) pairs of state ``s``; the terminal self-loops."""
    n = mdp.n_nonterminal
    if not 0 <= s <= n:
        raise IndexError(f"state index {s} out of range [0, {n}]")
    if s == n:
        return [(0, n)]
    return list(enumerate(mdp.next_state[s]))


def uniform_policy(mdp):
    n, v = mdp.next_state.shape
    return Policy(probs=np.full((n, v), 1.0 / v))


def check_token_mdp(mdp):
    """Validate the structural invariants of a token MDP.

    Checks totality, acyclicity of the non-terminal subgraph, reachability of
    every non-terminal state from some prompt, and finite rewards. Raises
    ``ValueError`` on the first violation.
    """
    n = mdp.n_nonterminal
    if np.any(mdp.next_state < 0) or np.any(mdp.next_state > n):
        raise ValueError("next_state contains out-of-range successors")
    if np.any(mdp.prompts < 0) or np.any(mdp.prompts >= n):
        raise ValueError("prompt indices out of range")
    if not np.all(np.isfinite(mdp.reward)):
        raise ValueError("reward table contains non-finite entries")

    depth = mdp.depths()
    if np.any(depth < 0):
        raise ValueError("some non-terminal states are unreachable from the prompts")

    # Prefix-tree property (implies acyclicity): every non-terminal edge
    # goes one level deeper.
    src = np.repeat(np.arange(n), mdp.vocab_size)
    dst = mdp.next_state.ravel()
    keep = dst < n
    if np.any(depth[dst[keep]] != depth[src[keep]] + 1):
        raise ValueError("a non-terminal transition does not increase depth by one")
    return True
