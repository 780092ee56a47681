"""Realistic-teacher track: additively smoothed character n-gram teachers
trained on a bundled text, their prefix-tree MDP binding, and the sparsity
profiler for teacher conditionals.
"""

from collections import deque
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .distill import _row_cumulatives
from .errors import SizeLimitError
from .mdp import DEFAULT_ENTRY_CAP, Policy, TokenMdp

DEFAULT_VOCAB_CAP = 256

EOS_SYMBOL = "<eos>"


@dataclass(eq=False)
class NgramTeacher:
    """Character model P(next char | previous ``order`` chars).

    The vocabulary is the corpus character set plus an end-of-sequence token
    (the last id). Additive smoothing keeps every conditional strictly
    positive; unseen contexts fall back to the uniform distribution.
    """

    order: int
    chars: str
    delta: float
    counts: dict  # context tuple of ids -> count vector over the vocabulary

    @property
    def vocab_size(self):
        return len(self.chars) + 1

    @property
    def eos_id(self):
        return len(self.chars)

    def char_ids(self, text):
        lookup = {c: i for i, c in enumerate(self.chars)}
        try:
            return tuple(lookup[c] for c in text)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in the teacher vocabulary")

    def conditional(self, context_ids):
        v = self.vocab_size
        c = self.counts.get(tuple(context_ids))
        if c is None:
            return np.full(v, 1.0 / v)
        smoothed = c + self.delta
        return smoothed / smoothed.sum()


def train_ngram(text, n, delta, vocab_cap=DEFAULT_VOCAB_CAP):
    """Maximum-likelihood n-gram counts with additive smoothing.

    ``n`` is the context length; the text contributes one transition per
    position with a full-length context plus a final end-of-sequence event.
    """
    if not text:
        raise ValueError("text must be nonempty")
    if n < 1:
        raise ValueError("n must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    chars = "".join(sorted(set(text)))
    v = len(chars) + 1
    if v > vocab_cap:
        raise SizeLimitError(f"vocabulary of {v} exceeds the cap of {vocab_cap}")
    lookup = {c: i for i, c in enumerate(chars)}
    ids = [lookup[c] for c in text]

    counts = {}

    def bump(context, token):
        vec = counts.get(context)
        if vec is None:
            vec = np.zeros(v)
            counts[context] = vec
        vec[token] += 1.0

    for i in range(n, len(ids)):
        bump(tuple(ids[i - n : i]), ids[i])
    bump(tuple(ids[len(ids) - n :]), v - 1)  # end of sequence
    return NgramTeacher(order=n, chars=chars, delta=delta, counts=counts)


def ngram_to_mdp(teacher, prompts, horizon, gamma=0.99, entry_cap=DEFAULT_ENTRY_CAP):
    """Bind an n-gram teacher to a prefix-tree MDP.

    Rewards are r(s, a) = log pi*(a|s), the behavior-cloning-consistent
    choice, finite thanks to smoothing. The end-of-sequence action jumps to
    the terminal from any depth. Note the teacher is generally NOT the
    soft-optimal policy for this reward, so bound certification on this track
    is report-only.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not prompts:
        raise ValueError("at least one prompt is required")
    v = teacher.vocab_size
    eos = teacher.eos_id

    prompt_ids = [teacher.char_ids(p) for p in prompts]
    # BFS over (prompt, generated suffix); depth horizon-1 nodes and the EOS
    # action close to the terminal.
    contexts = []   # full id sequence per state
    depths = []
    queue = deque((pid, 0) for pid in prompt_ids)
    while queue:
        seq, depth = queue.popleft()
        idx = len(contexts)
        if (idx + 1) * v > entry_cap:
            raise SizeLimitError(
                f"corpus MDP would exceed {entry_cap} table entries; "
                "reduce horizon or prompt count"
            )
        contexts.append(seq)
        depths.append(depth)
        if depth + 1 < horizon:
            for a in range(v):
                if a == eos:
                    continue
                queue.append((seq + (a,), depth + 1))

    # Assign indices in BFS order and wire transitions.
    index = {seq: i for i, seq in enumerate(contexts)}
    n = len(contexts)
    next_state = np.full((n, v), n, dtype=np.int64)
    probs = np.empty((n, v))
    for i, seq in enumerate(contexts):
        if depths[i] + 1 < horizon:
            for a in range(v):
                if a != eos:
                    next_state[i, a] = index[seq + (a,)]
        probs[i] = teacher.conditional(seq[-teacher.order :])

    mdp = TokenMdp(
        vocab_size=v,
        horizon=horizon,
        gamma=gamma,
        prompts=np.array([index[pid] for pid in prompt_ids], dtype=np.int64),
        next_state=next_state,
        reward=np.log(probs),
    )
    return mdp, Policy(probs=probs)


@dataclass(eq=False)
class SparsityProfile:
    """Rank-wise mean of sorted teacher probabilities over visited states."""

    mean_probs: np.ndarray
    cumulative: np.ndarray
    n_contexts: int

    def cumulative_at(self, rank):
        """Cumulative mass of the top ``rank`` tokens (clipped to the vocabulary)."""
        return float(self.cumulative[min(rank, self.cumulative.shape[0]) - 1])

    def csv_rows(self):
        return [
            (rank + 1, float(self.mean_probs[rank]), float(self.cumulative[rank]))
            for rank in range(self.mean_probs.shape[0])
        ]


SPARSITY_CSV_HEADER = ("rank", "mean_prob", "cumulative")


def sparsity_profile(policy, mdp, n_sequences, seed=0):
    """Sample rollouts and average the descending-sorted policy rows rank-wise.

    Sequences start round-robin from the prompts; every visited non-terminal
    state contributes one sorted row.
    """
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    policy.validate()
    cum, last = _row_cumulatives(policy.probs)
    acc = np.zeros(mdp.vocab_size)
    n_contexts = 0
    n_prompts = len(mdp.prompts)
    for i in range(n_sequences):
        rng = np.random.default_rng([seed, i])
        s = int(mdp.prompts[i % n_prompts])
        while s != mdp.terminal_state:
            acc += np.sort(policy.probs[s])[::-1]
            n_contexts += 1
            u = rng.random()
            a = min(int(np.searchsorted(cum[s], u, side="right")), int(last[s]))
            s = int(mdp.next_state[s, a])
    mean = acc / n_contexts
    return SparsityProfile(
        mean_probs=mean, cumulative=np.cumsum(mean), n_contexts=n_contexts
    )


def load_bundled_corpus():
    """The text checked into the package for hermetic corpus-track runs."""
    return resources.files("toptd.data").joinpath("corpus.txt").read_text(encoding="ascii")
