"""Structured-text (JSON) documents and deterministic CSV emission.

Floats are serialized with Python's shortest round-trip ``repr``, so every
document reloads bit-for-bit and re-serializes byte-identically.
"""

import csv
import json
import math

import numpy as np

from .mdp import Policy, TokenMdp


def _floats(a):
    return [float(x) for x in np.asarray(a).ravel()]


def _ints(a):
    return [int(x) for x in np.asarray(a).ravel()]


def dumps(doc):
    return json.dumps(doc, ensure_ascii=True, separators=(", ", ": ")) + "\n"


def write_doc(path, doc):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps(doc))


def read_doc(path):
    with open(path, "r", encoding="ascii") as fh:
        return json.load(fh)


def mdp_to_doc(mdp):
    return {
        "vocab_size": int(mdp.vocab_size),
        "horizon": int(mdp.horizon),
        "gamma": float(mdp.gamma),
        "prompts": _ints(mdp.prompts),
        "next": _ints(mdp.next_state),
        "reward": _floats(mdp.reward),
    }


def mdp_from_doc(doc):
    v = int(doc["vocab_size"])
    nxt = np.asarray(doc["next"], dtype=np.int64).reshape(-1, v)
    rew = np.asarray(doc["reward"], dtype=np.float64).reshape(-1, v)
    return TokenMdp(
        vocab_size=v,
        horizon=int(doc["horizon"]),
        gamma=float(doc["gamma"]),
        prompts=np.asarray(doc["prompts"], dtype=np.int64),
        next_state=nxt,
        reward=rew,
    )


def table_to_doc(kind, values, shape):
    return {"kind": kind, "shape": [int(s) for s in shape], "values": _floats(values)}


def table_from_doc(doc):
    return np.asarray(doc["values"], dtype=np.float64).reshape(doc["shape"])


def policy_to_doc(policy):
    doc = table_to_doc("policy", policy.probs, policy.probs.shape)
    if policy.support is not None:
        doc["support"] = _ints(policy.support.astype(np.int64))
    return doc


def policy_from_doc(doc):
    probs = table_from_doc(doc)
    support = None
    if "support" in doc:
        support = np.asarray(doc["support"], dtype=bool).reshape(probs.shape)
    return Policy(probs=probs, support=support)


def format_cell(value):
    """Fixed, locale-free text form for one CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(value)


def write_csv(path, header, rows):
    """Write rows (sequences aligned with ``header``) deterministically."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
