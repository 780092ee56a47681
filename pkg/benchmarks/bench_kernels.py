"""Benchmark the compiled kernel backend against the pure-numpy fallback.

Times the three kernel-bound workloads (full soft value iteration, restricted
value iteration, and the contraction audit) on a sizable instance under each
available backend and reports the speedup.

    python benchmarks/bench_kernels.py [--vocab 24] [--horizon 4] [--trials 50]
"""

import argparse
import time

import numpy as np

from toptd import kernels as K
from toptd.mdp import MdpGenSpec, build_token_mdp
from toptd.soft_rl import soft_value_iteration
from toptd.top_p import build_candidate_sets, top_p_soft_value_iteration, verify_contraction


def _best_of(fn, repeats=3):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(args):
    mdp = build_token_mdp(
        MdpGenSpec(vocab_size=args.vocab, horizon=args.horizon, gamma=args.gamma, seed=args.seed)
    )
    _, teacher = soft_value_iteration(mdp)
    sets = build_candidate_sets(teacher, args.p)
    print(
        f"instance: |V|={args.vocab} H={args.horizon} gamma={args.gamma} "
        f"-> {mdp.n_nonterminal} states, {sets.nnz} supported entries "
        f"(p={args.p})"
    )

    workloads = {
        "soft_value_iteration": lambda: soft_value_iteration(mdp, tol=1e-10),
        "top_p_value_iteration": lambda: top_p_soft_value_iteration(mdp, sets, tol=1e-10),
        f"contraction_audit_x{args.trials}": lambda: verify_contraction(
            mdp, sets, n_trials=args.trials, seed=0
        ),
    }

    rng = np.random.default_rng(0)
    qbar = rng.normal(0, 1, sets.nnz)
    proj = sets.gather(teacher.probs)
    proj /= np.repeat(K.seg_sum(proj, sets.offsets), sets.sizes)
    r_flat = sets.gather(mdp.reward)
    next_flat = sets.gather(mdp.next_state)
    q_dense = rng.normal(0, 1, mdp.reward.shape)
    kernels = {
        "kernel dense_backup_opt": lambda: K.dense_backup_opt(
            q_dense, mdp.reward, mdp.next_state, args.gamma
        ),
        "kernel restricted_backup_eval": lambda: K.restricted_backup_eval(
            qbar, proj, r_flat, next_flat, sets.offsets, args.gamma
        ),
        "kernel seg_logsumexp": lambda: K.seg_logsumexp(qbar, sets.offsets),
    }

    results = {}
    rows = dict(workloads)
    rows.update(kernels)
    for backend in K.available_backends():
        K.set_backend(backend)
        for name, fn in rows.items():
            fn()  # warm up
            results[(backend, name)] = _best_of(fn)

    width = max(len(n) for n in rows)
    backends = K.available_backends()
    header = f"{'workload':<{width}}  " + "  ".join(f"{b:>10}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for name in rows:
        cells = [f"{results[(b, name)] * 1e3:9.2f}ms" for b in backends]
        line = f"{name:<{width}}  " + "  ".join(cells)
        if len(backends) == 2:
            line += f"  {results[('numpy', name)] / results[('compiled', name)]:7.2f}x"
        print(line)

    if len(backends) == 2:
        check = {}
        for backend in backends:
            K.set_backend(backend)
            q, _ = soft_value_iteration(mdp, tol=1e-10)
            check[backend] = q
        drift = float(np.max(np.abs(check["numpy"] - check["compiled"])))
        print(f"backend agreement on Q*: max |diff| = {drift:.3e}")
    else:
        print("compiled backend unavailable; timed the numpy fallback only")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--vocab", type=int, default=24)
    parser.add_argument("--horizon", type=int, default=4)
    parser.add_argument("--gamma", type=float, default=0.9)
    parser.add_argument("--p", type=float, default=0.8)
    parser.add_argument("--trials", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    run(parser.parse_args())


if __name__ == "__main__":
    main()
