"""Acceptance suite: every criterion runs at its stated tolerance and prints
one pass/fail line (run with ``pytest tests/test_acceptance.py -v -s``)."""

import csv
import os
import time
from pathlib import Path

import numpy as np
import pytest

import toptd
from toptd import kernels as K
from toptd.cli import main as cli_main
from toptd.distill import (
    ABLATION_CSV_HEADER,
    ablate_p,
    evaluate_student,
    generate_teacher_dataset,
)
from toptd.iql import IqlConfig, draw_batch, finite_diff_check, iql_gradient, iql_objective
from toptd.mdp import MdpGenSpec, build_token_mdp
from toptd.serialize import write_csv
from toptd.soft_rl import (
    OccupancyMeasure,
    inverse_soft_bellman,
    occupancy_measure,
    soft_policy_evaluation,
    soft_value_iteration,
    telescopic_residual,
    uniform_start,
)
from toptd.top_p import (
    build_candidate_sets,
    kappa,
    project_policy,
    top_p_bellman_apply,
    top_p_soft_value_iteration,
    verify_bounds,
    verify_contraction,
)


def _line(criterion, ok, detail):
    print(f"{criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{criterion} failed: {detail}"


# --- A1: contraction -------------------------------------------------------


def test_a1_contraction():
    t0 = time.time()
    mdp = build_token_mdp(MdpGenSpec(vocab_size=12, horizon=4, gamma=0.9, seed=0))
    _, teacher = soft_value_iteration(mdp)
    worst = 0.0
    for p in (0.5, 0.8, 1.0):
        sets = build_candidate_sets(teacher, p)
        worst = max(worst, verify_contraction(mdp, sets, n_trials=1000, seed=0))

    sets = build_candidate_sets(teacher, 0.8)
    rng = np.random.default_rng(1)
    pi = toptd.Policy(probs=rng.dirichlet(np.ones(12), size=mdp.n_nonterminal))
    q = rng.normal(0, 2, sets.nnz)
    shift = 5.0
    b1 = top_p_bellman_apply(mdp, pi, q, sets)
    b2 = top_p_bellman_apply(mdp, pi, q + shift, sets)
    witness = float(np.max(np.abs(b2 - b1))) / shift
    elapsed = time.time() - t0

    ok = worst <= 0.9 + 1e-9 and abs(witness - 0.9) <= 1e-12 and elapsed < 30
    _line(
        "A1 contraction",
        ok,
        f"max ratio {worst:.12f}, witness {witness:.15f}, {elapsed:.1f}s",
    )


# --- A2/A3: sandwich and gap bounds ----------------------------------------


@pytest.fixture(scope="module")
def bound_battery():
    t0 = time.time()
    reports = []
    for seed in range(50):
        mdp = build_token_mdp(MdpGenSpec(vocab_size=8, horizon=3, gamma=0.9, seed=seed))
        _, teacher = soft_value_iteration(mdp, tol=1e-10)
        for p in (0.5, 0.8, 0.95):
            reports.append(
                verify_bounds(
                    mdp,
                    teacher,
                    p,
                    tol=1e-6,
                    solver_tol=1e-10,
                    contraction_trials=3,
                    seed=seed,
                    instance_seed=seed,
                )
            )
    return reports, time.time() - t0


def test_a2_sandwich(bound_battery):
    reports, elapsed = bound_battery
    worst = max(r.sandwich_violation for r in reports)
    ok = worst <= 1e-6 and elapsed < 60
    _line("A2 sandwich", ok, f"max violation {worst:.3e} over {len(reports)} runs, {elapsed:.1f}s")


def test_a3_gap_bounds(bound_battery):
    reports, _ = bound_battery
    nominal_ok = all(
        r.gap_proj <= r.kappa_nominal + 1e-6 and r.gap_opt <= r.kappa_nominal + 1e-6
        for r in reports
    )
    realized_ok = all(
        r.gap_proj <= r.kappa_realized + 1e-6 and r.gap_opt <= r.kappa_realized + 1e-6
        for r in reports
    )
    k = kappa(0.8, 0.99)
    kappa_ok = abs(k - 22.09121) <= 1e-4
    margin = min(r.kappa_realized - max(r.gap_proj, r.gap_opt) for r in reports)
    ok = nominal_ok and realized_ok and kappa_ok
    _line(
        "A3 gap bounds",
        ok,
        f"kappa(0.8, 0.99) = {k:.5f}, tightest realized margin {margin:.3e}",
    )


# --- A4: p = 1 reduction ----------------------------------------------------


def test_a4_p_one_reduction():
    mdp = build_token_mdp(MdpGenSpec(vocab_size=6, horizon=3, gamma=0.9, seed=4))
    q_star, teacher = soft_value_iteration(mdp, tol=1e-12)
    sets = build_candidate_sets(teacher, 1.0)

    qbar, _ = top_p_soft_value_iteration(mdp, sets, tol=1e-12)
    vi_gap = float(np.max(np.abs(qbar - sets.gather(q_star))))

    rng = np.random.default_rng(0)
    proj_gap = 0.0
    for _ in range(10):
        pi = toptd.Policy(probs=rng.dirichlet(np.ones(6), size=mdp.n_nonterminal))
        projected = project_policy(pi, sets)
        proj_gap = max(proj_gap, float(np.max(np.abs(projected.probs - pi.probs))))

    cfg = IqlConfig(alpha=0.1, gamma=0.9, p=1.0)
    q = rng.normal(0, 1, mdp.reward.shape)
    data = occupancy_measure(mdp, teacher, uniform_start(mdp))
    masked = iql_objective(q, data, mdp, sets, cfg)
    v_full = np.append(K.dense_logsumexp(q), 0.0)
    w = (1 - mdp.gamma) * data.mass
    x = q - mdp.gamma * v_full[mdp.next_state]
    unmasked_phi = float(np.sum(w * toptd.phi(x, 0.1)))
    unmasked_td = float(np.sum(w * (v_full[: mdp.n_nonterminal][:, None] - mdp.gamma * v_full[mdp.next_state])))
    obj_gap = max(
        abs(masked.term_phi - unmasked_phi),
        abs(masked.term_td - unmasked_td),
        abs(masked.total - (unmasked_phi - unmasked_td)),
    )

    ok = vi_gap <= 1e-8 and proj_gap <= 1e-12 and obj_gap <= 1e-10
    _line(
        "A4 p=1 reduction",
        ok,
        f"VI gap {vi_gap:.2e}, projection gap {proj_gap:.2e}, objective gap {obj_gap:.2e}",
    )


# --- A5: telescopic identity ------------------------------------------------


def test_a5_telescopic_identity():
    mdp = build_token_mdp(MdpGenSpec(vocab_size=8, horizon=3, gamma=0.9, seed=1))
    _, teacher = soft_value_iteration(mdp)
    start = uniform_start(mdp)
    occ = occupancy_measure(mdp, teacher, start)
    n = mdp.n_nonterminal

    rng = np.random.default_rng(0)
    good = max(telescopic_residual(mdp, rng.normal(0, 2, n), occ, start) for _ in range(100))

    fake_mass = np.full((n, mdp.vocab_size), 1.0)
    fake_mass *= (1.0 / (1.0 - mdp.gamma)) / fake_mass.sum()
    fake = OccupancyMeasure(mass=fake_mass, terminal_mass=0.0, start_dist=start)
    rng = np.random.default_rng(0)
    bad = min(telescopic_residual(mdp, rng.normal(0, 2, n), fake, start) for _ in range(100))

    ok = good <= 1e-8 and bad > 1e-3
    _line("A5 telescopic identity", ok, f"exact residual {good:.2e}, negative control {bad:.2e}")


# --- A6: gradient correctness -----------------------------------------------


def test_a6_gradient_correctness():
    worst = 0.0
    for i in range(100):
        gamma = [0.0, 0.9, 0.99][i % 3]
        alpha = [0.1, 1.0, 10.0][(i // 3) % 3]
        rng = np.random.default_rng([1000, i])
        p = float(rng.uniform(0.4, 1.0))
        mdp = build_token_mdp(
            MdpGenSpec(vocab_size=5, horizon=2, n_prompts=2, gamma=gamma, seed=i)
        )
        _, teacher = soft_value_iteration(mdp)
        sets = build_candidate_sets(teacher, p)
        cfg = IqlConfig(alpha=alpha, gamma=gamma, p=p, seed=i)
        q = rng.normal(0, 1, mdp.reward.shape)
        if i % 2 == 0:
            data = occupancy_measure(mdp, project_policy(teacher, sets), uniform_start(mdp))
        else:
            dataset = generate_teacher_dataset(mdp, teacher, sets, n_per_prompt=8, seed=i)
            data = draw_batch(dataset, 64, gamma, np.random.default_rng([55, i]))
        worst = max(worst, finite_diff_check(q, data, mdp, sets, cfg, epsilon=1e-5, seed=i))
        grad = iql_gradient(q, data, mdp, sets, cfg)
        assert np.all(grad[~sets.member] == 0.0)

    lm_worst = 0.0
    from toptd.distill import lm_objective

    for i in range(20):
        rng = np.random.default_rng([77, i])
        q = rng.normal(0, 1, (6, 4))

        class Batch:
            s = rng.integers(0, 6, size=12)
            a = rng.integers(0, 4, size=12)

        _, grad = lm_objective(q, Batch)
        eps = 1e-6
        for s in range(6):
            for a in range(4):
                qp = q.copy()
                qp[s, a] += eps
                jp, _ = lm_objective(qp, Batch)
                qp[s, a] -= 2 * eps
                jm, _ = lm_objective(qp, Batch)
                lm_worst = max(lm_worst, abs((jp - jm) / (2 * eps) - grad[s, a]))

    ok = worst <= 1e-5 and lm_worst <= 1e-6
    _line(
        "A6 gradient correctness",
        ok,
        f"IQL max rel err {worst:.2e}, LM auxiliary max err {lm_worst:.2e}",
    )


# --- A7: reward recovery ----------------------------------------------------


def test_a7_reward_recovery():
    worst = 0.0
    for seed in range(20):
        mdp = build_token_mdp(
            MdpGenSpec(vocab_size=5, horizon=3, n_prompts=2, gamma=0.9, seed=seed)
        )
        rng = np.random.default_rng([3, seed])
        pi = toptd.Policy(probs=rng.dirichlet(np.ones(5), size=mdp.n_nonterminal))
        q = soft_policy_evaluation(mdp, pi, tol=1e-10)
        recovered = inverse_soft_bellman(mdp, q, pi)
        worst = max(worst, float(np.max(np.abs(recovered - mdp.reward))))
    ok = worst <= 1e-8
    _line("A7 reward recovery", ok, f"max |T(Q^pi) - r| = {worst:.2e} over 20 instances")


# --- A8: end-to-end distillation --------------------------------------------


def test_a8_end_to_end_distill():
    t0 = time.time()
    mdp = build_token_mdp(
        MdpGenSpec(vocab_size=8, horizon=3, n_prompts=4, gamma=0.9, seed=0)
    )
    _, teacher = soft_value_iteration(mdp)
    cfg = IqlConfig(
        alpha=0.1,
        gamma=0.9,
        p=0.8,
        learning_rate=1.0,
        epochs=15000,
        exact_mode=True,
        seed=0,
    )
    q, history = toptd.bellman_distill(mdp, teacher, cfg, step_halving=True)
    elapsed = time.time() - t0

    totals = [row["J_total"] for row in history]
    monotone = all(b >= a - 1e-9 for a, b in zip(totals, totals[1:]))
    skips = sum(row["n_skipped"] for row in history)
    sets = build_candidate_sets(teacher, 0.8)
    report = evaluate_student(mdp, teacher, q, sets)
    budget = kappa(0.8, 0.9) + 0.5

    ok = (
        monotone
        and skips == 0
        and report.kl_forward < 0.05
        and report.q_gap_supported <= budget
        and elapsed < 300
    )
    _line(
        "A8 end-to-end distill",
        ok,
        f"monotone={monotone}, KL {report.kl_forward:.4f} < 0.05, "
        f"Q gap {report.q_gap_supported:.3f} <= {budget:.3f}, {elapsed:.1f}s",
    )


# --- A9: desk-scale table/figure analogs -------------------------------------


def test_a9_ablation_and_sparsity(tmp_path):
    mdp = build_token_mdp(MdpGenSpec(vocab_size=6, horizon=2, n_prompts=2, gamma=0.9, seed=2))
    _, teacher = soft_value_iteration(mdp)
    cfg = IqlConfig(
        alpha=0.1, gamma=0.9, p=0.8, learning_rate=0.5, epochs=60, exact_mode=True, seed=0
    )
    rows = ablate_p(mdp, teacher, [0.5, 0.8, 1.0], cfg, step_halving=True)
    path = tmp_path / "ablation.csv"
    write_csv(path, ABLATION_CSV_HEADER, rows)
    parsed = list(csv.DictReader(open(path)))
    ablation_ok = (
        [float(r["p"]) for r in parsed] == [0.5, 0.8, 1.0]
        and all(np.isfinite(float(r["kl_forward"])) for r in parsed)
        and all(set(r) == set(ABLATION_CSV_HEADER) for r in parsed)
    )

    from toptd.corpus import load_bundled_corpus, ngram_to_mdp, sparsity_profile, train_ngram

    ngram = train_ngram(load_bundled_corpus(), n=3, delta=0.1)
    cmdp, cpolicy = ngram_to_mdp(ngram, ["the "], horizon=3, gamma=0.9)
    profile = sparsity_profile(cpolicy, cmdp, n_sequences=20, seed=0)
    monotone = bool(np.all(np.diff(profile.mean_probs) <= 1e-15))
    normalized = abs(profile.cumulative[-1] - 1.0) <= 1e-9
    top7, top50 = profile.cumulative_at(7), profile.cumulative_at(50)

    ok = ablation_ok and monotone and normalized
    _line(
        "A9 table/figure analogs",
        ok,
        f"3 ablation rows; profile monotone={monotone}, cumulative mass "
        f"rank 7: {top7:.3f}, rank 50: {top50:.3f} (reported, not asserted)",
    )


# --- A10: determinism and the CI gate ----------------------------------------


def _csv_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*.csv"))
    }


def test_a10_determinism_and_gate(tmp_path):
    common = [
        "--set", "mdp.vocab_size=4",
        "--set", "mdp.horizon=2",
        "--set", "mdp.n_prompts=2",
        "--gamma", "0.9",
        "--epochs", "4",
        "--exact",
        "--set", "verify.n_instances=2",
        "--set", "verify.contraction_trials=10",
        "--set", "corpus.n=2",
        "--set", "corpus.horizon=2",
        "--set", "corpus.n_sequences=5",
        "--out", str(tmp_path),
    ]
    commands = ["make-mdp", "verify", "train", "distill", "ablate", "sparsity"]
    for command in commands:
        assert cli_main([command] + common) == 0
    first = _csv_bytes(tmp_path)
    for command in commands:
        assert cli_main([command] + common) == 0
    second = _csv_bytes(tmp_path)
    identical = first == second and len(first) >= 4

    os.environ["TOPTD_VERIFY_GAP_BIAS"] = "10"
    try:
        gate = cli_main(["verify"] + common) == 1
    finally:
        del os.environ["TOPTD_VERIFY_GAP_BIAS"]
    # Restore untampered outputs so the directory ends consistent.
    assert cli_main(["verify"] + common) == 0

    ok = identical and gate
    _line(
        "A10 determinism + CI gate",
        ok,
        f"{len(first)} CSVs byte-identical on rerun; biased verify exits 1",
    )
