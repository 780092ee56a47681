"""Command-line drivers tying the modules into reproducible experiment runs.

Each command writes a config echo (``metadata.cfg``), its metrics CSVs, and
final tables into ``<out>/<command>/``. Reruns with the same configuration
and seed produce byte-identical outputs. ``toptd verify`` exits non-zero iff
any certified bound fails, making it usable as a CI gate.
"""

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig
from .corpus import (
    SPARSITY_CSV_HEADER,
    load_bundled_corpus,
    ngram_to_mdp,
    sparsity_profile,
    train_ngram,
)
from .distill import (
    ABLATION_CSV_HEADER,
    _prompt_split,
    ablate_p,
    bellman_distill,
    evaluate_student,
    generate_teacher_dataset,
)
from .errors import ConfigError
from .iql import IqlConfig, train_iql
from .mdp import MdpGenSpec, build_token_mdp
from .serialize import (
    mdp_to_doc,
    policy_to_doc,
    table_to_doc,
    write_csv,
    write_doc,
)
from .soft_rl import occupancy_measure, soft_value_iteration, uniform_start
from .top_p import (
    BOUND_CSV_HEADER,
    BoundReport,
    build_candidate_sets,
    project_policy,
    verify_bounds,
)

COMMANDS = ("make-mdp", "verify", "train", "distill", "ablate", "sparsity")


def _gen_spec(cfg, seed=None):
    return MdpGenSpec(
        vocab_size=cfg["mdp.vocab_size"],
        horizon=cfg["mdp.horizon"],
        n_prompts=cfg["mdp.n_prompts"],
        reward_law=cfg["mdp.reward_law"],
        reward_scale=cfg["mdp.reward_scale"],
        gamma=cfg["mdp.gamma"],
        seed=cfg["seed"] if seed is None else seed,
    )


def _iql_config(cfg):
    return IqlConfig(
        alpha=cfg["iql.alpha"],
        gamma=cfg["mdp.gamma"],
        p=cfg["iql.p"],
        learning_rate=cfg["iql.learning_rate"],
        batch_size=cfg["iql.batch_size"],
        epochs=cfg["iql.epochs"],
        q_min=cfg["iql.q_min"],
        seed=cfg["seed"],
        projected_sampling=cfg["iql.projected_sampling"],
        exact_mode=cfg["iql.exact_mode"],
    )


def _prepare(cfg, command):
    out = os.path.join(cfg.out_dir(), command)
    os.makedirs(out, exist_ok=True)
    cfg.write(os.path.join(out, "metadata.cfg"))
    return out


def cmd_make_mdp(cfg):
    out = _prepare(cfg, "make-mdp")
    mdp = build_token_mdp(_gen_spec(cfg))
    q_star, teacher = soft_value_iteration(mdp)
    write_doc(os.path.join(out, "mdp.json"), mdp_to_doc(mdp))
    write_doc(os.path.join(out, "teacher.json"), policy_to_doc(teacher))
    write_doc(os.path.join(out, "q_star.json"), table_to_doc("qtable", q_star, q_star.shape))
    print(f"wrote MDP, teacher, and optimal Q table to {out}")
    return 0


def cmd_verify(cfg):
    out = _prepare(cfg, "verify")
    # Test hook: bias added to the measured gaps (in units of kappa) so the
    # failure path of the gate is itself testable.
    bias = float(os.environ.get("TOPTD_VERIFY_GAP_BIAS", "0") or 0.0)
    rows = []
    all_pass = True
    for i in range(cfg["verify.n_instances"]):
        seed = cfg["seed"] + i
        mdp = build_token_mdp(_gen_spec(cfg, seed=seed))
        _, teacher = soft_value_iteration(mdp)
        for p in cfg["verify.p_list"]:
            report = verify_bounds(
                mdp,
                teacher,
                float(p),
                tol=cfg["verify.tol"],
                strict=cfg["verify.strict"],
                contraction_trials=cfg["verify.contraction_trials"],
                seed=seed,
                instance_seed=seed,
            )
            if bias:
                report = _bias_report(report, bias, cfg["verify.tol"])
            rows.append(report.csv_row())
            all_pass = all_pass and report.passed
    write_csv(os.path.join(out, "bound_reports.csv"), BOUND_CSV_HEADER, rows)
    print(f"{'PASS' if all_pass else 'FAIL'}: {len(rows)} bound reports -> {out}")
    return 0 if all_pass else 1


def _bias_report(report, bias, tol):
    gap_proj = report.gap_proj + bias * report.kappa_nominal
    gap_opt = report.gap_opt + bias * report.kappa_nominal
    checks = dict(report.checks)
    checks["gap_proj_nominal"] = gap_proj <= report.kappa_nominal + tol
    checks["gap_opt_nominal"] = gap_opt <= report.kappa_nominal + tol
    checks["gap_proj_realized"] = gap_proj <= report.kappa_realized + tol
    checks["gap_opt_realized"] = gap_opt <= report.kappa_realized + tol
    return BoundReport(
        vocab_size=report.vocab_size,
        horizon=report.horizon,
        gamma=report.gamma,
        p=report.p,
        min_realized_mass=report.min_realized_mass,
        kappa_nominal=report.kappa_nominal,
        kappa_realized=report.kappa_realized,
        gap_proj=gap_proj,
        gap_opt=gap_opt,
        sandwich_violation=report.sandwich_violation,
        contraction_max_ratio=report.contraction_max_ratio,
        checks=checks,
        asserted_gap_bounds=report.asserted_gap_bounds,
        seed=report.seed,
    )


def _teacher_setup(cfg):
    mdp = build_token_mdp(_gen_spec(cfg))
    _, teacher = soft_value_iteration(mdp)
    return mdp, teacher


def cmd_train(cfg):
    out = _prepare(cfg, "train")
    mdp, teacher = _teacher_setup(cfg)
    icfg = _iql_config(cfg)
    sets = build_candidate_sets(teacher, icfg.p)
    sampling = project_policy(teacher, sets) if icfg.projected_sampling else teacher
    if icfg.exact_mode:
        data = occupancy_measure(mdp, sampling, uniform_start(mdp))
    else:
        data = generate_teacher_dataset(
            mdp,
            teacher,
            sets if icfg.projected_sampling else None,
            n_per_prompt=cfg["distill.n_per_prompt"],
            seed=icfg.seed,
        )
    q, history = train_iql(
        mdp, data, sets, icfg, step_halving=cfg["distill.step_halving"]
    )
    history.write_csv(os.path.join(out, "metrics.csv"))
    write_doc(os.path.join(out, "q_final.json"), table_to_doc("qtable", q, q.shape))
    print(f"trained {icfg.epochs} epochs; final objective {history[-1]['J_total']!r}")
    return 0


def cmd_distill(cfg):
    out = _prepare(cfg, "distill")
    mdp, teacher = _teacher_setup(cfg)
    icfg = _iql_config(cfg)
    pt_data = None
    lam = cfg["distill.lm_weight"]
    if lam > 0:
        _, val_idx = _prompt_split(
            len(mdp.prompts), cfg["distill.val_fraction"], icfg.seed
        )
        pt_data = generate_teacher_dataset(
            mdp,
            teacher,
            None,
            n_per_prompt=cfg["distill.n_per_prompt"],
            seed=icfg.seed + 1,
            prompt_indices=val_idx,
        )
    q, history = bellman_distill(
        mdp,
        teacher,
        icfg,
        pt_data,
        lm_weight=lam if pt_data is not None else None,
        n_per_prompt=cfg["distill.n_per_prompt"],
        val_fraction=cfg["distill.val_fraction"],
        step_halving=cfg["distill.step_halving"],
    )
    sets = build_candidate_sets(teacher, icfg.p)
    report = evaluate_student(mdp, teacher, q, sets)
    history.write_csv(os.path.join(out, "metrics.csv"))
    write_doc(os.path.join(out, "q_best.json"), table_to_doc("qtable", q, q.shape))
    kls = [row["kl_to_proj_teacher"] for row in history]
    write_csv(
        os.path.join(out, "eval.csv"),
        ABLATION_CSV_HEADER,
        [
            (
                icfg.p,
                report.kl_forward,
                report.kl_reverse,
                report.return_gap,
                report.q_gap_supported,
                int(np.argmin(kls)),
                len(history),
            )
        ],
    )
    print(f"distilled at p={icfg.p}: forward KL {report.kl_forward!r}")
    return 0


def cmd_ablate(cfg):
    out = _prepare(cfg, "ablate")
    mdp, teacher = _teacher_setup(cfg)
    icfg = _iql_config(cfg)
    rows = ablate_p(
        mdp,
        teacher,
        [float(p) for p in cfg["ablate.p_list"]],
        icfg,
        n_per_prompt=cfg["distill.n_per_prompt"],
        val_fraction=cfg["distill.val_fraction"],
        step_halving=cfg["distill.step_halving"],
    )
    write_csv(os.path.join(out, "ablation.csv"), ABLATION_CSV_HEADER, rows)
    print(f"wrote {len(rows)} ablation rows to {out}")
    return 0


def cmd_sparsity(cfg):
    out = _prepare(cfg, "sparsity")
    path = cfg["corpus.path"]
    text = load_bundled_corpus() if not path else open(path, encoding="utf-8").read()
    teacher = train_ngram(text, cfg["corpus.n"], cfg["corpus.delta"])
    mdp, policy = ngram_to_mdp(
        teacher,
        list(cfg["corpus.prompts"]),
        cfg["corpus.horizon"],
        gamma=cfg["mdp.gamma"],
    )
    profile = sparsity_profile(policy, mdp, cfg["corpus.n_sequences"], seed=cfg["seed"])
    write_csv(os.path.join(out, "sparsity.csv"), SPARSITY_CSV_HEADER, profile.csv_rows())
    print(
        f"profiled {profile.n_contexts} contexts over a vocabulary of "
        f"{mdp.vocab_size}; cumulative mass at rank 7: "
        f"{profile.cumulative_at(7):.4f}, at rank 50: {profile.cumulative_at(50):.4f}"
    )
    return 0


_HANDLERS = {
    "make-mdp": cmd_make_mdp,
    "verify": cmd_verify,
    "train": cmd_train,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
    "sparsity": cmd_sparsity,
}


def _add_common_options(p):
    p.add_argument("--config", help="path to a flat-key configuration file")
    p.add_argument("--out", help="output directory root (default: $TOPTD_OUT or ./runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--p", type=float, help="nucleus mass threshold")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--q-min", type=float)
    p.add_argument("--exact", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument(
        "--projected-sampling", action=argparse.BooleanOptionalAction, default=None
    )
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any configuration key (JSON value)",
    )


def _apply_overrides(cfg, args, command):
    direct = {
        "out": args.out,
        "seed": args.seed,
        "mdp.gamma": args.gamma,
        "iql.alpha": args.alpha,
        "iql.epochs": args.epochs,
        "iql.learning_rate": args.lr,
        "iql.batch_size": args.batch_size,
        "iql.q_min": args.q_min,
        "iql.exact_mode": args.exact,
        "iql.projected_sampling": args.projected_sampling,
    }
    for key, value in direct.items():
        if value is not None:
            cfg.set(key, value)
    if args.p is not None:
        cfg.set("iql.p", args.p)
        if command == "verify":
            cfg.set("verify.p_list", [args.p])
        elif command == "ablate":
            cfg.set("ablate.p_list", [args.p])
    for item in args.set:
        key, sep, payload = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(payload.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid value in --set {item!r}: {exc}")
        cfg.set(key.strip(), value)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="toptd",
        description="Tabular top-p temporal-difference distillation laboratory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_common_options(sub.add_parser(name))
    args = parser.parse_args(argv)

    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        _apply_overrides(cfg, args, args.command)
        return _HANDLERS[args.command](cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
