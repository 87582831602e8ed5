"""Command-line entry points.

Subcommands: simulate, evaluate, sigma-scan, rank-scan, phase1,
markov-gap, compare.  Global flags --config/--seed/--out-dir/--threads
apply to every subcommand.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import incrt, markov_gap, memory_analysis, runner, shield, stats
from .config import load_config
from .controller import BaselineController


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memctrl",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None, help="key = value config file")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out-dir", default=".", help="output directory")
    ap.add_argument("--threads", type=int, default=1)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one baseline rollout to CSV")
    p.add_argument("--tau-z", type=float, default=None)
    p.add_argument("--shielded", action="store_true",
                   help="apply the admissibility projection")
    p.add_argument("--out", default="trajectory.csv")

    p = sub.add_parser("evaluate", help="payload sweep to a result JSON")
    p.add_argument("--tau-z", type=float, default=None)
    p.add_argument("--architecture", default="baseline-ct")
    p.add_argument("--rollouts", type=int, default=20)
    p.add_argument("--payload-mode", default="nominal",
                   choices=["nominal", "true", "noisy"])
    p.add_argument("--payload-csv", action="store_true",
                   help="also write per-payload rows for plotting")

    p = sub.add_parser("sigma-scan", help="sigma_z^2 closed form vs Monte Carlo")
    p.add_argument("--tau-z-list", type=_float_list, default=[0.5, 1.0, 2.0])
    p.add_argument("--n-traj", type=int, default=2000)
    p.add_argument("--out", default="sigma_scan.csv")

    p = sub.add_parser("rank-scan", help="effective rank of the temporal operator")
    p.add_argument("--tau-z-list", type=_float_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--n-samples", type=int, default=2048)
    p.add_argument("--save-operators", action="store_true",
                   help="also write each W x W operator as CSV")
    p.add_argument("--out", default="rank_scan.csv")

    p = sub.add_parser("phase1", help="head-count search per memory horizon")
    p.add_argument("--tau-z-list", type=_float_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--n-samples", type=int, default=2048)
    p.add_argument("--gamma-add", type=float, default=0.05)
    p.add_argument("--gamma-prune", type=float, default=0.01)
    p.add_argument("--n-stable", type=int, default=20)
    p.add_argument("--verbose-log", action="store_true",
                   help="include the full iteration log in the JSON")
    p.add_argument("--out", default="phase1.json")

    p = sub.add_parser("markov-gap", help="oracle vs Markovian vs windowed excess")
    p.add_argument("--tau-z-list", type=_float_list, default=[0.5, 1.0, 2.0])
    p.add_argument("--n-traj", type=int, default=512)
    p.add_argument("--out", default="markov_gap.csv")

    p = sub.add_parser("compare", help="group result files and run the tests")
    p.add_argument("files", nargs="+")
    p.add_argument("--metric", default="delta_percent")
    p.add_argument("--group-key", default="architecture")
    p.add_argument("--alternative", default="less",
                   choices=["less", "greater", "two-sided"])
    p.add_argument("--out", default="compare")
    return ap


def cmd_simulate(args, cfg) -> int:
    from .dynamics import rollout

    fric = cfg.friction if args.tau_z is None else cfg.friction.with_tau_z(args.tau_z)
    plant = cfg.plant
    base = cfg.baseline_gains()
    if args.shielded:
        form = shield.design_lyapunov_form(plant, cfg.reference.position(0.0),
                                           baseline=base, alpha=cfg.alpha)
        ctrl = shield.ShieldedController(lambda t, x: base, form, cfg.box,
                                         plant, fric)
    else:
        ctrl = BaselineController(plant, fric, gains=base)
    traj = rollout(ctrl, cfg.reference, plant, fric, seed=args.seed, dt=cfg.dt)
    out = Path(args.out_dir) / args.out
    traj.write_csv(out)
    report = {"rmse": traj.rmse(), "diverged": traj.diverged}
    if args.shielded:
        form = shield.design_lyapunov_form(plant, cfg.reference.position(0.0),
                                           alpha=cfg.alpha)
        report.update(shield.shield_report(traj, form, ctrl))
    print(json.dumps(report))
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    fric = cfg.friction if args.tau_z is None else cfg.friction.with_tau_z(args.tau_z)
    sweep = runner.SweepSpec(rollouts_per_payload=args.rollouts, dt=cfg.dt,
                             horizon=cfg.reference.horizon, seed=args.seed)
    res = runner.evaluate_baseline(cfg.reference, cfg.plant, fric, sweep,
                                   payload_mode=args.payload_mode,
                                   threads=args.threads,
                                   gains=cfg.baseline_gains())
    res.architecture = args.architecture
    out = Path(args.out_dir) / res.filename()
    res.write_json(out)
    if args.payload_csv:
        res.write_payload_csv(out.with_suffix(".payload.csv"))
    print(f"wrote {out} (rmse_mean={res.rmse_mean:.4f}, "
          f"class={runner.failure_mode_flag(res)})")
    return 0


def cmd_sigma_scan(args, cfg) -> int:
    out = Path(args.out_dir) / args.out
    rows = []
    for tz in args.tau_z_list:
        est = memory_analysis.sigma_z_broadband(
            tz, cfg.friction.lambda_z, n_traj=args.n_traj, seed=args.seed)
        rows.append((tz, est.closed_form, est.monte_carlo))
        print(f"tau_z={tz:g}: closed_form={est.closed_form:.6g} "
              f"monte_carlo={est.monte_carlo:.6g}")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_z", "closed_form", "monte_carlo"])
        w.writerows(rows)
    print(f"wrote {out}")
    return 0


def cmd_rank_scan(args, cfg) -> int:
    out = Path(args.out_dir) / args.out
    rows = []
    for tz in args.tau_z_list:
        g = memory_analysis.gradient_samples_closed_loop(
            tz, cfg.reference, cfg.plant, cfg.friction,
            window=args.window, n_samples=args.n_samples, dt=cfg.dt,
            seed=args.seed)
        op = memory_analysis.build_residual_operator(g, tau_z=tz)
        if args.save_operators:
            op.write_csv(Path(args.out_dir) / f"operator_tz{tz:g}s.csv")
        rows.append((tz, memory_analysis.effective_rank(op.matrix), g.shape[0]))
        print(f"tau_z={tz:g}: r_eff={rows[-1][1]:.3f} (n={g.shape[0]})")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_z", "effective_rank", "n_samples"])
        w.writerows(rows)
    print(f"wrote {out}")
    return 0


def cmd_phase1(args, cfg) -> int:
    config = incrt.Phase1Config(window=args.window, n_samples=args.n_samples,
                                gamma_add=args.gamma_add,
                                gamma_prune=args.gamma_prune,
                                n_stable=args.n_stable)
    records = []
    for tz in args.tau_z_list:
        g = memory_analysis.gradient_samples_closed_loop(
            tz, cfg.reference, cfg.plant, cfg.friction,
            window=config.window, n_samples=config.n_samples, dt=cfg.dt,
            seed=args.seed)
        op = memory_analysis.build_residual_operator(g, tau_z=tz)
        res = incrt.run_phase1(op, config)
        rec = {"tau_z": tz, "K_star": res.k_star,
               "r_eff": res.effective_rank_final,
               "iterations": res.n_iterations, "converged": res.converged,
               "phase2_range": list(incrt.phase2_range(res.k_star))}
        if args.verbose_log:
            rec["log"] = [vars(r) for r in res.iterations]
        records.append(rec)
        print(json.dumps({k: rec[k] for k in
                          ("tau_z", "K_star", "r_eff", "iterations", "converged")}))
    out = Path(args.out_dir) / args.out
    with open(out, "w") as fh:
        json.dump(records, fh, indent=1)
    print(f"wrote {out}")
    return 0


def cmd_markov_gap(args, cfg) -> int:
    out = Path(args.out_dir) / args.out
    rows = []
    for tz in args.tau_z_list:
        r = markov_gap.markov_gap_experiment(tz, cfg.reference, cfg.plant,
                                             cfg.friction, n_traj=args.n_traj,
                                             seed=args.seed, dt=cfg.dt)
        cf = memory_analysis.sigma_z_closed_form(
            tz, cfg.friction.lambda_z, 1.0, lambda u: 0.0)
        rows.append((tz, r.sigma2_hat, cf, r.excess_markov,
                     r.excess_windowed, r.lower_bound))
        print(f"tau_z={tz:g}: excess_markov={r.excess_markov:.5g} "
              f"excess_windowed={r.excess_windowed:.5g} "
              f"bound={r.lower_bound:.5g}")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_z", "sigma_z2_mc", "sigma_z2_cf", "excess_markov",
                    "excess_windowed_W", "bound_c1_sigma2"])
        w.writerows(rows)
    print(f"wrote {out}")
    return 0


def cmd_compare(args, cfg) -> int:
    table = stats.compare_result_files(args.files, metric=args.metric,
                                       group_key=args.group_key,
                                       alternative=args.alternative)
    base = Path(args.out_dir) / args.out
    with open(f"{base}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_a", "group_b", "n1", "n2", "mean1", "mean2",
                    "sd1", "sd2", "U", "p_U", "t", "p_W", "dof", "d"])
        for r in table["pairs"]:
            w.writerow([r.label_a, r.label_b, r.n1, r.n2,
                        f"{r.mean1:.4f}", f"{r.mean2:.4f}",
                        f"{r.sd1:.4f}", f"{r.sd2:.4f}",
                        f"{r.u_statistic:.1f}", f"{r.p_mann_whitney:.4g}",
                        f"{r.t_statistic:.3f}", f"{r.p_welch:.4g}",
                        f"{r.welch_dof:.2f}", f"{r.cohens_d:.3f}"])
    lines = ["| group | n | mean | sd |", "| --- | --- | --- | --- |"]
    for g in table["groups"]:
        sd = "-" if g["sd"] is None else f"{g['sd']:.3f}"
        lines.append(f"| {g['label']} | {g['n']} | {g['mean']:.3f} | {sd} |")
    lines.append("")
    lines.append("| A | B | p_U | p_W | d |")
    lines.append("| --- | --- | --- | --- | --- |")
    for r in table["pairs"]:
        lines.append(f"| {r.label_a} | {r.label_b} | {r.p_mann_whitney:.4g} "
                     f"| {r.p_welch:.4g} | {r.cohens_d:.3f} |")
    md = "\n".join(lines) + "\n"
    with open(f"{base}.md", "w") as fh:
        fh.write(md)
    print(md)
    print(f"wrote {base}.csv and {base}.md")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "sigma-scan": cmd_sigma_scan,
    "rank-scan": cmd_rank_scan,
    "phase1": cmd_phase1,
    "markov-gap": cmd_markov_gap,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    return _COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
