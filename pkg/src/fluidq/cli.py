"""Command-line interface.

Subcommands: simulate, check, optimize, overload, bench, conjecture.
Topology documents are JSON (see network.py); custom static rates are JSON
maps keyed "l:i:j" with 1-based indices.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from .analytics import analytic_report, empirical_report
from .discrete import tagged_run
from .engine import run
from .network import RateAssignment, SimConfig, load
from .optimize import (
    OBJECTIVE_KINDS,
    ObjectiveSpec,
    balanced_growth_gamma,
    co_optimize,
    overload_check,
    throughput_tight_gamma,
)
from .policies import (
    BackpressurePolicy,
    MaxLinkRatePolicy,
    QueueProportionalPolicy,
    StaticPolicy,
    TreePolicy,
    check_min_delay_layered,
    check_min_delay_single_hop,
    check_min_delay_single_sink,
    check_min_delay_tree,
)

POLICY_HELP = "one of opt-static, opt-queue, bp, max, tree, custom:<file>"


def _load_rates(net, path) -> RateAssignment:
    with open(path, "r", encoding="utf-8") as fh:
        return RateAssignment.from_dict(net, json.load(fh))


def _parse_gamma(spec: str, net, arr, svc):
    if spec == "balanced":
        return balanced_growth_gamma(arr, svc, net.num_layers)
    if spec == "tight":
        return throughput_tight_gamma(arr, svc, net.num_layers)
    if spec.startswith("@"):
        with open(spec[1:], "r", encoding="utf-8") as fh:
            return tuple(float(v) for v in json.load(fh))
    return tuple(float(v) for v in spec.split(","))


def _make_policy(name: str, net, arr, svc, rates_path=None, gamma=None):
    if name == "opt-static":
        if rates_path is None:
            raise SystemExit("opt-static needs --rates <file>")
        return StaticPolicy(_load_rates(net, rates_path))
    if name == "opt-queue":
        return QueueProportionalPolicy(gamma)
    if name == "bp":
        return BackpressurePolicy()
    if name == "max":
        return MaxLinkRatePolicy()
    if name == "tree":
        return TreePolicy(net, arr, svc)
    if name.startswith("custom:"):
        return StaticPolicy(_load_rates(net, name.split(":", 1)[1]), name="custom")
    raise SystemExit(f"unknown policy {name!r}; expected {POLICY_HELP}")


def cmd_simulate(args) -> int:
    net, arr, svc = load(args.net)
    gamma = _parse_gamma(args.gamma, net, arr, svc) if args.gamma else None
    policy = _make_policy(args.policy, net, arr, svc, args.rates, gamma)
    q0 = None
    if args.q0:
        q0 = np.array([float(v) for v in args.q0.split(",")])
    cfg = SimConfig(
        horizon=args.horizon, dt=args.dt, q0=q0, discretize=args.mode == "integer"
    )
    if args.mode == "integer" and args.report:
        tr = tagged_run(net, arr, svc, policy, cfg)
        report = empirical_report(tr, arr)
        print(f"empirical d_avg = {report.d_avg:.6g}, d_max = {report.d_max:.6g}")
        if tr.extension:
            print(f"horizon extended by {tr.extension:g} to drain tagged packets")
        return 0
    traj = run(net, arr, svc, policy, cfg)
    final = traj.final
    print(f"simulated {traj.num_steps} steps of dt={traj.dt:g}")
    print("final backlog:", np.array2string(final.q, precision=3))
    static = args.policy == "opt-static" or args.policy.startswith("custom:")
    if args.report and static:
        report = analytic_report(net, arr, svc, policy.assignment, args.horizon, q0=q0)
        print(f"analytic d_avg = {report.d_avg:.6g}, d_max = {report.d_max:.6g}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "trajectory.csv")
        traj.to_csv(net, path)
        print(f"trajectory written to {path}")
    return 0


def cmd_check(args) -> int:
    net, arr, svc = load(args.net)
    rates = _load_rates(net, args.rates)
    gamma = _parse_gamma(args.gamma, net, arr, svc) if args.gamma else None
    kind = args.kind
    if kind == "auto":
        if net.is_single_sink():
            kind = "single-sink"
        elif net.is_fan_in_tree():
            kind = "tree"
        elif net.num_layers == 2:
            kind = "single-hop"
        else:
            kind = "layered"
    if kind == "single-sink":
        result = check_min_delay_single_sink(net, arr, svc, rates)
    elif kind == "single-hop":
        result = check_min_delay_single_hop(net, arr, svc, rates)
    elif kind == "tree":
        result = check_min_delay_tree(net, arr, svc, rates)
    else:
        result = check_min_delay_layered(net, arr, svc, rates, gamma)
    if result.ok:
        print("in the min-delay region")
        if result.gamma:
            print("gamma:", ", ".join(f"{g:.6g}" for g in result.gamma))
        return 0
    print(f"outside the min-delay region: {result.reason}")
    for name, value in result.residuals.items():
        print(f"  {name} = {value:.3g}")
    return 2


def cmd_optimize(args) -> int:
    net, arr, svc = load(args.net)
    gamma = _parse_gamma(args.gamma, net, arr, svc) if args.gamma else None
    forced = ()
    split_cap = None
    utilization_cap = None
    if args.constraints:
        with open(args.constraints, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        forced = tuple(
            tuple(int(p) - 1 for p in key.split(":")) for key in doc.get("forced_zero", ())
        )
        split_cap = doc.get("beta")
        utilization_cap = doc.get("theta")
    spec = ObjectiveSpec(args.objective, forced, split_cap, utilization_cap)
    rates, value = co_optimize(net, arr, svc, spec, gamma)
    print(f"objective {args.objective} = {value:.9g}")
    payload = json.dumps(rates.to_dict(), indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "rates.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        print(f"rates written to {path}")
    else:
        print(payload)
    return 0


def cmd_overload(args) -> int:
    net, arr, svc = load(args.net)
    verdict = overload_check(net, arr, svc)
    print("overloaded" if verdict.overloaded else "not overloaded")
    print(verdict.detail)
    if verdict.witness is not None and args.verbose:
        print(json.dumps(verdict.witness.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    from dataclasses import replace

    cfg = bench_mod.preset(args.family)
    cfg = replace(
        cfg,
        num_instances=args.instances,
        seed=args.seed,
        **({"horizon": args.horizon} if args.horizon else {}),
    )
    results = bench_mod.run_experiment(cfg, out_dir=args.out, fmt=args.format,
                                       workers=args.workers)
    by_policy: dict[str, list[float]] = {}
    for row in results:
        by_policy.setdefault(row.policy, []).append(row.ratio_avg_vs_opt)
    for name, ratios in by_policy.items():
        print(
            f"{name}: mean d_avg ratio vs opt = {np.mean(ratios):.3f}, "
            f"max = {np.max(ratios):.3f}"
        )
    return 0


def cmd_conjecture(args) -> int:
    layers = tuple(int(v) for v in args.layers.split(","))
    agree, bad = bench_mod.conjecture_sweep(
        args.samples, seed=args.seed, layer_sizes=layers, out_dir=args.out
    )
    print(f"{agree}/{args.samples} samples agree")
    if bad:
        print(f"{len(bad)} counterexamples found")
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fluidq",
        description="Queueing-delay tools for overloaded layered networks",
    )
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate the queueing dynamics")
    p.add_argument("--net", required=True)
    p.add_argument("--policy", required=True, help=POLICY_HELP)
    p.add_argument("--rates", help="static rates JSON for opt-static")
    p.add_argument("--gamma", help="balanced | tight | g1,g2,... | @file")
    p.add_argument("--horizon", "-T", type=float, required=True)
    p.add_argument("--dt", type=float)
    p.add_argument("--mode", choices=("fluid", "integer"), default="fluid")
    p.add_argument("--q0", help="comma-separated per-node initial backlog")
    p.add_argument("--report", action="store_true", help="print delay metrics")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("check", help="min-delay region membership")
    p.add_argument("--net", required=True)
    p.add_argument("--rates", required=True)
    p.add_argument("--gamma")
    p.add_argument(
        "--kind",
        choices=("auto", "single-sink", "single-hop", "layered", "tree"),
        default="auto",
    )
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("optimize", help="co-optimize a secondary objective")
    p.add_argument("--net", required=True)
    p.add_argument("--objective", choices=OBJECTIVE_KINDS, required=True)
    p.add_argument("--gamma", help="balanced | tight | g1,g2,... | @file")
    p.add_argument("--constraints", help="JSON with forced_zero/beta/theta")
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("overload", help="overload verdict for an instance")
    p.add_argument("--net", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_overload)

    p = sub.add_parser("bench", help="policy comparison sweep")
    p.add_argument("--family", required=True,
                   help=f"one of {sorted(bench_mod.FAMILY_PRESETS)}")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--horizon", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("conjecture", help="effective-rate agreement sweep")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--layers", default="2,2")
    p.set_defaults(fn=cmd_conjecture)

    args = parser.parse_args(argv)
    # subcommand-local seed defaults to the global one
    if not hasattr(args, "seed") or args.seed is None:
        args.seed = 0
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
