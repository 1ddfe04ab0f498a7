"""Command-line front end: scenario generation, optimization, simulation,
oracle cross-checks, and parameter sweeps.

Exit codes: 0 success, 1 bad input (missing file, empty suite, invalid axis),
2 infeasible instance, 3 simulation divergence, 4 oracle grid too large,
5 oracle check failures.
All randomness is seeded through the flags; reports carry a hash of the
resolved configuration and contain no timestamps, so identical invocations
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import latency
from .convergence import (AuxiliaryCaps, BoundInputs, InfeasibleError,
                          convergence_time, rounds_to_target)
from .instances import small_scenario
from .latency import Decision
from .model import LayeredNet, make_blobs
from .optimizer import (BatchSizeProblem, bcd_optimize, brute_force_joint,
                        enumerate_split, memory_max_batch, solve_batch_sizes,
                        solve_split)
from .profiles import (Scenario, cumulative_stats, generate_scenario,
                       load_scenario, save_scenario)
from .simulation import (DivergenceError, PlateauRule, partition_data, train)

OUT_ENV = "HASFL_OUT"
POLICIES = ("hasfl", "rbs-rms", "rbs-hams", "habs-rms")
RANDOM_BATCH_MAX = 64
SWEEP_AXES = ("device-compute", "server-compute", "uplink", "interserver", "n-devices")

SIM_CSV_COLUMNS = ("round", "sim_seconds", "loss", "accuracy", "batches", "cuts")
SWEEP_CSV_COLUMNS = ("axis", "value", "policy", "objective", "rounds_predicted",
                     "split_latency", "agg_latency", "batches", "cuts",
                     "sim_plateau_round", "sim_plateau_seconds")


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _parse_gen(spec: str):
    out = {"seed": 0, "n": 20}
    for item in spec.split(","):
        if not item:
            continue
        key, _, value = item.partition("=")
        if key not in out or not value:
            raise CliError(f"--gen expects seed=<int>,n=<int>, got {spec!r}")
        try:
            out[key] = int(value)
        except ValueError as exc:
            raise CliError(f"--gen expects integer values, got {spec!r}") from exc
    return out


def _resolve_scenario(args) -> tuple[Scenario, dict]:
    has_path = getattr(args, "scenario", None) is not None
    has_gen = getattr(args, "gen", None) is not None
    if has_path == has_gen:
        raise CliError("exactly one of --scenario and --gen is required")
    if has_path:
        path = Path(args.scenario)
        if not path.exists():
            raise CliError(f"scenario file not found: {path}")
        try:
            return load_scenario(path), {"scenario": str(path)}
        except ValueError as exc:  # parse or validation failure
            raise CliError(f"bad scenario file {path}: {exc}") from exc
    gen = _parse_gen(args.gen)
    return generate_scenario(gen["seed"], gen["n"]), {"gen": gen}


def _out_dir(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get(OUT_ENV) or "hasfl-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _decision_feasible(scenario: Scenario, decision: Decision) -> bool:
    stats = cumulative_stats(scenario.layers)
    for dev, b, c in zip(scenario.devices, decision.batches, decision.cuts):
        j = c - 1
        used = (b * (stats.act_bits_cum[j] + stats.actgrad_bits_cum[j])
                + scenario.layers.opt_state_bits_cum[j] + scenario.layers.submodel_bits[j])
        if used >= dev.memory_bits:
            return False
    try:
        rounds_to_target(BoundInputs.from_scenario(scenario, decision))
    except InfeasibleError:
        return False
    return True


# ---------------------------------------------------------------------------
# Baseline decision policies (experiment scaffolding, not solvers)
# ---------------------------------------------------------------------------

def _optimize_batches_fixed_cuts(scenario: Scenario, cuts, batch_cap=None):
    """Heterogeneity-aware batch sizes for a fixed split: scan cap scales,
    solve the batch block at each, keep the best true objective."""
    n = scenario.n_devices
    mems = [memory_max_batch(scenario, i, cuts[i]) for i in range(n)]
    if any(m < 1 for m in mems):
        raise InfeasibleError("a device cannot hold even one sample at these cuts")
    if batch_cap is not None:
        mems = [min(m, batch_cap) for m in mems]
    best = None
    s = 1
    scales = []
    while s < max(mems):
        scales.append(s)
        s *= 2
    scales.append(max(mems))
    for s in sorted(set(scales) | set(range(1, min(max(mems), 8) + 1))):
        b_s = tuple(min(s, m) for m in mems)
        caps = AuxiliaryCaps.tight(scenario, Decision(batches=b_s, cuts=cuts))
        problem = BatchSizeProblem.from_scenario(scenario, cuts, caps)
        try:
            mode = "exact" if 4 ** n <= 4096 else "per-device"
            b, _ = solve_batch_sizes(problem, mode=mode, extra_candidates=(b_s,))
        except InfeasibleError:
            continue
        if batch_cap is not None:
            b = tuple(min(x, batch_cap) for x in b)
        dec = Decision(batches=b, cuts=cuts)
        if not _decision_feasible(scenario, dec):
            continue
        theta = convergence_time(scenario, dec)
        if best is None or theta < best[0]:
            best = (theta, dec)
    if best is None:
        raise InfeasibleError("no feasible batch vector at these cuts")
    return best[1]


def policy_decision(name: str, scenario: Scenario, seed: int,
                    batch_cap=None, tol_bcd=1e-9) -> Decision:
    """Decision generators for the benchmark policies. Random draws are seeded
    and redrawn (bounded) until feasible."""
    n, L = scenario.n_devices, scenario.layers.num_layers
    if name not in POLICIES:
        raise CliError(f"unknown policy {name!r}; choose from {POLICIES}")
    rng = np.random.default_rng([seed, POLICIES.index(name)])
    if name == "hasfl":
        dec = bcd_optimize(scenario, tol=tol_bcd).decision
        if batch_cap is not None and any(b > batch_cap for b in dec.batches):
            dec = Decision(batches=tuple(min(b, batch_cap) for b in dec.batches),
                           cuts=dec.cuts)
        return dec
    # Random batch draws are clamped to the drawn cut's memory cap: a fully
    # unconstrained draw is jointly memory-infeasible with high probability
    # once N grows, and an unsimulable baseline is useless.
    cap = batch_cap or RANDOM_BATCH_MAX
    for _ in range(1000):
        if name == "rbs-rms":
            cuts = tuple(int(x) for x in rng.integers(1, L + 1, n))
            raw = rng.integers(1, RANDOM_BATCH_MAX + 1, n)
            batches = tuple(
                max(1, min(int(b), cap, memory_max_batch(scenario, i, c)))
                for i, (b, c) in enumerate(zip(raw, cuts)))
            dec = Decision(batches=batches, cuts=cuts)
            if _decision_feasible(scenario, dec):
                return dec
        elif name == "rbs-hams":
            raw = rng.integers(1, RANDOM_BATCH_MAX + 1, n)
            batches = tuple(
                max(1, min(int(b), cap, memory_max_batch(scenario, i, 1)))
                for i, b in enumerate(raw))
            try:
                split = solve_split(scenario, batches)
            except InfeasibleError:
                continue
            dec = Decision(batches=batches, cuts=split.cuts)
            if _decision_feasible(scenario, dec):
                return dec
        elif name == "habs-rms":
            cuts = tuple(int(x) for x in rng.integers(1, L + 1, n))
            try:
                dec = _optimize_batches_fixed_cuts(scenario, cuts, batch_cap=cap)
            except InfeasibleError:
                continue
            return dec
    raise InfeasibleError(f"policy {name!r} found no feasible decision in 1000 draws")


# ---------------------------------------------------------------------------
# Simulation harness helpers
# ---------------------------------------------------------------------------

def default_net(num_layers: int, dim: int = 2, n_classes: int = 4,
                hidden: int = 8, loss: str = "softmax_ce") -> LayeredNet:
    widths = (dim,) + (hidden,) * (num_layers - 1) + (n_classes,)
    acts = ("tanh",) * (num_layers - 1) + ("identity",)
    return LayeredNet(widths=widths, activations=acts, loss=loss)


def build_sim_inputs(scenario: Scenario, decision: Decision, seed: int,
                     mode: str = "noniid", n_classes: int = 4):
    """Toy dataset and partition sized so every device can draw its batch."""
    n = scenario.n_devices
    per_dev = max(64, 4 * math.ceil(max(decision.batches) / 4))
    n_samples = per_dev * n
    if n_samples % (2 * n) or n_samples % n_classes:
        n_samples = (2 * n * n_classes) * math.ceil(n_samples / (2 * n * n_classes))
    data = make_blobs(n_samples, n_classes, 2, seed=seed)
    part = partition_data(data[1], n, mode, seed=seed)
    return data, part


def run_simulation(scenario: Scenario, decision: Decision, seed: int,
                   max_rounds: int, mode: str = "noniid",
                   plateau: PlateauRule | None = None, loss: str = "softmax_ce"):
    net = default_net(scenario.layers.num_layers, loss=loss)
    data, part = build_sim_inputs(scenario, decision, seed, mode=mode)
    return train(scenario, decision, net, data, part, seed=seed,
                 max_rounds=max_rounds,
                 plateau=plateau or PlateauRule())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.gen is None:
        raise CliError("generate requires --gen seed=<int>,n=<int>")
    scenario, _ = _resolve_scenario(args)
    out = _out_dir(args)
    path = out / "scenario.json"
    save_scenario(scenario, path)
    print(f"wrote {path} ({scenario.n_devices} devices, "
          f"{scenario.layers.num_layers} layers)")
    return 0


def cmd_optimize(args) -> int:
    scenario, src = _resolve_scenario(args)
    out = _out_dir(args)
    cfg = {"cmd": "optimize", "src": src, "tol_bcd": args.tol_bcd,
           "tol_dinkelbach": args.tol_dinkelbach}
    result = bcd_optimize(scenario, tol=args.tol_bcd)
    decision = result.decision
    inputs = BoundInputs.from_scenario(scenario, decision)
    rounds = rounds_to_target(inputs)
    rounds_int = max(1, math.ceil(rounds))
    lb = latency.round_latency(scenario, decision)
    report = {
        "config_hash": _config_hash(cfg),
        "batches": list(decision.batches),
        "cuts": list(decision.cuts),
        "objective_seconds": result.objective,
        "rounds_predicted": rounds,
        "rounds_ceil": rounds_int,
        "total_time_at_rounds_ceil": latency.total_time(scenario, decision, rounds_int),
        "split_latency": lb.split_total,
        "agg_latency": lb.agg_total,
        "latency_breakdown": {
            "client_fp": list(lb.client_fp), "act_up": list(lb.act_up),
            "grad_down": list(lb.grad_down), "client_bp": list(lb.client_bp),
            "sub_up": list(lb.sub_up), "sub_down": list(lb.sub_down),
            "server_fp": lb.server_fp, "server_bp": lb.server_bp,
            "server_sub_up": lb.server_sub_up, "server_sub_down": lb.server_sub_down,
        },
        "bcd_iterations": result.iterations,
        "bcd_trace": [float(v) for v in result.trace],
    }
    _write_json(out / "optimize_report.json", report)
    _write_csv(out / "optimize_trace.csv", ("iteration", "objective"),
               list(enumerate(report["bcd_trace"])))
    print(f"objective {result.objective:.6g} s  batches={decision.batches} "
          f"cuts={decision.cuts}  rounds>={rounds:.4g}")
    print(f"wrote {out / 'optimize_report.json'}")
    return 0


def _parse_decision(args, scenario) -> Decision | None:
    if args.batches is None and args.cuts is None:
        return None
    if args.batches is None or args.cuts is None:
        raise CliError("--batches and --cuts must be given together")
    batches = tuple(int(x) for x in args.batches.split(","))
    cuts = tuple(int(x) for x in args.cuts.split(","))
    dec = Decision(batches=batches, cuts=cuts)
    dec.validate_against(scenario)
    return dec


def cmd_simulate(args) -> int:
    scenario, src = _resolve_scenario(args)
    out = _out_dir(args)
    explicit = _parse_decision(args, scenario)
    policies = args.policy.split(",")
    cfg = {"cmd": "simulate", "src": src, "seed": args.seed, "rounds": args.rounds,
           "policy": args.policy, "partition": args.partition, "loss": args.loss,
           "batches": args.batches, "cuts": args.cuts}
    summary = {"config_hash": _config_hash(cfg), "runs": {}}
    for name in policies:
        if explicit is not None:
            decision = explicit
            label = "given"
        else:
            decision = policy_decision(name, scenario, args.seed,
                                       batch_cap=RANDOM_BATCH_MAX,
                                       tol_bcd=args.tol_bcd)
            label = name
        report = run_simulation(scenario, decision, args.seed, args.rounds,
                                mode=args.partition, loss=args.loss)
        series_path = out / f"simulate_{label}.csv"
        b_col = "|".join(str(b) for b in decision.batches)
        c_col = "|".join(str(c) for c in decision.cuts)
        _write_csv(series_path, SIM_CSV_COLUMNS,
                   [row + (b_col, c_col) for row in report.rows])
        summary["runs"][label] = {
            "batches": list(decision.batches),
            "cuts": list(decision.cuts),
            "stop_reason": report.stop_reason,
            "rounds_run": report.rounds_run,
            "plateau_round": report.plateau_round,
            "clock_seconds": report.clock,
            "final_loss": report.rows[-1][2],
            "series": series_path.name,
        }
        print(f"{label}: {report.rounds_run} rounds, {report.clock:.4g} sim-seconds, "
              f"stop={report.stop_reason}")
        if explicit is not None:
            break
    _write_json(out / "simulate_summary.json", summary)
    print(f"wrote {out / 'simulate_summary.json'}")
    return 0


def cmd_oracle(args) -> int:
    if args.cases < 1:
        raise CliError("oracle suite is empty (--cases must be >= 1)")
    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    rows = []
    failures = 0

    for case in range(args.cases):
        n = int(rng.choice([1, 2, 3])) if args.n is None else args.n
        L = int(rng.choice([3, 4, 5])) if args.layers is None else args.layers
        if (float(args.bmax) ** n) * (float(L) ** n) > 1e7:
            print(f"oracle grid too large: bmax={args.bmax} n={n} L={L}")
            return 4
        sc = small_scenario(args.seed * 1000 + case, n_devices=n, n_layers=L,
                            b_cap=args.bmax)
        batches = tuple(int(x) for x in rng.integers(1, 6, n))
        checks = {}
        try:
            cuts_e, val_e = enumerate_split(sc, batches)
            split = solve_split(sc, batches, tol=args.tol_dinkelbach)
            checks["split_match"] = (split.cuts == cuts_e
                                     and abs(split.ratio - val_e) <= 1e-9 * abs(val_e))
            lams = split.lambdas
            checks["lambda_monotone"] = all(b <= a * (1 + 1e-12)
                                            for a, b in zip(lams, lams[1:]))
            checks["residual_small"] = abs(split.residuals[-1]) <= 1e-9
            res = bcd_optimize(sc, tol=args.tol_bcd)
            dec_bf, val_bf = brute_force_joint(sc, args.bmax)
            gap = res.objective / val_bf - 1.0
            checks["never_beats_oracle"] = res.objective >= val_bf * (1 - 1e-9)
            rows.append((case, n, L, f"{gap:.3e}",
                         all(checks.values())))
        except InfeasibleError:
            rows.append((case, n, L, "infeasible", True))
            continue
        if not all(checks.values()):
            failures += 1
            print(f"case {case}: FAILED {checks}")

    print(f"{'case':>4} {'n':>2} {'L':>2} {'bcd_gap':>12} {'ok':>4}")
    for row in rows:
        print(f"{row[0]:>4} {row[1]:>2} {row[2]:>2} {row[3]:>12} {str(row[4]):>4}")
    _write_json(out / "oracle_report.json",
                {"cases": args.cases, "failures": failures,
                 "rows": [list(r) for r in rows]})
    print(f"{args.cases - failures}/{args.cases} cases passed")
    return 0 if failures == 0 else 5


def _parse_sweep(spec: str):
    try:
        axis, _, grid = spec.partition("=")
        lo, hi, steps = grid.split(":")
        return axis, float(lo), float(hi), int(steps)
    except ValueError as exc:
        raise CliError(f"--sweep expects axis=lo:hi:steps, got {spec!r}") from exc


def _scaled_scenario(base: Scenario, axis: str, value: float, gen_cfg) -> Scenario:
    import dataclasses
    if axis == "n-devices":
        if gen_cfg is None:
            raise CliError("n-devices sweep needs a generated scenario (--gen)")
        return generate_scenario(gen_cfg["seed"], int(value))
    if axis == "device-compute":
        devs = tuple(dataclasses.replace(d, compute=d.compute * value)
                     for d in base.devices)
        return dataclasses.replace(base, devices=devs)
    if axis == "server-compute":
        return dataclasses.replace(
            base, server=dataclasses.replace(base.server,
                                             compute=base.server.compute * value))
    if axis == "uplink":
        devs = tuple(dataclasses.replace(d, up_rate=d.up_rate * value,
                                         fed_up_rate=d.fed_up_rate * value)
                     for d in base.devices)
        return dataclasses.replace(base, devices=devs)
    if axis == "interserver":
        return dataclasses.replace(
            base, server=dataclasses.replace(
                base.server, fed_up_rate=base.server.fed_up_rate * value,
                fed_down_rate=base.server.fed_down_rate * value))
    raise CliError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def cmd_sweep(args) -> int:
    scenario, src = _resolve_scenario(args)
    out = _out_dir(args)
    axis, lo, hi, steps = _parse_sweep(args.sweep)
    if axis not in SWEEP_AXES:
        raise CliError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if steps < 1:
        raise CliError("sweep needs at least one step")
    values = [lo] if steps == 1 else [lo + (hi - lo) * k / (steps - 1)
                                      for k in range(steps)]
    policies = list(POLICIES) if args.policy is None else args.policy.split(",")
    rows = []
    for gi, value in enumerate(values):
        sc = _scaled_scenario(scenario, axis, value, src.get("gen"))
        for policy in policies:
            decision = policy_decision(policy, sc, args.seed + gi,
                                       batch_cap=RANDOM_BATCH_MAX,
                                       tol_bcd=args.tol_bcd)
            theta = convergence_time(sc, decision)
            rounds = rounds_to_target(BoundInputs.from_scenario(sc, decision))
            lb = latency.round_latency(sc, decision)
            plateau_round = plateau_secs = ""
            if args.rounds > 0:
                try:
                    rep = run_simulation(sc, decision, args.seed + gi, args.rounds,
                                         mode=args.partition, loss=args.loss)
                    plateau_round = rep.plateau_round or rep.rounds_run
                    plateau_secs = rep.rows[-1][1]
                except DivergenceError:
                    plateau_round, plateau_secs = "diverged", "diverged"
            rows.append((axis, value, policy, theta, rounds,
                         lb.split_total, lb.agg_total,
                         "|".join(str(b) for b in decision.batches),
                         "|".join(str(c) for c in decision.cuts),
                         plateau_round, plateau_secs))
            print(f"{axis}={value:g} {policy}: objective={theta:.5g} "
                  f"plateau_round={plateau_round}")
    _write_csv(out / "sweep.csv", SWEEP_CSV_COLUMNS, rows)
    cfg = {"cmd": "sweep", "src": src, "seed": args.seed, "rounds": args.rounds,
           "sweep": args.sweep, "policies": policies, "partition": args.partition,
           "loss": args.loss}
    _write_json(out / "sweep_summary.json",
                {"config_hash": _config_hash(cfg), "axis": axis,
                 "values": values, "policies": policies})
    print(f"wrote {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hasfl",
        description="Heterogeneity-aware split federated learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim=False):
        p.add_argument("--scenario", help="scenario JSON file")
        p.add_argument("--gen", help="generate a scenario: seed=<int>,n=<int>")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./hasfl-out)")
        p.add_argument("--seed", type=int, default=0, help="run seed")
        p.add_argument("--tol-bcd", type=float, default=1e-9)
        p.add_argument("--tol-dinkelbach", type=float, default=1e-9)
        if sim:
            p.add_argument("--rounds", type=int, default=400,
                           help="simulation round budget (0 disables simulation)")
            p.add_argument("--partition", choices=("iid", "noniid"), default="noniid")
            p.add_argument("--loss", choices=("softmax_ce", "squared"),
                           default="softmax_ce", help="toy-model training loss")

    p_gen = sub.add_parser("generate", help="write a generated scenario file")
    common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_opt = sub.add_parser("optimize", help="jointly optimize batch sizes and cuts")
    common(p_opt)
    p_opt.set_defaults(func=cmd_optimize)

    p_sim = sub.add_parser("simulate", help="run the training protocol simulator")
    common(p_sim, sim=True)
    p_sim.add_argument("--policy", default="hasfl",
                       help="comma list of decision policies "
                            f"{POLICIES} (default hasfl)")
    p_sim.add_argument("--batches", help="explicit per-device batches, comma list")
    p_sim.add_argument("--cuts", help="explicit per-device cuts, comma list")
    p_sim.set_defaults(func=cmd_simulate)

    p_orc = sub.add_parser("oracle", help="cross-check solvers against oracles")
    p_orc.add_argument("--out")
    p_orc.add_argument("--seed", type=int, default=0)
    p_orc.add_argument("--cases", type=int, default=20)
    p_orc.add_argument("--n", type=int, help="fix device count (default: vary)")
    p_orc.add_argument("--layers", type=int, help="fix layer count (default: vary)")
    p_orc.add_argument("--bmax", type=int, default=16)
    p_orc.add_argument("--tol-bcd", type=float, default=1e-9)
    p_orc.add_argument("--tol-dinkelbach", type=float, default=1e-9)
    p_orc.set_defaults(func=cmd_oracle)

    p_swp = sub.add_parser("sweep", help="sweep a scenario dimension across policies")
    common(p_swp, sim=True)
    p_swp.add_argument("--sweep", required=True, help="axis=lo:hi:steps; axes: "
                       + ", ".join(SWEEP_AXES))
    p_swp.add_argument("--policy", default=None,
                       help="comma list of policies (default: all four)")
    p_swp.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        if "too large" in str(exc):
            print(f"error: {exc}", file=sys.stderr)
            return 4
        raise


if __name__ == "__main__":
    sys.exit(main())
