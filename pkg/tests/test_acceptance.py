"""Acceptance suite: one test per release criterion, each printing a verdict
line. Tolerances are pinned here and nowhere else."""

import csv
import dataclasses
import math
import time

import numpy as np

import hasfl
import hasfl.cli as cli
import hasfl.profiles
from hasfl.convergence import BoundInputs, grad_norm_bound
from hasfl.instances import small_scenario
from hasfl.latency import Decision, round_latency, total_time
from hasfl.model import LayeredNet, gradient_check, init_params, make_blobs
from hasfl.optimizer import (BatchSizeProblem, bcd_optimize, brute_force_joint,
                             enumerate_split, newton_jacobi, solve_split)
from hasfl.profiles import SamplingRanges, generate_scenario, save_scenario
from hasfl.simulation import (PlateauRule, aggregate_clients, centralized_reference,
                              init_state, partition_data, run_round, train)


def verdict(num, name, ok, detail=""):
    print(f"\nACCEPTANCE {num:02d} [{name}]: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# 1. Split-decision exactness: Dinkelbach equals exhaustive enumeration
# ---------------------------------------------------------------------------

def test_01_split_exactness():
    start = time.monotonic()
    rng = np.random.default_rng(1)
    mismatches = []
    for seed in range(50):
        n = [1, 2, 3][seed % 3]
        L = [3, 4, 5][(seed // 3) % 3]
        sc = small_scenario(seed, n_devices=n, n_layers=L, b_cap=16)
        batches = tuple(int(x) for x in rng.integers(1, 6, n))
        cuts_e, val_e = enumerate_split(sc, batches)
        res = solve_split(sc, batches)
        same = (res.cuts == cuts_e
                and abs(res.ratio - val_e) <= 1e-9 * abs(val_e))
        if not same:
            mismatches.append(seed)
    elapsed = time.monotonic() - start
    verdict(1, "split exactness vs enumeration",
            not mismatches and elapsed < 30,
            f"50 scenarios, mismatches={mismatches}, {elapsed:.1f}s (<30s)")


# ---------------------------------------------------------------------------
# 2. Batch-size candidates: interior grid optima bracket the stationary point
# ---------------------------------------------------------------------------

def _interior_problem(rng, n):
    a = float(rng.uniform(0.5, 2.0))
    b_star = float(rng.uniform(3.0, 10.0))
    z = float(rng.uniform(0.05, 0.25))
    var_coef = z * a * b_star / n
    c = float(rng.uniform(0.05, 1.0))
    server = tuple((c * rng.uniform(0.7, 1.3, n)).tolist())
    fixed = n * b_star * float(np.mean(server)) * (1 - 2 * z) / z
    kappa = tuple((b_star + rng.uniform(4.0, 12.0, n)).tolist())
    return BatchSizeProblem(
        margin_cap=a, var_coef=var_coef, server_secs=server, fixed_secs=fixed,
        kappa=kappa, mem_num=kappa, mem_den=(1.0,) * n, scale=2.0)


def _grid_optimum(problem):
    axes = [np.arange(1, problem.max_batch(i) + 1) for i in range(problem.n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    vals = problem.theta_many(grid.astype(float))
    k = int(np.argmin(vals))
    return tuple(int(x) for x in grid[k]), float(vals[k])


def test_02_batch_candidates():
    start = time.monotonic()
    rng = np.random.default_rng(2)
    interior_checked = 0
    bad = []
    attempts = 0
    while interior_checked < 50 and attempts < 500:
        attempts += 1
        n = int(rng.integers(1, 4))
        p = _interior_problem(rng, n)
        b_grid, _ = _grid_optimum(p)
        if any(b <= 1 or b >= p.max_batch(i) for i, b in enumerate(b_grid)):
            continue
        bhat = newton_jacobi(p)
        interior_checked += 1
        for i, b in enumerate(b_grid):
            if b not in (math.floor(bhat[i]), math.ceil(bhat[i])):
                bad.append((attempts, i, b, float(bhat[i])))
    # boundary: negligible variance -> all ones
    low_ok = True
    for seed in range(10):
        rng2 = np.random.default_rng([2, seed])
        p = _interior_problem(rng2, 2)
        p = dataclasses.replace(p, var_coef=p.var_coef * 1e-9)
        low_ok &= _grid_optimum(p)[0] == (1, 1)
    # boundary: caps below the stationary point -> floor(kappa); variance kept
    # small enough that the capped batches stay denominator-feasible
    high_ok, high_checked = True, 0
    for seed in range(30):
        rng2 = np.random.default_rng([3, seed])
        a = float(rng2.uniform(0.5, 2.0))
        b_star = float(rng2.uniform(3.0, 6.0))
        z = float(rng2.uniform(0.03, 0.12))
        server = tuple((rng2.uniform(0.05, 1.0) * rng2.uniform(0.7, 1.3, 2)).tolist())
        fixed = 2 * b_star * float(np.mean(server)) * (1 - 2 * z) / z
        p = BatchSizeProblem(
            margin_cap=a, var_coef=z * a * b_star / 2, server_secs=server,
            fixed_secs=fixed, kappa=(2.7, 2.7), mem_num=(2.7, 2.7),
            mem_den=(1.0, 1.0), scale=2.0)
        if np.min(newton_jacobi(p)) < 2.7:
            continue  # premise of the third case not met
        high_checked += 1
        high_ok &= _grid_optimum(p)[0] == (2, 2)
    high_ok &= high_checked >= 10
    elapsed = time.monotonic() - start
    verdict(2, "batch-size three-case candidates",
            interior_checked == 50 and not bad and low_ok and high_ok
            and elapsed < 30,
            f"interior={interior_checked}/50 violations={bad[:3]} "
            f"low_ok={low_ok} high_ok={high_ok}, {elapsed:.1f}s (<30s)")


# ---------------------------------------------------------------------------
# 3. Joint quality vs the brute-force oracle
# ---------------------------------------------------------------------------

def test_03_joint_quality():
    start = time.monotonic()
    within, total, below = 0, 0, []
    for seed in range(100):
        sc = small_scenario(seed + 1000, n_devices=2, n_layers=4, b_cap=16)
        res = bcd_optimize(sc)
        _, val = brute_force_joint(sc, 16)
        total += 1
        gap = res.objective / val - 1.0
        if gap <= 0.05:
            within += 1
        if gap < -1e-9:
            below.append(seed)
    elapsed = time.monotonic() - start
    verdict(3, "joint optimization within 5% of brute force",
            within >= 90 and not below and elapsed < 120,
            f"{within}/100 within 5%, below-oracle={below}, {elapsed:.1f}s (<120s)")


# ---------------------------------------------------------------------------
# 4. Dinkelbach termination behavior
# ---------------------------------------------------------------------------

def test_04_dinkelbach_behavior():
    rng = np.random.default_rng(4)
    ok = True
    worst_res, worst_iters = 0.0, 0
    for seed in range(50):
        n = [1, 2, 3][seed % 3]
        L = [3, 4, 5][(seed // 3) % 3]
        sc = small_scenario(seed + 200, n_devices=n, n_layers=L, b_cap=16)
        batches = tuple(int(x) for x in rng.integers(1, 8, n))
        res = solve_split(sc, batches)
        lams = res.lambdas
        ok &= all(b <= a * (1 + 1e-12) for a, b in zip(lams, lams[1:]))
        ok &= abs(res.residuals[-1]) <= 1e-9
        ok &= len(res.residuals) <= 100
        worst_res = max(worst_res, abs(res.residuals[-1]))
        worst_iters = max(worst_iters, len(res.residuals))
    verdict(4, "Dinkelbach lambda monotone, |F|<=1e-9, <=100 iters", ok,
            f"worst |F|={worst_res:.2e}, worst iters={worst_iters}")


# ---------------------------------------------------------------------------
# 5. Centralized-SGD equivalence at interval 1 with homogeneous cuts
# ---------------------------------------------------------------------------

def test_05_centralized_equivalence(desk_scenario):
    start = time.monotonic()
    sc = dataclasses.replace(desk_scenario, agg_interval=1)
    dec = Decision(batches=(4, 8), cuts=(2, 2))
    net = LayeredNet(widths=(2, 8, 8, 6, 3),
                     activations=("tanh", "tanh", "tanh", "identity"),
                     loss="softmax_ce")
    data = make_blobs(120, 3, 2, seed=0)
    part = partition_data(data[1], 2, "iid", seed=0)
    state = init_state(sc, dec, net, part, seed=42)
    ref = centralized_reference(net, data, part, dec.batches, sc.lr, 100, seed=42)
    worst = 0.0
    for t in range(100):
        run_round(state, sc, dec, data, part)
        aggregate_clients(state, sc, dec)
        for (w, b), (rw, rb) in zip(state.averaged_params(), ref[t]):
            worst = max(worst, float(np.max(np.abs(w - rw))),
                        float(np.max(np.abs(b - rb))))
    elapsed = time.monotonic() - start
    verdict(5, "centralized equivalence (I=1, homogeneous cuts)",
            worst <= 1e-10 and elapsed < 10,
            f"max |diff|={worst:.2e} over 100 rounds, {elapsed:.1f}s (<10s)")


# ---------------------------------------------------------------------------
# 6. Empirical client-drift bound
# ---------------------------------------------------------------------------

def test_06_drift_bound(desk_scenario):
    start = time.monotonic()
    sc = dataclasses.replace(desk_scenario, agg_interval=15)
    dec = Decision(batches=(4, 8), cuts=(2, 3))
    net = LayeredNet(widths=(2, 8, 8, 6, 3),
                     activations=("tanh", "tanh", "tanh", "identity"),
                     loss="softmax_ce")
    data = make_blobs(240, 3, 2, seed=3)
    part = partition_data(data[1], 2, "noniid", seed=3)
    ok = True
    worst_ratio = 0.0
    for seed in range(10):
        rep = train(sc, dec, net, data, part, seed=seed, max_rounds=45,
                    record_drift=True)
        for rec in rep.drift_records:
            bound = 4 * sc.lr**2 * sc.agg_interval**2 * rec["max_grad_sq"]
            if bound > 0:
                worst_ratio = max(worst_ratio, rec["max_dev_sq"] / bound)
            ok &= rec["max_dev_sq"] <= bound * (1 + 1e-9)
    elapsed = time.monotonic() - start
    verdict(6, "measured drift within the aggregation-interval bound",
            ok and elapsed < 60,
            f"worst measured/bound ratio={worst_ratio:.3f}, {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 7. Convergence-bound monotonicity suite
# ---------------------------------------------------------------------------

def test_07_bound_monotonicity():
    start = time.monotonic()
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        L = int(rng.integers(2, 7))
        smooth = float(rng.uniform(1, 20))
        inp = BoundInputs(
            smoothness=smooth,
            lr=float(rng.uniform(1e-4, 1.0 / smooth)),
            agg_interval=int(rng.choice([1, 2, 5, 15])),
            target_eps=float(rng.uniform(0.01, 1.0)),
            loss_gap=float(rng.uniform(0.0, 10.0)),
            n_devices=n,
            grad_var=tuple(rng.uniform(0.01, 2.0, L).tolist()),
            gsq_cum=tuple(np.cumsum(rng.uniform(0.01, 2.0, L)).tolist()),
            batches=tuple(int(x) for x in rng.integers(1, 30, n)),
            split_depth=int(rng.integers(1, L + 1)),
        )
        v = grad_norm_bound(inp, 100)
        i = int(rng.integers(0, n))
        bumped = tuple(x + 1 if k == i else x for k, x in enumerate(inp.batches))
        ok &= grad_norm_bound(dataclasses.replace(inp, batches=bumped), 100) < v
        if inp.split_depth < L:
            deeper = grad_norm_bound(
                dataclasses.replace(inp, split_depth=inp.split_depth + 1), 100)
            ok &= (deeper == v) if inp.agg_interval == 1 else (deeper >= v)
    elapsed = time.monotonic() - start
    verdict(7, "bound monotonicity over 1000 parameterizations",
            ok and elapsed < 5, f"{elapsed:.1f}s (<5s)")


# ---------------------------------------------------------------------------
# 8. Latency golden values
# ---------------------------------------------------------------------------

def test_08_latency_golden(desk_scenario, desk_decision):
    lb = round_latency(desk_scenario, desk_decision)
    golden = {
        "client_fp": (0.8, 1.2), "act_up": (2.0, 1.6),
        "grad_down": (0.4, 0.32), "client_bp": (1.6, 2.4),
        "sub_up": (0.375, 0.6), "sub_down": (0.075, 0.12),
        "server_fp": 0.08, "server_bp": 0.16,
        "server_sub_up": 0.03, "server_sub_down": 0.03,
        "split_total": 5.76, "agg_total": 0.72,
    }
    worst = 0.0
    for name, expected in golden.items():
        got = getattr(lb, name)
        pairs = zip(got, expected) if isinstance(expected, tuple) else [(got, expected)]
        for g, e in pairs:
            worst = max(worst, abs(g - e) / abs(e))
    t30 = total_time(desk_scenario, desk_decision, 30)
    worst = max(worst, abs(t30 - 183.6) / 183.6)
    verdict(8, "hand-computed latency golden values", worst <= 1e-12,
            f"worst relative error={worst:.2e} (<=1e-12)")


# ---------------------------------------------------------------------------
# 9. Gradient validity on all supported activations
# ---------------------------------------------------------------------------

def test_09_gradient_validity():
    worst = 0.0
    cases = [
        (("identity", "identity"), "squared"),
        (("tanh", "identity"), "softmax_ce"),
        (("relu", "identity"), "softmax_ce"),
        (("tanh", "relu"), "squared"),
        (("relu", "tanh"), "softmax_ce"),
    ]
    for acts, loss in cases:
        net = LayeredNet(widths=(3, 6, 3), activations=acts, loss=loss)
        params = init_params(net, seed=9)
        x, y = make_blobs(9, 3, 3, seed=9)
        worst = max(worst, gradient_check(net, params, x, y))
    verdict(9, "analytic gradients vs finite differences", worst <= 1e-4,
            f"max relative error={worst:.2e} (<=1e-4)")


# ---------------------------------------------------------------------------
# 10. Trend analogues: batch budget and split depth
# ---------------------------------------------------------------------------

def _trend_scenario(desk_scenario):
    return dataclasses.replace(desk_scenario, lr=0.05, agg_interval=15)


def test_10_trend_analogues(desk_scenario):
    start = time.monotonic()
    sc = _trend_scenario(desk_scenario)
    net = LayeredNet(widths=(2, 8, 8, 6, 3),
                     activations=("tanh", "tanh", "tanh", "identity"),
                     loss="softmax_ce")

    # (i) median final full-data loss is non-increasing in the batch budget
    data = make_blobs(240, 3, 2, seed=0, spread=1.8, radius=2.2)
    part = partition_data(data[1], 2, "iid", seed=0)
    medians = []
    for b in (1, 4, 16):
        finals = []
        for seed in range(10):
            rep = train(sc, Decision(batches=(b, b), cuts=(2, 2)), net, data,
                        part, seed=seed, max_rounds=200)
            finals.append(float(np.mean([v for _, v in rep.eval_losses[-20:]])))
        medians.append(float(np.median(finals)))
    budget_ok = all(b <= a * (1 + 1e-12) for a, b in zip(medians, medians[1:]))

    # (ii) the shallow split reaches the deep split's plateau level in no more
    # rounds than the deep split takes to reach it
    data2 = make_blobs(240, 3, 2, seed=0)
    part2 = partition_data(data2[1], 2, "noniid", seed=1)
    deep_rounds, deep_levels = [], []
    for seed in range(10):
        rep = train(sc, Decision(batches=(8, 8), cuts=(4, 4)), net, data2, part2,
                    seed=seed, max_rounds=1500,
                    plateau=PlateauRule(window=5, rtol=1e-4, smooth=20))
        deep_rounds.append(rep.plateau_round or rep.rounds_run)
        deep_levels.append(float(np.mean(rep.losses[-20:])))
    target = float(np.median(deep_levels))
    shallow_rounds = []
    for seed in range(10):
        rep = train(sc, Decision(batches=(8, 8), cuts=(1, 1)), net, data2, part2,
                    seed=seed, max_rounds=1500)
        sm = np.convolve(rep.losses, np.ones(20) / 20, mode="valid")
        hit = np.flatnonzero(sm <= target)
        shallow_rounds.append(int(hit[0]) + 20 if hit.size else 1500)
    depth_ok = float(np.median(shallow_rounds)) <= float(np.median(deep_rounds))
    elapsed = time.monotonic() - start
    verdict(10, "trend analogues (batch budget, split depth)",
            budget_ok and depth_ok and elapsed < 300,
            f"budget medians={['%.4f' % m for m in medians]} "
            f"shallow={np.median(shallow_rounds):.0f} vs deep={np.median(deep_rounds):.0f} "
            f"rounds, {elapsed:.1f}s (<300s)")


# ---------------------------------------------------------------------------
# 11. Optimizer dominance in sweeps
# ---------------------------------------------------------------------------

def test_11_sweep_dominance(tmp_path):
    # Table-I-style rates/compute/interval; step size and gradient constants
    # rescaled to the desk regime so the toy simulation actually learns while
    # the accuracy floors stay feasible
    layers = dataclasses.replace(
        hasfl.profiles.default_layer_profile(),
        grad_var=(0.3,) * 5, grad_sqmoment=(2e-4,) * 5)
    sc = generate_scenario(7, 6, SamplingRanges(lr=0.05, smoothness=2.0,
                                                layers=layers))
    path = tmp_path / "tablei.json"
    save_scenario(sc, path)
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--scenario", str(path),
                     "--sweep", "uplink=0.5:2.0:3", "--rounds", "250",
                     "--seed", "11", "--out", str(out)])
    assert code == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    by_value = {}
    for row in rows:
        by_value.setdefault(row["value"], {})[row["policy"]] = row
    dominance_ok = True
    for value, policies in by_value.items():
        theta_h = float(policies["hasfl"]["objective"])
        for name, row in policies.items():
            dominance_ok &= theta_h <= float(row["objective"]) * (1 + 1e-9)
    hasfl_secs = [float(p["hasfl"]["sim_plateau_seconds"]) for p in by_value.values()]
    rbs_secs = [float(p["rbs-rms"]["sim_plateau_seconds"]) for p in by_value.values()]
    time_ok = all(h <= float(np.median(rbs_secs)) for h in hasfl_secs)
    verdict(11, "sweep dominance and simulated time",
            dominance_ok and time_ok,
            f"objective dominance={dominance_ok}, hasfl plateau secs={hasfl_secs} "
            f"vs rbs-rms median={float(np.median(rbs_secs)):.3g}")
