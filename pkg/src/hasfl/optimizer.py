"""Joint batch-size / split-point optimization.

The time-to-convergence objective is minimized by alternating two exact block
solves: the batch-size block (stationary point of the capped objective via
Newton-Jacobi sweeps, then a three-case integer rounding searched exhaustively
over the candidate tuples) and the split block (a linear-fractional problem in
the one-hot cut assignment, solved with the Dinkelbach iteration around an
exact branch-and-bound inner minimizer). A joint brute-force oracle over the
discrete grid backs the whole thing for validation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import latency
from .convergence import AuxiliaryCaps, InfeasibleError
from .profiles import Scenario, cumulative_stats

_EXACT_BS_LIMIT = 200_000   # max candidate tuples for the exhaustive batch search
_UNBOUNDED_BATCH = 10**6    # stand-in cap when no constraint binds a device


def _drift_coef(scenario: Scenario) -> float:
    """Multiplier of the cumulative-second-moment cap in the denominator."""
    if scenario.agg_interval <= 1:
        return 0.0
    return 4.0 * scenario.smoothness**2 * scenario.lr**2 * scenario.agg_interval**2


def _var_coef(scenario: Scenario) -> float:
    """Multiplier of sum_i 1/b_i in the denominator."""
    return (scenario.smoothness * scenario.lr * math.fsum(scenario.layers.grad_var)
            / scenario.n_devices**2)


# ---------------------------------------------------------------------------
# Batch-size block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchSizeProblem:
    """Capped objective restricted to the batch sizes, cuts and caps fixed.

    theta(b) = scale * (sum_i b_i*server_secs_i + fixed_secs)
                     / (margin_cap - sum_i var_coef/b_i)

    ``kappa`` are the per-device real-valued caps (memory and the two
    split-phase latency caps); feasible integers are 1..max_batch(i).
    """

    margin_cap: float     # accuracy target minus the capped drift floor
    var_coef: float       # variance coefficient (same for every device)
    server_secs: tuple    # per-device server FP+BP seconds per sample
    fixed_secs: float     # capped latencies independent of b
    kappa: tuple          # per-device real cap
    mem_num: tuple        # free memory at the cut (bits)
    mem_den: tuple        # per-sample stored smashed-data bits at the cut
    scale: float          # 2*loss_gap/lr

    @classmethod
    def from_scenario(cls, scenario: Scenario, cuts, caps: AuxiliaryCaps) -> "BatchSizeProblem":
        layers = scenario.layers
        stats = cumulative_stats(layers)
        server_secs, kappa, mem_num, mem_den = [], [], [], []
        for dev, c in zip(scenario.devices, cuts):
            j = c - 1
            server_secs.append(
                (layers.fp_flops_cum[-1] - layers.fp_flops_cum[j]
                 + layers.bp_flops_cum[-1] - layers.bp_flops_cum[j]) / scenario.server.compute)
            num = dev.memory_bits - layers.opt_state_bits_cum[j] - layers.submodel_bits[j]
            den = stats.act_bits_cum[j] + stats.actgrad_bits_cum[j]
            mem_num.append(num)
            mem_den.append(den)
            mem_cap = (num / den) if den > 0 else (math.inf if num > 0 else 0.0)
            up_unit = layers.fp_flops_cum[j] / dev.compute + layers.act_bits[j] / dev.up_rate
            down_unit = layers.actgrad_bits[j] / dev.down_rate + layers.bp_flops_cum[j] / dev.compute
            up_cap = caps.up_phase / up_unit if up_unit > 0 else math.inf
            down_cap = caps.down_phase / down_unit if down_unit > 0 else math.inf
            kappa.append(min(mem_cap, up_cap, down_cap))
        return cls(
            margin_cap=scenario.target_eps - _drift_coef(scenario) * caps.gsq,
            var_coef=_var_coef(scenario),
            server_secs=tuple(server_secs),
            fixed_secs=(caps.up_phase + caps.down_phase
                        + (caps.agg_up + caps.agg_down) / scenario.agg_interval),
            kappa=tuple(kappa),
            mem_num=tuple(mem_num),
            mem_den=tuple(mem_den),
            scale=2.0 * scenario.loss_gap / scenario.lr,
        )

    @property
    def n(self):
        return len(self.server_secs)

    def max_batch(self, i: int) -> int:
        """Largest feasible integer batch for device i (memory bound is strict)."""
        k = self.kappa[i]
        if not math.isfinite(k):
            return _UNBOUNDED_BATCH
        m = math.floor(k)
        # memory constraint is strict; back off when floor(kappa) sits on it
        if self.mem_den[i] > 0 and m * self.mem_den[i] >= self.mem_num[i]:
            m -= 1
        return m

    def theta(self, b) -> float:
        """Objective value; +inf when the denominator is non-positive."""
        num = math.fsum(bi * ci for bi, ci in zip(b, self.server_secs)) + self.fixed_secs
        den = self.margin_cap - math.fsum(self.var_coef / bi for bi in b)
        if den <= 0.0:
            return math.inf
        return self.scale * num / den

    def theta_many(self, b_matrix: np.ndarray) -> np.ndarray:
        """Vectorized theta over rows of an (M, N) batch matrix."""
        b = np.asarray(b_matrix, dtype=float)
        num = b @ np.asarray(self.server_secs) + self.fixed_secs
        den = self.margin_cap - (self.var_coef / b).sum(axis=1)
        out = np.full(b.shape[0], np.inf)
        ok = den > 0.0
        out[ok] = self.scale * num[ok] / den[ok]
        return out

    def stationarity(self, b) -> np.ndarray:
        """Residuals of the stationary system for devices with server work."""
        b = np.asarray(b, dtype=float)
        c = np.asarray(self.server_secs)
        active = c > 0
        s1 = self.margin_cap - np.sum(self.var_coef / b[np.isfinite(b)])
        s2 = float(np.sum(b[active] * c[active])) + self.fixed_secs
        res = np.zeros(self.n)
        res[active] = c[active] * s1 - s2 * self.var_coef / b[active] ** 2
        return res


def newton_jacobi(problem: BatchSizeProblem, init=None, tol: float = 1e-9,
                  max_sweeps: int = 200) -> np.ndarray:
    """Real-valued stationary point of the batch-size objective.

    Jacobi sweeps of per-coordinate Newton steps with 0.5 damping on steps
    leaving the feasible region, and a bracketed-bisection fallback (each
    coordinate residual is increasing in its own batch size, so the root is
    unique). Devices with zero server work get a +inf sentinel (the objective
    only improves as their batch grows); if the variance coefficient is zero
    the objective is non-decreasing in every batch and all sentinels are 0.
    """
    n = problem.n
    c = np.asarray(problem.server_secs)
    B = problem.var_coef
    A = problem.margin_cap
    if B == 0.0:
        return np.zeros(n)
    out = np.full(n, np.inf)
    active = np.flatnonzero(c > 0)
    if active.size == 0:
        return out
    if A <= 0.0:
        raise InfeasibleError(
            f"batch-size subproblem has non-positive accuracy cap {A:.3e}")

    ca = c[active]
    b = np.empty(active.size)
    if init is not None:
        b[:] = np.asarray(init, dtype=float)[active]
    else:
        b = np.sqrt(B * problem.fixed_secs / (A * ca))
        kap = np.asarray([problem.kappa[i] for i in active])
        b = np.clip(b, 1.0, np.where(np.isfinite(kap), np.maximum(kap, 1.0), np.inf))
    # repair an infeasible start: the root region satisfies A - sum B/b > 0
    floor_b = 2.0 * active.size * B / A
    if A - np.sum(B / b) <= 0.0:
        b = np.maximum(b, floor_b)

    def residuals(bv):
        s1 = A - np.sum(B / bv)
        s2 = float(np.sum(bv * ca)) + problem.fixed_secs
        return ca * s1 - s2 * B / bv**2, s1, s2

    for sweep in range(max_sweeps):
        xi, s1, s2 = residuals(b)
        scale = np.maximum(np.abs(ca * s1), np.abs(s2 * B / b**2))
        if np.all(np.abs(xi) <= tol * np.maximum(scale, 1e-300)):
            out[active] = b
            return out
        dxi = 2.0 * B * s2 / b**3
        step = xi / dxi
        b_new = b - step
        bad = b_new <= 0.0
        while np.any(bad):
            step = np.where(bad, 0.5 * step, step)
            b_new = b - step
            bad = b_new <= 0.0
        # damp the whole sweep if it overshoots past denominator feasibility
        for _ in range(60):
            if A - np.sum(B / b_new) > 0.0:
                break
            b_new = 0.5 * (b + b_new)
        b = b_new

    # bisection fallback, one exact coordinate root per sweep
    for sweep in range(max_sweeps):
        xi, s1, s2 = residuals(b)
        scale = np.maximum(np.abs(ca * s1), np.abs(s2 * B / b**2))
        if np.all(np.abs(xi) <= tol * np.maximum(scale, 1e-300)):
            out[active] = b
            return out
        b_next = b.copy()
        for k in range(active.size):
            def xi_k(x):
                bv = b.copy()
                bv[k] = x
                s1k = A - np.sum(B / bv)
                s2k = float(np.sum(bv * ca)) + problem.fixed_secs
                return ca[k] * s1k - s2k * B / x**2
            lo, hi = b[k], b[k]
            for _ in range(200):
                if xi_k(lo) <= 0:
                    break
                lo *= 0.5
            for _ in range(200):
                if xi_k(hi) >= 0:
                    break
                hi *= 2.0
            else:
                raise RuntimeError("stationary-point bracket not found")
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if xi_k(mid) < 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-12 * max(1.0, hi):
                    break
            b_next[k] = 0.5 * (lo + hi)
        b = b_next

    raise RuntimeError("Newton-Jacobi did not converge within the sweep budget")


def _candidate_sets(problem: BatchSizeProblem, bhat: np.ndarray):
    """Per-device integer candidates: 1, the two integers around the
    stationary point, and the feasibility cap."""
    sets = []
    for i in range(problem.n):
        m = problem.max_batch(i)
        if m < 1:
            raise InfeasibleError(
                f"device {i}: no feasible batch size (cap {problem.kappa[i]:.3g} < 1)")
        cand = {1, m}
        h = bhat[i]
        if math.isfinite(h):
            cand.add(min(max(math.floor(h), 1), m))
            cand.add(min(max(math.ceil(h), 1), m))
        sets.append(sorted(cand))
    return sets


def solve_batch_sizes(problem: BatchSizeProblem, mode: str = "exact",
                      extra_candidates=()):
    """Optimal integer batch vector for fixed cuts and caps.

    ``exact`` searches the full candidate product (the global optimum over
    the candidate tuples, lexicographically-smallest tie-break); ``per-device``
    applies the three-case rule with a single correction pass. Candidate
    vectors in ``extra_candidates`` are always evaluated too.
    """
    bhat = newton_jacobi(problem)
    sets = _candidate_sets(problem, bhat)
    best_b, best_v = None, math.inf

    def consider(b_tuple):
        nonlocal best_b, best_v
        v = problem.theta(b_tuple)
        if v < best_v:
            best_b, best_v = tuple(int(x) for x in b_tuple), v

    if mode == "exact":
        count = 1
        for s in sets:
            count *= len(s)
        if count > _EXACT_BS_LIMIT:
            raise ValueError(
                f"exact batch search has {count} candidate tuples; use mode='per-device'")
        grid = np.array(list(itertools.product(*sets)), dtype=float)
        vals = problem.theta_many(grid)
        k = int(np.argmin(vals))  # first minimum = lexicographically smallest
        if np.isfinite(vals[k]):
            best_b, best_v = tuple(int(x) for x in grid[k]), float(vals[k])
    elif mode == "per-device":
        b = np.empty(problem.n, dtype=int)
        for i in range(problem.n):
            m = problem.max_batch(i)
            if m < 1:
                raise InfeasibleError(
                    f"device {i}: no feasible batch size (cap {problem.kappa[i]:.3g} < 1)")
            h = bhat[i]
            if h <= 1:
                b[i] = 1
            elif h >= m:
                b[i] = m
            else:
                b[i] = min(max(math.floor(h), 1), m)
        for i in range(problem.n):  # one-pass floor/ceil correction
            h = bhat[i]
            m = problem.max_batch(i)
            if 1 < h < m:
                for cand in (min(max(math.floor(h), 1), m), min(max(math.ceil(h), 1), m)):
                    trial = b.copy()
                    trial[i] = cand
                    if problem.theta(trial) < problem.theta(b):
                        b = trial
        consider(tuple(b))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    for extra in extra_candidates:
        clipped = tuple(min(max(int(x), 1), problem.max_batch(i))
                        for i, x in enumerate(extra))
        consider(clipped)

    if best_b is None:
        raise InfeasibleError(
            "no candidate batch vector keeps the objective denominator positive")
    return best_b, best_v


# ---------------------------------------------------------------------------
# Split block: Dinkelbach over an exact branch-and-bound inner solver
# ---------------------------------------------------------------------------

@dataclass
class SplitTables:
    """Per-cut lookup tables for a fixed batch vector (cuts are 0-based here)."""

    scenario: Scenario
    batches: tuple
    allowed: list                # per device, ascending 0-based cut indices
    sep: np.ndarray              # (N, L) server FP+BP seconds
    up_phase: np.ndarray         # (N, L) client FP + upload seconds
    down_phase: np.ndarray       # (N, L) download + client BP seconds
    agg_up_dev: np.ndarray       # (N, L) sub-model upload seconds
    agg_down_dev: np.ndarray     # (N, L) sub-model download seconds
    gsq: np.ndarray              # (L,) cumulative second moments
    submodel: np.ndarray         # (L,) sub-model bits
    var_floor: float             # variance part of the denominator (b fixed)
    drift_coef: float
    num_scale: float             # 2 * loss_gap
    den_scale: float             # lr


def build_split_tables(scenario: Scenario, batches) -> SplitTables:
    layers = scenario.layers
    stats = cumulative_stats(layers)
    L = layers.num_layers
    n = scenario.n_devices
    batches = tuple(int(b) for b in batches)
    if len(batches) != n:
        raise ValueError("batch vector length does not match the scenario")

    fp = np.asarray(layers.fp_flops_cum)
    bp = np.asarray(layers.bp_flops_cum)
    act = np.asarray(layers.act_bits)
    agrad = np.asarray(layers.actgrad_bits)
    sub = np.asarray(layers.submodel_bits)
    opt = np.asarray(layers.opt_state_bits_cum)
    act_cum = np.asarray(stats.act_bits_cum)
    agrad_cum = np.asarray(stats.actgrad_bits_cum)
    gsq = np.asarray(stats.gsq_cum)

    sep = np.empty((n, L))
    upp = np.empty((n, L))
    dnp = np.empty((n, L))
    aup = np.empty((n, L))
    adn = np.empty((n, L))
    allowed = []
    var_floor = _var_coef(scenario) * math.fsum(1.0 / b for b in batches)
    dc = _drift_coef(scenario)
    for i, (dev, b) in enumerate(zip(scenario.devices, batches)):
        sep[i] = b * (fp[-1] - fp + bp[-1] - bp) / scenario.server.compute
        upp[i] = b * fp / dev.compute + b * act / dev.up_rate
        dnp[i] = b * agrad / dev.down_rate + b * bp / dev.compute
        aup[i] = sub / dev.fed_up_rate
        adn[i] = sub / dev.fed_down_rate
        ok = []
        for j in range(L):
            mem_ok = b * (act_cum[j] + agrad_cum[j]) + opt[j] + sub[j] < dev.memory_bits
            margin_ok = scenario.target_eps - var_floor - dc * gsq[j] > 0.0
            if mem_ok and margin_ok:
                ok.append(j)
        if not ok:
            raise InfeasibleError(
                f"device {i}: no cut satisfies memory and accuracy-margin "
                f"constraints at batch size {b}")
        allowed.append(ok)

    return SplitTables(
        scenario=scenario, batches=batches, allowed=allowed,
        sep=sep, up_phase=upp, down_phase=dnp, agg_up_dev=aup, agg_down_dev=adn,
        gsq=gsq, submodel=sub, var_floor=var_floor, drift_coef=dc,
        num_scale=2.0 * scenario.loss_gap, den_scale=scenario.lr,
    )


def split_objective_terms(tables: SplitTables, cuts0):
    """(numerator, denominator) of the fractional objective for 0-based cuts."""
    sc = tables.scenario
    idx = np.asarray(cuts0)
    dev = np.arange(len(idx))
    t3 = float(np.max(tables.up_phase[dev, idx]))
    t4 = float(np.max(tables.down_phase[dev, idx]))
    sep = float(np.sum(tables.sep[dev, idx]))
    sizes = tables.submodel[idx]
    noncommon = len(idx) * float(np.max(sizes)) - float(np.sum(sizes))
    t5 = max(float(np.max(tables.agg_up_dev[dev, idx])), noncommon / sc.server.fed_up_rate)
    t6 = max(float(np.max(tables.agg_down_dev[dev, idx])), noncommon / sc.server.fed_down_rate)
    num = tables.num_scale * (t3 + sep + t4 + (t5 + t6) / sc.agg_interval)
    den = tables.den_scale * (sc.target_eps - tables.var_floor
                              - tables.drift_coef * float(np.max(tables.gsq[idx])))
    return num, den


def enumerate_split(scenario: Scenario, batches):
    """Exhaustive ratio minimization over all allowed cut assignments.

    Oracle for small instances; lexicographically-smallest tie-break.
    """
    tables = build_split_tables(scenario, batches)
    best_c, best_v = None, math.inf
    for cuts0 in itertools.product(*tables.allowed):
        num, den = split_objective_terms(tables, cuts0)
        v = num / den
        if v < best_v:
            best_c, best_v = cuts0, v
    cuts = tuple(j + 1 for j in best_c)
    return cuts, best_v


class _SplitSearch:
    """Branch-and-bound minimizer of numerator - lam * denominator.

    Devices are assigned in index order; children in ascending cut order, so
    the first optimum found is the lexicographically smallest. The bound for a
    partial assignment adds committed separable server terms, per-device
    optimistic minima for the rest, and running maxima for every max-coupled
    term (the server side of the aggregation transfers is bounded below by
    zero), which never exceeds the value of any completion.
    """

    def __init__(self, tables: SplitTables):
        self.t = tables
        n = len(tables.allowed)
        self.n = n
        sc = tables.scenario
        self.inv_i = 1.0 / sc.agg_interval
        # per-device minima over allowed cuts
        self.min_sep = np.array([tables.sep[i, tables.allowed[i]].min() for i in range(n)])
        self.min_up = np.array([tables.up_phase[i, tables.allowed[i]].min() for i in range(n)])
        self.min_dn = np.array([tables.down_phase[i, tables.allowed[i]].min() for i in range(n)])
        self.min_aup = np.array([tables.agg_up_dev[i, tables.allowed[i]].min() for i in range(n)])
        self.min_adn = np.array([tables.agg_down_dev[i, tables.allowed[i]].min() for i in range(n)])
        self.min_gsq = np.array([tables.gsq[tables.allowed[i]].min() for i in range(n)])
        # suffix aggregates over devices k..n-1
        def sufsum(a):
            out = np.zeros(n + 1)
            out[:n] = np.cumsum(a[::-1])[::-1]
            return out
        def sufmax(a):
            out = np.zeros(n + 1)
            running = 0.0
            for i in range(n - 1, -1, -1):
                running = max(running, a[i])
                out[i] = running
            return out
        self.suf_sep = sufsum(self.min_sep)
        self.suf_up = sufmax(self.min_up)
        self.suf_dn = sufmax(self.min_dn)
        self.suf_aup = sufmax(self.min_aup)
        self.suf_adn = sufmax(self.min_adn)
        self.suf_gsq = sufmax(self.min_gsq)

    def value(self, lam, cuts0):
        num, den = split_objective_terms(self.t, cuts0)
        return num - lam * den

    def _bound_from(self, lam, k, sep, up, dn, aup, adn, gsq):
        """Admissible lower bound given committed aggregates of devices < k."""
        t = self.t
        sep = sep + self.suf_sep[k]
        up = max(up, self.suf_up[k])
        dn = max(dn, self.suf_dn[k])
        aup = max(aup, self.suf_aup[k])
        adn = max(adn, self.suf_adn[k])
        gsq = max(gsq, self.suf_gsq[k])
        sc = t.scenario
        num = t.num_scale * (up + sep + dn + (aup + adn) * self.inv_i)
        den = t.den_scale * (sc.target_eps - t.var_floor - t.drift_coef * gsq)
        return num - lam * den

    def bound(self, lam, prefix):
        """Admissible lower bound on value(lam, c) over completions of prefix."""
        t = self.t
        k = len(prefix)
        sep = up = dn = aup = adn = gsq = 0.0
        for i, j in enumerate(prefix):
            sep += t.sep[i, j]
            up = max(up, t.up_phase[i, j])
            dn = max(dn, t.down_phase[i, j])
            aup = max(aup, t.agg_up_dev[i, j])
            adn = max(adn, t.agg_down_dev[i, j])
            gsq = max(gsq, t.gsq[j])
        return self._bound_from(lam, k, sep, up, dn, aup, adn, gsq)

    def solve(self, lam):
        # Lexicographic DFS with strict-< pruning and no initial incumbent:
        # the first optimum found (hence the one kept under strict leaf
        # acceptance) is the lexicographically smallest minimizer. Committed
        # aggregates ride along the recursion instead of being recomputed.
        best_c, best_v = None, math.inf
        prefix = []
        t = self.t
        sep_t = [t.sep[i].tolist() for i in range(self.n)]
        up_t = [t.up_phase[i].tolist() for i in range(self.n)]
        dn_t = [t.down_phase[i].tolist() for i in range(self.n)]
        aup_t = [t.agg_up_dev[i].tolist() for i in range(self.n)]
        adn_t = [t.agg_down_dev[i].tolist() for i in range(self.n)]
        gsq_t = t.gsq.tolist()

        def dfs(k, sep, up, dn, aup, adn, gsq):
            nonlocal best_c, best_v
            if k == self.n:
                v = self.value(lam, prefix)
                if v < best_v:
                    best_c, best_v = tuple(prefix), v
                return
            for j in self.t.allowed[k]:
                s2 = sep + sep_t[k][j]
                u2 = max(up, up_t[k][j])
                d2 = max(dn, dn_t[k][j])
                au2 = max(aup, aup_t[k][j])
                ad2 = max(adn, adn_t[k][j])
                g2 = max(gsq, gsq_t[j])
                if self._bound_from(lam, k + 1, s2, u2, d2, au2, ad2, g2) < best_v:
                    prefix.append(j)
                    dfs(k + 1, s2, u2, d2, au2, ad2, g2)
                    prefix.pop()

        dfs(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        return best_c, best_v


def parametric_split_min(scenario: Scenario, batches, lam: float, tables=None):
    """Exact minimizer of numerator - lam * denominator over allowed cuts."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    tables = tables or build_split_tables(scenario, batches)
    cuts0, value = _SplitSearch(tables).solve(lam)
    return tuple(j + 1 for j in cuts0), value


@dataclass
class SplitResult:
    cuts: tuple
    caps: AuxiliaryCaps
    ratio: float
    lambdas: list = field(default_factory=list)
    residuals: list = field(default_factory=list)


def solve_split(scenario: Scenario, batches, tol: float = 1e-9,
                max_iters: int = 100) -> SplitResult:
    """Dinkelbach iteration for the split block at a fixed batch vector.

    Produces the exact ratio minimizer: the inner parametric problem is solved
    exactly, so the lambda sequence is non-increasing and terminates with
    |min(num - lam*den)| within tolerance.
    """
    tables = build_split_tables(scenario, batches)
    search = _SplitSearch(tables)
    cuts0 = tuple(tables.allowed[i][0] for i in range(search.n))
    num, den = split_objective_terms(tables, cuts0)
    lam = num / den
    lambdas, residuals = [lam], []
    for _ in range(max_iters):
        cuts0_new, f_val = search.solve(lam)
        residuals.append(f_val)
        if abs(f_val) <= tol or cuts0_new == cuts0:
            cuts0 = cuts0_new
            break
        cuts0 = cuts0_new
        num, den = split_objective_terms(tables, cuts0)
        lam = num / den
        lambdas.append(lam)
    else:
        raise RuntimeError("Dinkelbach iteration cap exceeded")

    num, den = split_objective_terms(tables, cuts0)
    cuts = tuple(j + 1 for j in cuts0)
    decision = latency.Decision(batches=batches, cuts=cuts)
    caps = AuxiliaryCaps.tight(scenario, decision)
    return SplitResult(cuts=cuts, caps=caps, ratio=num / den,
                       lambdas=lambdas, residuals=residuals)


# ---------------------------------------------------------------------------
# Alternating optimization and the joint brute-force oracle
# ---------------------------------------------------------------------------

@dataclass
class OptResult:
    decision: latency.Decision
    objective: float
    trace: list            # objective after each full iteration
    iterations: int


def memory_max_batch(scenario: Scenario, device_idx: int, cut: int) -> int:
    """Largest integer batch satisfying the (strict) memory constraint."""
    layers = scenario.layers
    stats = cumulative_stats(layers)
    dev = scenario.devices[device_idx]
    j = cut - 1
    den = stats.act_bits_cum[j] + stats.actgrad_bits_cum[j]
    num = dev.memory_bits - layers.opt_state_bits_cum[j] - layers.submodel_bits[j]
    if den <= 0:
        return _UNBOUNDED_BATCH if num > 0 else 0
    m = math.floor(num / den)
    if m * den >= num:
        m -= 1
    return m


def loose_caps(scenario: Scenario, cuts) -> AuxiliaryCaps:
    """Initial caps that leave the split-phase latency constraints slack.

    The b-independent caps are tight for the cuts; the two phase caps are set
    to the largest phase time any memory-feasible batch could produce, so the
    first batch-size solve is constrained by memory alone.
    """
    decision = latency.Decision(batches=(1,) * scenario.n_devices, cuts=cuts)
    tight = AuxiliaryCaps.tight(scenario, decision)
    layers = scenario.layers
    up, down = 0.0, 0.0
    for i, (dev, c) in enumerate(zip(scenario.devices, cuts)):
        j = c - 1
        m = min(max(memory_max_batch(scenario, i, c), 1), _UNBOUNDED_BATCH)
        up = max(up, m * (layers.fp_flops_cum[j] / dev.compute
                          + layers.act_bits[j] / dev.up_rate))
        down = max(down, m * (layers.actgrad_bits[j] / dev.down_rate
                              + layers.bp_flops_cum[j] / dev.compute))
    return AuxiliaryCaps(gsq=tight.gsq, submodel_bits=tight.submodel_bits,
                         up_phase=up, down_phase=down,
                         agg_up=tight.agg_up, agg_down=tight.agg_down)


def _fallback_decision(scenario: Scenario) -> latency.Decision:
    """All cuts at layer 1; batches 1, raised toward the memory caps when the
    denominator needs larger batches to become positive."""
    n = scenario.n_devices
    cuts = (1,) * n
    maxed = tuple(memory_max_batch(scenario, i, 1) for i in range(n))
    if any(m < 1 for m in maxed):
        raise InfeasibleError("no feasible initial decision: a device has no feasible batch")
    caps = loose_caps(scenario, cuts)
    problem = BatchSizeProblem.from_scenario(scenario, cuts, caps)
    ones = (1,) * n
    if problem.theta(ones) < math.inf:
        return latency.Decision(batches=ones, cuts=cuts)
    if problem.theta(maxed) == math.inf:
        raise InfeasibleError(
            "scenario infeasible: accuracy margin non-positive even at maximal "
            "memory-feasible batches with cuts at layer 1")
    return latency.Decision(batches=maxed, cuts=cuts)


def _alternate(scenario: Scenario, decision: latency.Decision, caps: AuxiliaryCaps,
               tol: float, max_iters: int, bs_mode: str):
    """One alternation run; returns (best theta, best decision, trace, iters)
    or None when the start is infeasible. The trace is non-increasing."""
    problem = BatchSizeProblem.from_scenario(scenario, decision.cuts, caps)
    theta_prev = problem.theta(decision.batches)
    if theta_prev == math.inf:
        return None
    best = None
    trace = [theta_prev]
    iters = 0
    for iters in range(1, max_iters + 1):
        problem = BatchSizeProblem.from_scenario(scenario, decision.cuts, caps)
        try:
            batches, _ = solve_batch_sizes(problem, mode=bs_mode,
                                           extra_candidates=(decision.batches,))
            split = solve_split(scenario, batches)
        except InfeasibleError:
            return None
        decision = latency.Decision(batches=batches, cuts=split.cuts)
        caps = split.caps
        theta = split.ratio
        trace.append(theta)
        if best is None or theta < best[0]:
            best = (theta, decision)
        if abs(theta - theta_prev) <= tol * max(1.0, abs(theta_prev)):
            break
        theta_prev = theta
    return best[0], best[1], trace, iters


def _start_scales(max_mem: int, dense_limit: int = 16):
    """Batch scales for multi-start: all integers up to dense_limit, then a
    geometric tail up to the memory cap."""
    out = set(range(1, min(max_mem, dense_limit) + 1))
    s = 1
    while s < max_mem:
        s = min(2 * s, max_mem)
        out.add(s)
    return sorted(out)


def bcd_optimize(scenario: Scenario, init: latency.Decision | None = None,
                 tol: float = 1e-9, max_iters: int = 50,
                 bs_mode: str = "auto", multistart: bool = True) -> OptResult:
    """Alternate the exact batch-size and split block solves until the
    objective stalls; the per-run objective sequence is non-increasing.

    The phase caps entering the batch block are frozen constraints, so each
    run can only keep or shrink the per-round phase times of its starting
    caps; a deterministic multi-start over initial cut levels and batch
    scales explores the cap scale. With ``init`` given (or ``multistart``
    off), a single run from that decision's tight caps is performed.
    """
    if bs_mode == "auto":
        bs_mode = "exact" if 4 ** scenario.n_devices <= _EXACT_BS_LIMIT else "per-device"
    n = scenario.n_devices
    L = scenario.layers.num_layers

    runs = []
    if init is not None:
        init.validate_against(scenario)
        runs.append((init, AuxiliaryCaps.tight(scenario, init)))
        runs.append((init, loose_caps(scenario, init.cuts)))
    elif not multistart:
        decision = _fallback_decision(scenario)
        runs.append((decision, loose_caps(scenario, decision.cuts)))
    else:
        _fallback_decision(scenario)  # raises InfeasibleError when nothing is feasible
        for cut0 in range(1, L + 1):
            cuts0 = (cut0,) * n
            mems = [memory_max_batch(scenario, i, cut0) for i in range(n)]
            if any(m < 1 for m in mems):
                continue
            dense = 16 if 4 ** n <= _EXACT_BS_LIMIT else 4
            for s in _start_scales(max(mems), dense_limit=dense):
                b_s = tuple(min(s, m) for m in mems)
                runs.append((latency.Decision(batches=b_s, cuts=cuts0),
                             AuxiliaryCaps.tight(scenario, latency.Decision(batches=b_s, cuts=cuts0))))

    best = None
    for decision, caps in runs:
        result = _alternate(scenario, decision, caps, tol, max_iters, bs_mode)
        if result is None:
            continue
        theta, dec, trace, iters = result
        if best is None or theta < best[0]:
            best = (theta, dec, trace, iters)
    if best is None:
        raise InfeasibleError("no feasible decision found from any start")
    return OptResult(decision=best[1], objective=best[0], trace=best[2],
                     iterations=best[3])


def brute_force_joint(scenario: Scenario, b_max: int):
    """Exact global optimum over the cut x batch grid, b_i in 1..b_max.

    Validation oracle; guards against grids beyond 1e7 points. Ties broken by
    the lexicographically smallest (cuts, batches).
    """
    n = scenario.n_devices
    L = scenario.layers.num_layers
    if (float(b_max) ** n) * (float(L) ** n) > 1e7:
        raise ValueError("joint brute-force grid too large")

    layers = scenario.layers
    stats = cumulative_stats(layers)
    dc = _drift_coef(scenario)
    vc = _var_coef(scenario)
    gsq = np.asarray(stats.gsq_cum)
    # per device / per cut: largest memory-feasible batch (strict bound)
    mem_cap = np.zeros((n, L), dtype=int)
    for i, dev in enumerate(scenario.devices):
        for j in range(L):
            den = stats.act_bits_cum[j] + stats.actgrad_bits_cum[j]
            num = dev.memory_bits - layers.opt_state_bits_cum[j] - layers.submodel_bits[j]
            if den <= 0:
                mem_cap[i, j] = b_max if num > 0 else 0
                continue
            m = math.floor(num / den)
            if m * den >= num:
                m -= 1
            mem_cap[i, j] = min(m, b_max)

    up_unit = np.empty((n, L))
    dn_unit = np.empty((n, L))
    sep_unit = np.empty((n, L))
    fp = np.asarray(layers.fp_flops_cum)
    bp = np.asarray(layers.bp_flops_cum)
    for i, dev in enumerate(scenario.devices):
        up_unit[i] = fp / dev.compute + np.asarray(layers.act_bits) / dev.up_rate
        dn_unit[i] = np.asarray(layers.actgrad_bits) / dev.down_rate + bp / dev.compute
        sep_unit[i] = (fp[-1] - fp + bp[-1] - bp) / scenario.server.compute

    best = None  # (value, cuts, batches)
    for cuts in itertools.product(range(1, L + 1), repeat=n):
        idx = [c - 1 for c in cuts]
        caps_here = [mem_cap[i, idx[i]] for i in range(n)]
        if any(m < 1 for m in caps_here):
            continue
        axes = [np.arange(1, m + 1, dtype=float) for m in caps_here]
        mesh = np.meshgrid(*axes, indexing="ij")
        b_grid = np.stack([m.ravel() for m in mesh], axis=1)

        uu = np.asarray([up_unit[i, idx[i]] for i in range(n)])
        du = np.asarray([dn_unit[i, idx[i]] for i in range(n)])
        su = np.asarray([sep_unit[i, idx[i]] for i in range(n)])
        t3 = (b_grid * uu).max(axis=1)
        t4 = (b_grid * du).max(axis=1)
        sep = b_grid @ su
        dec0 = latency.Decision(batches=(1,) * n, cuts=cuts)
        agg_up, agg_down = latency.aggregation_latencies(scenario, dec0)
        per_round = t3 + sep + t4 + (agg_up + agg_down) / scenario.agg_interval
        margin = (scenario.target_eps - dc * float(np.max(gsq[idx]))
                  - vc * (1.0 / b_grid).sum(axis=1))
        vals = np.full(b_grid.shape[0], np.inf)
        ok = margin > 0
        vals[ok] = 2.0 * scenario.loss_gap * per_round[ok] / (scenario.lr * margin[ok])
        k = int(np.argmin(vals))
        if np.isfinite(vals[k]) and (best is None or vals[k] < best[0]):
            best = (float(vals[k]), cuts, tuple(int(x) for x in b_grid[k]))

    if best is None:
        raise InfeasibleError("no feasible (cuts, batches) point on the brute-force grid")
    value, cuts, batches = best
    return latency.Decision(batches=batches, cuts=cuts), value
