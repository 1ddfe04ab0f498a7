"""End-to-end split-training simulation on the toy net with a simulated clock.

Every round each device runs its mini-batch through the full stack. Layers
above the deepest cut (the "common" segment) are stepped per-device and
averaged every round; layers up to the deepest cut (the "client-specific"
segment: the device's own layers plus its server-side non-common layers) are
stepped per-device and averaged only every ``agg_interval`` rounds. The clock
advances by the latency model's split/aggregation totals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import latency, model
from .profiles import Scenario


class DivergenceError(RuntimeError):
    """Training loss exploded past the divergence threshold."""


# ---------------------------------------------------------------------------
# Data partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataPartition:
    indices: tuple   # per device, np arrays of sample indices
    mode: str        # "iid" | "noniid"
    seed: int

    @property
    def sizes(self):
        return tuple(len(ix) for ix in self.indices)


def partition_data(labels, n_devices: int, mode: str, seed: int) -> DataPartition:
    """Disjoint equal-size per-device index sets.

    ``iid`` shuffles and splits evenly. ``noniid`` sorts by label, slices into
    2N equal shards, and deals each device two randomly drawn shards, so each
    device sees at most the labels spanned by two contiguous shards.
    """
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    if mode == "iid":
        if n % n_devices != 0:
            raise ValueError(f"{n} samples not divisible by {n_devices} devices")
        perm = rng.permutation(n)
        parts = np.split(perm, n_devices)
    elif mode == "noniid":
        n_shards = 2 * n_devices
        if n % n_shards != 0:
            raise ValueError(f"{n} samples not divisible by {n_shards} shards")
        order = np.lexsort((np.arange(n), labels))  # sort by label, stable
        shards = np.split(order, n_shards)
        deal = rng.permutation(n_shards)
        parts = [np.concatenate([shards[deal[2 * i]], shards[deal[2 * i + 1]]])
                 for i in range(n_devices)]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return DataPartition(indices=tuple(parts), mode=mode, seed=seed)


def sample_batches(partition: DataPartition, batches, round_idx: int, seed: int):
    """Per-device mini-batch indices for one round, deterministic in
    (seed, round, device); sampling is without replacement."""
    out = []
    for i, (part, b) in enumerate(zip(partition.indices, batches)):
        rng = np.random.default_rng([seed, round_idx, i])
        out.append(part[rng.choice(len(part), size=b, replace=False)])
    return out


# ---------------------------------------------------------------------------
# Training state and the two protocol stages
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    net: model.LayeredNet
    client_specific: list   # per device: [(W, b)] for layers 1..split_depth
    common: list            # [(W, b)] for layers split_depth+1..L
    split_depth: int
    seed: int
    round: int = 0
    aggs_done: int = 0
    t_split: float = 0.0
    t_agg: float = 0.0
    loss_history: list = field(default_factory=list)

    @property
    def clock(self):
        """Simulated seconds; exact product form so R rounds equal total_time."""
        return self.round * self.t_split + self.aggs_done * self.t_agg

    def device_params(self, i):
        return self.client_specific[i] + self.common

    def averaged_params(self):
        """The virtual global model: averaged client-specific + common."""
        avg = average_layer_lists(self.client_specific)
        return avg + self.common


def average_layer_lists(layer_lists):
    """Element-wise mean of several [(W, b)] lists."""
    n_layers = len(layer_lists[0])
    out = []
    for j in range(n_layers):
        w = np.mean(np.stack([p[j][0] for p in layer_lists]), axis=0)
        b = np.mean(np.stack([p[j][1] for p in layer_lists]), axis=0)
        out.append((w, b))
    return out


def init_state(scenario: Scenario, decision: latency.Decision, net: model.LayeredNet,
               partition: DataPartition, seed: int) -> TrainState:
    decision.validate_against(scenario)
    if net.num_layers != scenario.layers.num_layers:
        raise ValueError(
            f"net has {net.num_layers} layers but the scenario profile has "
            f"{scenario.layers.num_layers}")
    for i, (b, sz) in enumerate(zip(decision.batches, partition.sizes)):
        if b > sz:
            raise ValueError(f"device {i}: batch {b} exceeds local dataset size {sz}")
    params0 = model.init_params(net, seed)
    depth = decision.max_cut
    lb = latency.round_latency(scenario, decision)
    return TrainState(
        net=net,
        client_specific=[model.clone_params(params0[:depth]) for _ in scenario.devices],
        common=model.clone_params(params0[depth:]),
        split_depth=depth,
        seed=seed,
        t_split=lb.split_total,
        t_agg=lb.agg_total,
    )


def run_round(state: TrainState, scenario: Scenario, decision: latency.Decision,
              data, partition: DataPartition, lr: float | None = None):
    """One split-training round: per-device forward/backward through the full
    stack, per-device step on the client-specific layers, averaged step on the
    common layers, clock forward by the split-stage latency.

    ``lr`` overrides the scenario step size (e.g. 0 to advance only the clock).
    """
    x, y = data
    t = state.round + 1
    lr = scenario.lr if lr is None else lr
    batches = sample_batches(partition, decision.batches, t, state.seed)
    depth = state.split_depth
    n_dev = len(state.client_specific)

    losses = []
    stepped_commons = []
    for i in range(n_dev):
        params = state.device_params(i)
        loss, grads = model.loss_and_grads(state.net, params, x[batches[i]], y[batches[i]])
        losses.append(loss)
        cs = state.client_specific[i]
        for j in range(depth):
            cs[j] = (cs[j][0] - lr * grads[j][0], cs[j][1] - lr * grads[j][1])
        stepped_commons.append(
            [(w - lr * gw, b - lr * gb)
             for (w, b), (gw, gb) in zip(state.common, grads[depth:])])
    if stepped_commons[0]:
        state.common = average_layer_lists(stepped_commons)

    round_loss = float(np.mean(losses))
    if not math.isfinite(round_loss):
        raise DivergenceError(f"non-finite loss at round {t}")
    state.loss_history.append(round_loss)
    state.round = t
    return state


def aggregate_clients(state: TrainState, scenario: Scenario, decision: latency.Decision):
    """Average the client-specific segment across devices and redistribute."""
    if state.round % scenario.agg_interval != 0:
        raise RuntimeError(
            f"aggregation called off-schedule at round {state.round} "
            f"(interval {scenario.agg_interval})")
    avg = average_layer_lists(state.client_specific)
    state.client_specific = [model.clone_params(avg) for _ in state.client_specific]
    state.aggs_done += 1
    return state


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlateauRule:
    """Loss analogue of an accuracy-plateau stop: halt once the smoothed loss
    improves by less than ``rtol`` (relative) at each of ``window``
    consecutive rounds."""

    window: int = 5
    rtol: float = 2e-4
    smooth: int = 20


@dataclass
class RunReport:
    decision: latency.Decision
    seed: int
    rows: list                 # (round, clock seconds, loss, accuracy)
    stop_reason: str           # "rounds" | "plateau" | "diverged"
    rounds_run: int
    clock: float
    plateau_round: int | None = None
    drift_records: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)  # (round, full-data loss)

    @property
    def losses(self):
        return [r[2] for r in self.rows]


def _smoothed(values, width):
    width = min(width, len(values))
    return float(np.mean(values[-width:]))


def _client_grad_sqnorm(grads, depth):
    return float(sum(np.sum(gw * gw) + np.sum(gb * gb) for gw, gb in grads[:depth]))


def _max_drift(state: TrainState):
    avg = average_layer_lists(state.client_specific)
    worst = 0.0
    for cs in state.client_specific:
        d = 0.0
        for (wa, ba), (w, b) in zip(avg, cs):
            d += float(np.sum((wa - w) ** 2) + np.sum((ba - b) ** 2))
        worst = max(worst, d)
    return worst


def train(scenario: Scenario, decision: latency.Decision, net: model.LayeredNet,
          data, partition: DataPartition, seed: int, max_rounds: int,
          plateau: PlateauRule | None = None, record_drift: bool = False,
          eval_every: int = 1) -> RunReport:
    """Run the full protocol for up to ``max_rounds`` rounds.

    Stops early at the plateau rule if one is given. When ``record_drift`` is
    set, each aggregation window contributes one record with the measured max
    squared deviation of any device's client-specific segment from the mean
    and the max observed client-segment squared gradient norm in the window.
    """
    x, y = data
    state = init_state(scenario, decision, net, partition, seed)
    initial_loss = None
    rows = []
    eval_losses = []
    smoothed = []
    stop_reason = "rounds"
    plateau_round = None
    drift_records = []
    window_gmax = 0.0
    window_devmax = 0.0

    for t in range(1, max_rounds + 1):
        if record_drift:
            # gradients of the client-specific segment drive the drift bound;
            # recompute them on the same batches the round will use
            batches = sample_batches(partition, decision.batches, t, seed)
            for i in range(len(state.client_specific)):
                _, grads = model.loss_and_grads(
                    state.net, state.device_params(i), x[batches[i]], y[batches[i]])
                window_gmax = max(window_gmax, _client_grad_sqnorm(grads, state.split_depth))
        run_round(state, scenario, decision, (x, y), partition)
        if record_drift:
            window_devmax = max(window_devmax, _max_drift(state))
        loss = state.loss_history[-1]
        if initial_loss is None:
            initial_loss = loss
        if loss > 1e6 * max(abs(initial_loss), 1e-12):
            stop_reason = "diverged"
            rows.append((t, state.clock, loss, float("nan")))
            raise DivergenceError(
                f"loss {loss:.3e} exceeded 1e6 x initial at round {t}")
        acc = float("nan")
        if eval_every and t % eval_every == 0:
            full_loss, acc = model.evaluate(state.net, state.averaged_params(), x, y)
            eval_losses.append((t, full_loss))
        rows.append((t, state.clock, loss, acc))

        if t % scenario.agg_interval == 0:
            aggregate_clients(state, scenario, decision)
            if record_drift:
                drift_records.append({"round": t, "max_dev_sq": window_devmax,
                                      "max_grad_sq": window_gmax})
                window_gmax = 0.0
                window_devmax = 0.0

        if plateau is not None:
            smoothed.append(_smoothed(state.loss_history, plateau.smooth))
            if len(smoothed) >= plateau.smooth + plateau.window:
                recent = smoothed[-(plateau.window + 1):]
                flat = all(
                    (recent[k] - recent[k + 1]) < plateau.rtol * max(abs(recent[k]), 1e-12)
                    for k in range(plateau.window))
                if flat:
                    stop_reason = "plateau"
                    plateau_round = t
                    break

    return RunReport(
        decision=decision, seed=seed, rows=rows, stop_reason=stop_reason,
        rounds_run=rows[-1][0] if rows else 0,
        clock=state.clock, plateau_round=plateau_round,
        drift_records=drift_records, eval_losses=eval_losses,
    )


def centralized_reference(net: model.LayeredNet, data, partition: DataPartition,
                          batches, lr: float, rounds: int, seed: int):
    """Independent centralized mini-batch SGD: one parameter vector stepped
    with the device-uniform average of per-device mini-batch gradients, using
    the same batch sampling stream as the simulator. Returns the parameter
    trajectory (one snapshot per round)."""
    x, y = data
    params = model.init_params(net, seed)
    n_dev = len(partition.indices)
    traj = []
    for t in range(1, rounds + 1):
        batch_idx = sample_batches(partition, batches, t, seed)
        acc = None
        for i in range(n_dev):
            _, grads = model.loss_and_grads(net, params, x[batch_idx[i]], y[batch_idx[i]])
            if acc is None:
                acc = [[gw.copy(), gb.copy()] for gw, gb in grads]
            else:
                for slot, (gw, gb) in zip(acc, grads):
                    slot[0] += gw
                    slot[1] += gb
        params = [(w - lr * gw / n_dev, b - lr * gb / n_dev)
                  for (w, b), (gw, gb) in zip(params, acc)]
        traj.append(model.clone_params(params))
    return traj


# ---------------------------------------------------------------------------
# Empirical convergence constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantEstimates:
    smoothness: float
    grad_var: tuple       # per layer
    grad_sqmoment: tuple  # per layer


def _layer_sqnorms(grads):
    return np.array([float(np.sum(gw * gw) + np.sum(gb * gb)) for gw, gb in grads])


def _flat(params_or_grads):
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()])
                           for w, b in params_or_grads])


def estimate_constants(net: model.LayeredNet, params, data, seed: int,
                       batch_size: int = 16, n_probes: int = 16,
                       n_points: int = 6, perturb: float = 0.1) -> ConstantEstimates:
    """Empirical smoothness / per-layer variance and second-moment constants.

    Smoothness: max gradient-difference ratio over all pairs of ``n_points``
    randomly perturbed parameter vectors. Variance: batch_size times the mean
    squared per-layer deviation of mini-batch gradients from the full-batch
    gradient. Second moment: max observed per-layer squared gradient norm.
    """
    if n_points < 2:
        raise ValueError("need at least 2 parameter probe points for the smoothness estimate")
    x, y = data
    n = len(y)
    batch_size = min(batch_size, n)
    rng = np.random.default_rng(seed)

    _, g_full = model.loss_and_grads(net, params, x, y)
    full_layer = [(gw.copy(), gb.copy()) for gw, gb in g_full]

    var_acc = np.zeros(net.num_layers)
    sq_max = np.zeros(net.num_layers)
    for _ in range(n_probes):
        idx = rng.choice(n, size=batch_size, replace=False)
        _, g = model.loss_and_grads(net, params, x[idx], y[idx])
        diff = [(gw - fw, gb - fb) for (gw, gb), (fw, fb) in zip(g, full_layer)]
        var_acc += _layer_sqnorms(diff)
        sq_max = np.maximum(sq_max, _layer_sqnorms(g))
    grad_var = batch_size * var_acc / n_probes

    points = []
    for _ in range(n_points):
        p = [(w + perturb * rng.standard_normal(w.shape),
              b + perturb * rng.standard_normal(b.shape)) for w, b in params]
        _, g = model.loss_and_grads(net, p, x, y)
        points.append((_flat(p), _flat(g)))
    beta = 0.0
    for a in range(len(points)):
        for b_ in range(a + 1, len(points)):
            dw = np.linalg.norm(points[a][0] - points[b_][0])
            dg = np.linalg.norm(points[a][1] - points[b_][1])
            if dw > 0:
                beta = max(beta, dg / dw)

    return ConstantEstimates(
        smoothness=beta,
        grad_var=tuple(grad_var.tolist()),
        grad_sqmoment=tuple(sq_max.tolist()),
    )
