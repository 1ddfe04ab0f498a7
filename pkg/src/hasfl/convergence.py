"""Convergence bound, minimum-round count, and the time-to-convergence objectives.

The bound on the running average of E||grad f||^2 after R rounds is

    2*loss_gap/(lr*R)
    + lr*smoothness/N^2 * sum_i sum_{j<=L} grad_var_j / b_i
    + [I > 1] * 4 * smoothness^2 * lr^2 * I^2 * gsq_cum(L_c)

with L_c the deepest client-specific layer across devices. Inverting it for a
target accuracy gives the minimum round count, and multiplying by the
per-round latency yields the objective the optimizer minimizes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from . import latency
from .profiles import Scenario, cumulative_stats

# Relative margin below which the objective denominator is considered
# ill-conditioned (the objective has a pole at zero margin).
CONDITIONING_RTOL = 1e-6


class InfeasibleError(RuntimeError):
    """No decision can meet the constraints / the accuracy target."""


def drift_bound(lr: float, agg_interval: int, gsq_cum_depth: float) -> float:
    """Upper bound on max_i E||avg client model - client model i||^2.

    Zero when aggregation happens every round; otherwise
    4 * lr^2 * I^2 * (cumulative second moment through the split depth).
    """
    if agg_interval <= 1:
        return 0.0
    return 4.0 * lr**2 * agg_interval**2 * gsq_cum_depth


@dataclass(frozen=True)
class BoundInputs:
    """Everything the convergence bound needs, extracted from a scenario/decision."""

    smoothness: float
    lr: float
    agg_interval: int
    target_eps: float
    loss_gap: float
    n_devices: int
    grad_var: tuple        # per layer, length L
    gsq_cum: tuple         # prefix sums of per-layer second moments
    batches: tuple
    split_depth: int       # max cut over devices (L_c)

    @classmethod
    def from_scenario(cls, scenario: Scenario, decision: latency.Decision) -> "BoundInputs":
        decision.validate_against(scenario)
        stats = cumulative_stats(scenario.layers)
        return cls(
            smoothness=scenario.smoothness,
            lr=scenario.lr,
            agg_interval=scenario.agg_interval,
            target_eps=scenario.target_eps,
            loss_gap=scenario.loss_gap,
            n_devices=scenario.n_devices,
            grad_var=scenario.layers.grad_var,
            gsq_cum=stats.gsq_cum,
            batches=decision.batches,
            split_depth=decision.max_cut,
        )


def variance_term(inputs: BoundInputs) -> float:
    """lr*smoothness/N^2 * sum_i sum_j grad_var_j / b_i."""
    var_sum = math.fsum(inputs.grad_var)
    inv_b = math.fsum(1.0 / b for b in inputs.batches)
    return inputs.smoothness * inputs.lr * var_sum * inv_b / inputs.n_devices**2


def drift_term(inputs: BoundInputs) -> float:
    """smoothness^2 * drift bound at the current split depth."""
    return inputs.smoothness**2 * drift_bound(
        inputs.lr, inputs.agg_interval, inputs.gsq_cum[inputs.split_depth - 1])


def grad_norm_bound(inputs: BoundInputs, rounds: int) -> float:
    """Bound on the R-round average of E||grad f||^2."""
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    return (2.0 * inputs.loss_gap / (inputs.lr * rounds)
            + variance_term(inputs)
            + drift_term(inputs))


def accuracy_margin(inputs: BoundInputs) -> float:
    """target_eps minus the variance and drift floors (the objective denominator).

    Computed with compensated summation; warns when positive but within
    CONDITIONING_RTOL * target_eps of the pole.
    """
    v = variance_term(inputs)
    d = drift_term(inputs)
    margin = math.fsum((inputs.target_eps, -v, -d))
    if 0.0 < margin < CONDITIONING_RTOL * inputs.target_eps:
        warnings.warn(
            f"accuracy margin {margin:.3e} is within {CONDITIONING_RTOL:.0e} of the "
            f"pole (target {inputs.target_eps:.3e}); objective values are ill-conditioned",
            RuntimeWarning, stacklevel=2)
    return margin


def _infeasible_message(inputs: BoundInputs, margin: float) -> str:
    v = variance_term(inputs)
    d = drift_term(inputs)
    dominant = ("gradient-variance floor" if v >= d else "client-drift floor")
    return (f"target accuracy {inputs.target_eps} unreachable: margin {margin:.3e} <= 0 "
            f"(variance floor {v:.3e}, drift floor {d:.3e}; dominated by the {dominant})")


def rounds_to_target(inputs: BoundInputs) -> float:
    """Minimum round count hitting the accuracy target, as a real number."""
    margin = accuracy_margin(inputs)
    if margin <= 0.0:
        raise InfeasibleError(_infeasible_message(inputs, margin))
    return 2.0 * inputs.loss_gap / (inputs.lr * margin)


def convergence_time(scenario: Scenario, decision: latency.Decision) -> float:
    """Estimated time to the accuracy target for a decision:
    rounds_to_target * (split latency + aggregation latency / interval)."""
    inputs = BoundInputs.from_scenario(scenario, decision)
    lb = latency.round_latency(scenario, decision)
    per_round = lb.split_total + lb.agg_total / scenario.agg_interval
    return rounds_to_target(inputs) * per_round


@dataclass(frozen=True)
class AuxiliaryCaps:
    """Caps on the max-coupled terms of the relaxed objective.

    ``gsq``: cumulative second moment at any device's cut; ``submodel_bits``:
    any device's sub-model size; ``up_phase`` / ``down_phase``: per-device
    split-stage latencies (client FP + upload, download + client BP);
    ``agg_up`` / ``agg_down``: aggregation transfer latencies.
    """

    gsq: float
    submodel_bits: float
    up_phase: float
    down_phase: float
    agg_up: float
    agg_down: float

    @classmethod
    def tight(cls, scenario: Scenario, decision: latency.Decision) -> "AuxiliaryCaps":
        """The caps at their defining maxima for a concrete decision."""
        decision.validate_against(scenario)
        stats = cumulative_stats(scenario.layers)
        lb = latency.round_latency(scenario, decision)
        return cls(
            gsq=max(stats.gsq_cum[c - 1] for c in decision.cuts),
            submodel_bits=max(scenario.layers.submodel_bits[c - 1] for c in decision.cuts),
            up_phase=max(f + u for f, u in zip(lb.client_fp, lb.act_up)),
            down_phase=max(d + b for d, b in zip(lb.grad_down, lb.client_bp)),
            agg_up=max(max(lb.sub_up), lb.server_sub_up),
            agg_down=max(max(lb.sub_down), lb.server_sub_down),
        )


def convergence_time_capped(scenario: Scenario, batches, caps: AuxiliaryCaps,
                            server_fp: float, server_bp: float) -> float:
    """Relaxed objective: latencies replaced by caps, drift floor by the gsq cap.

    Equals convergence_time when the caps are tight for the decision that
    produced ``server_fp``/``server_bp``.
    """
    var_sum = math.fsum(scenario.layers.grad_var)
    inv_b = math.fsum(1.0 / b for b in batches)
    v = scenario.smoothness * scenario.lr * var_sum * inv_b / scenario.n_devices**2
    d = scenario.smoothness**2 * drift_bound(scenario.lr, scenario.agg_interval, caps.gsq)
    margin = math.fsum((scenario.target_eps, -v, -d))
    if margin <= 0.0:
        raise InfeasibleError(
            f"capped objective denominator non-positive (margin {margin:.3e}; "
            f"variance floor {v:.3e}, drift floor {d:.3e})")
    if margin < CONDITIONING_RTOL * scenario.target_eps:
        warnings.warn(
            f"capped accuracy margin {margin:.3e} is ill-conditioned "
            f"(target {scenario.target_eps:.3e})", RuntimeWarning, stacklevel=2)
    per_round = (caps.up_phase + server_fp + server_bp + caps.down_phase
                 + (caps.agg_up + caps.agg_down) / scenario.agg_interval)
    return 2.0 * scenario.loss_gap * per_round / (scenario.lr * margin)
