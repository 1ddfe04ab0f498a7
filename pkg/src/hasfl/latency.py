"""Per-round latency model for split training and client-side aggregation.

The split-training stage runs every round: client forward pass, activation
upload, server forward/backward, activation-gradient download, client backward
pass. The aggregation stage runs every ``agg_interval`` rounds: client-side
sub-models (and the server-side non-common sub-models) travel to the fed
server and back. All functions are pure over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .profiles import DeviceProfile, LayerProfile, Scenario


@dataclass(frozen=True)
class Decision:
    """Per-device batch sizes and cut layers (1-based, 1..L)."""

    batches: tuple
    cuts: tuple

    def __post_init__(self):
        object.__setattr__(self, "batches", tuple(int(b) for b in self.batches))
        object.__setattr__(self, "cuts", tuple(int(c) for c in self.cuts))
        if len(self.batches) != len(self.cuts):
            raise ValueError("batches and cuts must have equal length")
        for i, b in enumerate(self.batches):
            if b < 1:
                raise ValueError(f"batches[{i}] must be a positive integer, got {b}")

    def validate_against(self, scenario: Scenario):
        n, L = scenario.n_devices, scenario.layers.num_layers
        if len(self.batches) != n:
            raise ValueError(f"decision covers {len(self.batches)} devices, scenario has {n}")
        for i, c in enumerate(self.cuts):
            if not 1 <= c <= L:
                raise ValueError(f"cuts[{i}]={c} outside 1..{L}")

    @property
    def max_cut(self):
        return max(self.cuts)


@dataclass(frozen=True)
class LatencyBreakdown:
    """All stage latencies (seconds). Per-device fields are tuples."""

    client_fp: tuple
    act_up: tuple
    grad_down: tuple
    client_bp: tuple
    sub_up: tuple
    sub_down: tuple
    server_fp: float
    server_bp: float
    server_sub_up: float
    server_sub_down: float
    split_total: float  # per-round split-training latency
    agg_total: float    # client-side aggregation latency


def client_fp_latency(device: DeviceProfile, layers: LayerProfile, batch: int, cut: int) -> float:
    """Client forward pass: batch * cumulative-FP-FLOPs(cut) / device FLOPS."""
    return batch * layers.fp_flops_cum[cut - 1] / device.compute


def activation_upload_latency(device: DeviceProfile, layers: LayerProfile, batch: int, cut: int) -> float:
    """Activation upload: batch * activation-bits(cut) / uplink rate."""
    return batch * layers.act_bits[cut - 1] / device.up_rate


def grad_download_latency(device: DeviceProfile, layers: LayerProfile, batch: int, cut: int) -> float:
    """Activation-gradient download: batch * gradient-bits(cut) / downlink rate."""
    return batch * layers.actgrad_bits[cut - 1] / device.down_rate


def client_bp_latency(device: DeviceProfile, layers: LayerProfile, batch: int, cut: int) -> float:
    """Client backward pass: batch * cumulative-BP-FLOPs(cut) / device FLOPS."""
    return batch * layers.bp_flops_cum[cut - 1] / device.compute


def server_fp_bp_latency(scenario: Scenario, decision: Decision):
    """Server-side FP and BP latency over the concatenated per-device flows."""
    layers = scenario.layers
    fp_total = layers.fp_flops_cum[-1]
    bp_total = layers.bp_flops_cum[-1]
    fp_work = sum(b * (fp_total - layers.fp_flops_cum[c - 1])
                  for b, c in zip(decision.batches, decision.cuts))
    bp_work = sum(b * (bp_total - layers.bp_flops_cum[c - 1])
                  for b, c in zip(decision.batches, decision.cuts))
    return fp_work / scenario.server.compute, bp_work / scenario.server.compute


def server_noncommon_bits(scenario: Scenario, decision: Decision) -> float:
    """Total exchanged server-side non-common sub-model size:
    N * max_i submodel_bits(cut_i) - sum_i submodel_bits(cut_i)."""
    sizes = [scenario.layers.submodel_bits[c - 1] for c in decision.cuts]
    return len(sizes) * max(sizes) - sum(sizes)


def aggregation_latencies(scenario: Scenario, decision: Decision):
    """Aggregation-stage upload and download latencies.

    Each direction is the slowest of the per-device sub-model transfers and
    the server's non-common sub-model transfer.
    """
    layers = scenario.layers
    noncommon = server_noncommon_bits(scenario, decision)
    up_server = noncommon / scenario.server.fed_up_rate
    down_server = noncommon / scenario.server.fed_down_rate
    up_dev = [layers.submodel_bits[c - 1] / d.fed_up_rate
              for d, c in zip(scenario.devices, decision.cuts)]
    down_dev = [layers.submodel_bits[c - 1] / d.fed_down_rate
                for d, c in zip(scenario.devices, decision.cuts)]
    return max(max(up_dev), up_server), max(max(down_dev), down_server)


def round_latency(scenario: Scenario, decision: Decision) -> LatencyBreakdown:
    """Full per-round breakdown plus the split-training and aggregation totals."""
    decision.validate_against(scenario)
    layers = scenario.layers
    devs = scenario.devices
    bs, cs = decision.batches, decision.cuts

    fp = tuple(client_fp_latency(d, layers, b, c) for d, b, c in zip(devs, bs, cs))
    up = tuple(activation_upload_latency(d, layers, b, c) for d, b, c in zip(devs, bs, cs))
    down = tuple(grad_download_latency(d, layers, b, c) for d, b, c in zip(devs, bs, cs))
    bp = tuple(client_bp_latency(d, layers, b, c) for d, b, c in zip(devs, bs, cs))
    server_fp, server_bp = server_fp_bp_latency(scenario, decision)

    sub_up = tuple(layers.submodel_bits[c - 1] / d.fed_up_rate for d, c in zip(devs, cs))
    sub_down = tuple(layers.submodel_bits[c - 1] / d.fed_down_rate for d, c in zip(devs, cs))
    noncommon = server_noncommon_bits(scenario, decision)
    server_sub_up = noncommon / scenario.server.fed_up_rate
    server_sub_down = noncommon / scenario.server.fed_down_rate

    split_total = (max(f + u for f, u in zip(fp, up))
                   + server_fp + server_bp
                   + max(d + b for d, b in zip(down, bp)))
    agg_total = (max(max(sub_up), server_sub_up)
                 + max(max(sub_down), server_sub_down))

    return LatencyBreakdown(
        client_fp=fp, act_up=up, grad_down=down, client_bp=bp,
        sub_up=sub_up, sub_down=sub_down,
        server_fp=server_fp, server_bp=server_bp,
        server_sub_up=server_sub_up, server_sub_down=server_sub_down,
        split_total=split_total, agg_total=agg_total,
    )


def total_time(scenario: Scenario, decision: Decision, rounds: int) -> float:
    """Total wall time for ``rounds`` rounds: R*T_split + floor(R/I)*T_agg."""
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    lb = round_latency(scenario, decision)
    return rounds * lb.split_total + (rounds // scenario.agg_interval) * lb.agg_total
