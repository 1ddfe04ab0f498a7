"""Model-layer, device, and server profiles plus scenario I/O and generation.

All profile quantities are per data sample unless stated otherwise. Units:
FLOPs / FLOPS for compute, bits / bits-per-second for traffic, seconds for
time. Layer indices are 1-based in the docs and 0-based in the stored tuples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


class ScenarioFormatError(ValueError):
    """Scenario file could not be parsed into the documented schema."""


def _as_floats(name, values):
    try:
        out = tuple(float(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"{name} must be a list of numbers") from exc
    return out


def _check_nonneg(name, values):
    for j, v in enumerate(values):
        if v < 0:
            raise ValueError(f"{name}[{j}] must be non-negative, got {v}")


def _check_nondecreasing(name, values):
    for j in range(1, len(values)):
        if values[j] < values[j - 1]:
            raise ValueError(
                f"{name} must be non-decreasing (cumulative), "
                f"but {name}[{j}]={values[j]} < {name}[{j - 1}]={values[j - 1]}"
            )


@dataclass(frozen=True)
class LayerProfile:
    """Per-layer compute/traffic/statistics constants of the global model.

    ``fp_flops_cum[j]`` / ``bp_flops_cum[j]`` are the forward/backward FLOPs
    per sample through layers 1..j+1 (cumulative). ``act_bits[j]`` /
    ``actgrad_bits[j]`` are the activation / activation-gradient sizes at cut
    layer j+1. ``submodel_bits[j]`` is the client-side sub-model size when cut
    at layer j+1, and ``opt_state_bits_cum[j]`` the cumulative optimizer-state
    size for layers 1..j+1. ``grad_var`` / ``grad_sqmoment`` are the per-layer
    gradient variance and second-moment constants.
    """

    fp_flops_cum: tuple
    bp_flops_cum: tuple
    act_bits: tuple
    actgrad_bits: tuple
    submodel_bits: tuple
    opt_state_bits_cum: tuple
    grad_var: tuple
    grad_sqmoment: tuple

    def __post_init__(self):
        fields = {
            "fp_flops_cum": self.fp_flops_cum,
            "bp_flops_cum": self.bp_flops_cum,
            "act_bits": self.act_bits,
            "actgrad_bits": self.actgrad_bits,
            "submodel_bits": self.submodel_bits,
            "opt_state_bits_cum": self.opt_state_bits_cum,
            "grad_var": self.grad_var,
            "grad_sqmoment": self.grad_sqmoment,
        }
        for name, values in fields.items():
            object.__setattr__(self, name, _as_floats(name, values))
        n = len(self.fp_flops_cum)
        if n < 1:
            raise ValueError("LayerProfile needs at least one layer")
        for name, values in fields.items():
            values = getattr(self, name)
            if len(values) != n:
                raise ValueError(f"{name} has length {len(values)}, expected {n}")
            _check_nonneg(name, values)
        for name in ("fp_flops_cum", "bp_flops_cum", "submodel_bits", "opt_state_bits_cum"):
            _check_nondecreasing(name, getattr(self, name))
        if self.fp_flops_cum[-1] <= 0:
            raise ValueError("fp_flops_cum[L-1] must be strictly positive")
        if self.bp_flops_cum[-1] <= 0:
            raise ValueError("bp_flops_cum[L-1] must be strictly positive")

    @property
    def num_layers(self):
        return len(self.fp_flops_cum)


@dataclass(frozen=True)
class CumulativeStats:
    """Prefix sums over layers: second moments and stored smashed-data sizes."""

    gsq_cum: tuple
    act_bits_cum: tuple
    actgrad_bits_cum: tuple


def cumulative_stats(layers: LayerProfile) -> CumulativeStats:
    """Prefix sums of grad_sqmoment, act_bits and actgrad_bits over layers 1..j."""
    return CumulativeStats(
        gsq_cum=tuple(np.cumsum(layers.grad_sqmoment).tolist()),
        act_bits_cum=tuple(np.cumsum(layers.act_bits).tolist()),
        actgrad_bits_cum=tuple(np.cumsum(layers.actgrad_bits).tolist()),
    )


def _check_positive(obj, name, value):
    if not value > 0:
        raise ValueError(f"{obj}.{name} must be strictly positive, got {value}")


@dataclass(frozen=True)
class DeviceProfile:
    """One edge device: compute speed, link rates, and training-state memory."""

    compute: float          # FLOPS
    up_rate: float          # bits/s, device -> edge server
    down_rate: float        # bits/s, edge server -> device
    fed_up_rate: float      # bits/s, device -> fed server
    fed_down_rate: float    # bits/s, fed server -> device
    memory_bits: float      # bits available for client-side training state

    def __post_init__(self):
        for name in ("compute", "up_rate", "down_rate", "fed_up_rate",
                     "fed_down_rate", "memory_bits"):
            _check_positive("device", name, getattr(self, name))


@dataclass(frozen=True)
class ServerProfile:
    """Edge server: compute speed and its links to the fed server."""

    compute: float        # FLOPS
    fed_up_rate: float    # bits/s, edge server -> fed server
    fed_down_rate: float  # bits/s, fed server -> edge server

    def __post_init__(self):
        for name in ("compute", "fed_up_rate", "fed_down_rate"):
            _check_positive("server", name, getattr(self, name))


@dataclass(frozen=True)
class Scenario:
    """A full experiment instance: model profile, fleet, and hyperparameters."""

    layers: LayerProfile
    devices: tuple
    server: ServerProfile
    lr: float             # SGD step size
    agg_interval: int     # rounds between client-side aggregations
    target_eps: float     # target average squared gradient norm
    smoothness: float     # Lipschitz constant of the loss gradients
    loss_gap: float       # initial loss minus optimal loss

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if len(self.devices) < 1:
            raise ValueError("scenario.devices must contain at least one device")
        for i, dev in enumerate(self.devices):
            if not isinstance(dev, DeviceProfile):
                raise ValueError(f"scenario.devices[{i}] is not a DeviceProfile")
        _check_positive("scenario", "lr", self.lr)
        _check_positive("scenario", "smoothness", self.smoothness)
        if self.lr > 1.0 / self.smoothness:
            raise ValueError(
                f"scenario.lr={self.lr} violates lr <= 1/smoothness "
                f"(= {1.0 / self.smoothness}) required by the convergence bound"
            )
        if int(self.agg_interval) != self.agg_interval or self.agg_interval < 1:
            raise ValueError(f"scenario.agg_interval must be an integer >= 1, got {self.agg_interval}")
        object.__setattr__(self, "agg_interval", int(self.agg_interval))
        _check_positive("scenario", "target_eps", self.target_eps)
        if self.loss_gap < 0:
            raise ValueError(f"scenario.loss_gap must be non-negative, got {self.loss_gap}")

    @property
    def n_devices(self):
        return len(self.devices)


# ---------------------------------------------------------------------------
# Scenario file I/O (JSON; schema documented in README)
# ---------------------------------------------------------------------------

def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "layers": {k: list(v) for k, v in asdict(scenario.layers).items()},
        "devices": [asdict(d) for d in scenario.devices],
        "server": asdict(scenario.server),
        "lr": scenario.lr,
        "agg_interval": scenario.agg_interval,
        "target_eps": scenario.target_eps,
        "smoothness": scenario.smoothness,
        "loss_gap": scenario.loss_gap,
    }


def scenario_from_dict(doc: dict, base_dir=None) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioFormatError("scenario document must be a mapping")
    try:
        layers_doc = doc["layers"]
        if isinstance(layers_doc, str):
            ref = Path(layers_doc)
            if base_dir is not None and not ref.is_absolute():
                ref = Path(base_dir) / ref
            try:
                layers_doc = json.loads(ref.read_text())
            except FileNotFoundError as exc:
                raise ScenarioFormatError(
                    f"referenced layer profile not found: {ref}") from exc
            except json.JSONDecodeError as exc:
                raise ScenarioFormatError(
                    f"referenced layer profile {ref} is not valid JSON") from exc
        layers = LayerProfile(**layers_doc)
        devices = tuple(DeviceProfile(**d) for d in doc["devices"])
        server = ServerProfile(**doc["server"])
        return Scenario(
            layers=layers,
            devices=devices,
            server=server,
            lr=float(doc["lr"]),
            agg_interval=doc["agg_interval"],
            target_eps=float(doc["target_eps"]),
            smoothness=float(doc["smoothness"]),
            loss_gap=float(doc["loss_gap"]),
        )
    except KeyError as exc:
        raise ScenarioFormatError(f"scenario document missing key {exc}") from exc
    except TypeError as exc:
        raise ScenarioFormatError(f"scenario document malformed: {exc}") from exc


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n")


def load_scenario(path) -> Scenario:
    """Load and validate a scenario file. Raises ScenarioFormatError on parse
    failures and ValueError naming the offending field on invariant violations.

    The ``layers`` entry may inline the profile or name a JSON file holding it
    (relative paths resolve against the scenario file's directory)."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"{path}: not valid JSON ({exc})") from exc
    return scenario_from_dict(doc, base_dir=Path(path).parent)


# ---------------------------------------------------------------------------
# Random scenario generation
# ---------------------------------------------------------------------------

def default_layer_profile() -> LayerProfile:
    """Desk-scale 5-layer profile with CNN-like early-layer activation bulk."""
    fp = [3e8, 2e8, 2e8, 1.5e8, 0.5e8]
    act = [8e6, 4e6, 2e6, 1e6, 5e5]
    sub = [0.5e6, 1.5e6, 4e6, 1e7, 2.4e7]
    return LayerProfile(
        fp_flops_cum=tuple(np.cumsum(fp).tolist()),
        bp_flops_cum=tuple((2 * np.cumsum(fp)).tolist()),
        act_bits=tuple(act),
        actgrad_bits=tuple(act),
        submodel_bits=tuple(sub),
        opt_state_bits_cum=tuple(sub),  # momentum state mirrors the parameters
        grad_var=(40.0, 40.0, 40.0, 40.0, 40.0),
        grad_sqmoment=(0.8, 0.6, 0.5, 0.4, 0.2),
    )


@dataclass(frozen=True)
class SamplingRanges:
    """Uniform sampling ranges for generated scenarios.

    Defaults: edge-server compute 20 TFLOPS, device compute in [1, 2] TFLOPS,
    uplinks in [75, 80] Mbps, downlinks and inter-server rates in
    [360, 380] Mbps, lr 5e-4, aggregation interval 15. Device memory and the
    convergence hyperparameters have no standard values and default to
    desk-scale choices that keep generated instances feasible.
    """

    device_compute: tuple = (1e12, 2e12)
    up_rate: tuple = (75e6, 80e6)
    down_rate: tuple = (360e6, 380e6)
    fed_up_rate: tuple = (75e6, 80e6)
    fed_down_rate: tuple = (360e6, 380e6)
    inter_up_rate: tuple = (360e6, 380e6)
    inter_down_rate: tuple = (360e6, 380e6)
    memory_bits: tuple = (5e8, 1e9)
    server_compute: float = 20e12
    lr: float = 5e-4
    agg_interval: int = 15
    target_eps: float = 0.1
    smoothness: float = 10.0
    loss_gap: float = 50.0
    layers: LayerProfile = field(default_factory=default_layer_profile)

    def __post_init__(self):
        for name in ("device_compute", "up_rate", "down_rate", "fed_up_rate",
                     "fed_down_rate", "inter_up_rate", "inter_down_rate", "memory_bits"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"ranges.{name} must satisfy 0 < low <= high, got ({lo}, {hi})")


def generate_scenario(seed: int, n_devices: int = 20,
                      ranges: SamplingRanges | None = None) -> Scenario:
    """Sample a scenario deterministically from (seed, n_devices, ranges)."""
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    ranges = ranges or SamplingRanges()
    rng = np.random.default_rng(seed)

    def draw(bounds):
        lo, hi = bounds
        return float(rng.uniform(lo, hi))

    devices = tuple(
        DeviceProfile(
            compute=draw(ranges.device_compute),
            up_rate=draw(ranges.up_rate),
            down_rate=draw(ranges.down_rate),
            fed_up_rate=draw(ranges.fed_up_rate),
            fed_down_rate=draw(ranges.fed_down_rate),
            memory_bits=draw(ranges.memory_bits),
        )
        for _ in range(n_devices)
    )
    server = ServerProfile(
        compute=ranges.server_compute,
        fed_up_rate=draw(ranges.inter_up_rate),
        fed_down_rate=draw(ranges.inter_down_rate),
    )
    return Scenario(
        layers=ranges.layers,
        devices=devices,
        server=server,
        lr=ranges.lr,
        agg_interval=ranges.agg_interval,
        target_eps=ranges.target_eps,
        smoothness=ranges.smoothness,
        loss_gap=ranges.loss_gap,
    )
