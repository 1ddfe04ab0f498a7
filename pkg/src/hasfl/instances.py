"""Seeded instance builders for oracle checks and small experiments."""

from __future__ import annotations

import math

import numpy as np

from .profiles import DeviceProfile, LayerProfile, Scenario, ServerProfile


def random_layer_profile(seed: int, n_layers: int) -> LayerProfile:
    """Random desk-scale layer profile with valid cumulative structure."""
    rng = np.random.default_rng([seed, 0xA11])
    fp = rng.uniform(1e8, 4e8, n_layers)
    act = rng.uniform(1e6, 9e6, n_layers)
    agrad = act * rng.uniform(0.8, 1.2, n_layers)
    sub = np.cumsum(rng.uniform(0.5e6, 5e6, n_layers))
    return LayerProfile(
        fp_flops_cum=tuple(np.cumsum(fp).tolist()),
        bp_flops_cum=tuple(np.cumsum(2.0 * fp).tolist()),
        act_bits=tuple(act.tolist()),
        actgrad_bits=tuple(agrad.tolist()),
        submodel_bits=tuple(sub.tolist()),
        opt_state_bits_cum=tuple(sub.tolist()),
        grad_var=tuple(rng.uniform(0.1, 1.0, n_layers).tolist()),
        grad_sqmoment=tuple(rng.uniform(0.1, 1.0, n_layers).tolist()),
    )


def small_scenario(seed: int, n_devices: int = 2, n_layers: int = 4,
                   b_cap: int = 16) -> Scenario:
    """Small randomized scenario whose memory limits cap batches near b_cap.

    The accuracy target is drawn so the shallowest cut is always feasible
    while deeper cuts are only sometimes feasible, which exercises the
    margin-driven pruning paths.
    """
    rng = np.random.default_rng([seed, 0xBEE])
    layers = random_layer_profile(seed, n_layers)
    stored1 = layers.act_bits[0] + layers.actgrad_bits[0]  # per-sample bits at cut 1

    # heterogeneity mirrors the reference operating regime: compute spread 2x,
    # link-rate spread a few percent, server an order of magnitude faster
    devices = tuple(
        DeviceProfile(
            compute=float(rng.uniform(1e9, 2e9)),
            up_rate=float(rng.uniform(7.5e6, 8e6)),
            down_rate=float(rng.uniform(3.6e7, 3.8e7)),
            fed_up_rate=float(rng.uniform(7.5e6, 8e6)),
            fed_down_rate=float(rng.uniform(3.6e7, 3.8e7)),
            memory_bits=float((b_cap + rng.uniform(0.1, 0.9)) * stored1
                              + layers.opt_state_bits_cum[0] + layers.submodel_bits[0]),
        )
        for _ in range(n_devices)
    )
    server = ServerProfile(
        compute=2e10,
        fed_up_rate=float(rng.uniform(3.6e7, 3.8e7)),
        fed_down_rate=float(rng.uniform(3.6e7, 3.8e7)),
    )

    smoothness = float(rng.uniform(5.0, 20.0))
    lr = float(rng.uniform(1e-4, 1e-3))
    agg_interval = int(rng.choice([1, 2, 5, 15]))
    dc = 0.0 if agg_interval <= 1 else 4.0 * smoothness**2 * lr**2 * agg_interval**2
    gsq = np.cumsum(layers.grad_sqmoment)
    var1 = smoothness * lr * math.fsum(layers.grad_var) / n_devices  # all batches = 1
    eps = (var1 * float(rng.uniform(1.1, 2.0))
           + dc * gsq[0] * 1.2
           + dc * (gsq[-1] - gsq[0]) * float(rng.uniform(0.2, 1.5)))
    eps = max(eps, 1e-6)

    return Scenario(
        layers=layers, devices=devices, server=server,
        lr=lr, agg_interval=agg_interval, target_eps=eps,
        smoothness=smoothness, loss_gap=float(rng.uniform(1.0, 20.0)),
    )
