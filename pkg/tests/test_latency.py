import dataclasses

import numpy as np
import pytest

from hasfl.latency import (Decision, activation_upload_latency, aggregation_latencies,
                           client_bp_latency, client_fp_latency, grad_download_latency,
                           round_latency, server_fp_bp_latency, server_noncommon_bits,
                           total_time)
from hasfl.profiles import DeviceProfile, LayerProfile, Scenario, ServerProfile


def _device(compute=1e9, up=8e6, down=4e7):
    return DeviceProfile(compute=compute, up_rate=up, down_rate=down,
                         fed_up_rate=up, fed_down_rate=down, memory_bits=1e9)


def _layers(**overrides):
    base = dict(
        fp_flops_cum=(1e8, 2e8, 3e8, 4e8),
        bp_flops_cum=(2e8, 4e8, 6e8, 8e8),
        act_bits=(8e6, 4e6, 2e6, 1e6),
        actgrad_bits=(8e6, 4e6, 2e6, 1e6),
        submodel_bits=(1e6, 3e6, 6e6, 1e7),
        opt_state_bits_cum=(1e6, 3e6, 6e6, 1e7),
        grad_var=(1.0,) * 4,
        grad_sqmoment=(2.0,) * 4,
    )
    base.update(overrides)
    return LayerProfile(**base)


# ---- per-stage formulas ----

def test_client_fp_ratio_identity():
    dev = _device(compute=2e8)
    layers = _layers()  # fp_flops_cum[1] = 2e8 == compute
    assert client_fp_latency(dev, layers, 1, 2) == 1.0


def test_client_fp_hand_value():
    # 4 samples * 2e8 FLOPs / 1e9 FLOPS = 0.8 s
    assert client_fp_latency(_device(), _layers(), 4, 2) == pytest.approx(0.8, rel=1e-15)


def test_activation_upload_hand_value():
    # 16 * 8e6 bits / 8e7 bps = 1.6 s
    dev = _device(up=8e7)
    assert activation_upload_latency(dev, _layers(), 16, 1) == pytest.approx(1.6, rel=1e-15)


def test_activation_upload_linear_in_batch():
    dev = _device()
    a = activation_upload_latency(dev, _layers(), 3, 2)
    b = activation_upload_latency(dev, _layers(), 6, 2)
    assert b == pytest.approx(2 * a, rel=1e-15)


def test_grad_download_identity_and_zero_traffic():
    dev = _device(down=4e6)
    layers = _layers(actgrad_bits=(4e6, 4e6, 0.0, 1e6))
    assert grad_download_latency(dev, layers, 1, 1) == 1.0
    assert grad_download_latency(dev, layers, 5, 3) == 0.0


def test_client_bp_hand_value():
    # 4 * 4e8 / 1e9 = 1.6 s
    assert client_bp_latency(_device(), _layers(), 4, 2) == pytest.approx(1.6, rel=1e-15)


def _two_dev_scenario(layers=None, f_s=2e10):
    layers = layers or _layers()
    return Scenario(
        layers=layers,
        devices=(_device(), _device(compute=2e9, up=1e7, down=5e7)),
        server=ServerProfile(compute=f_s, fed_up_rate=1e8, fed_down_rate=1e8),
        lr=1e-3, agg_interval=2, target_eps=0.05, smoothness=10.0, loss_gap=1.0)


def test_server_fp_hand_value():
    sc = _two_dev_scenario()
    t_fp, _ = server_fp_bp_latency(sc, Decision(batches=(4, 4), cuts=(2, 3)))
    # (4*(4e8-2e8) + 4*(4e8-3e8)) / 2e10 = 0.06 s
    assert t_fp == pytest.approx(0.06, rel=1e-15)


def test_server_latency_zero_when_cut_at_last_layer():
    sc = _two_dev_scenario()
    assert server_fp_bp_latency(sc, Decision(batches=(9, 3), cuts=(4, 4))) == (0.0, 0.0)


def test_server_latency_inverse_in_compute():
    sc1 = _two_dev_scenario(f_s=1e10)
    sc2 = _two_dev_scenario(f_s=2e10)
    d = Decision(batches=(4, 4), cuts=(1, 2))
    fp1, bp1 = server_fp_bp_latency(sc1, d)
    fp2, bp2 = server_fp_bp_latency(sc2, d)
    assert fp1 == pytest.approx(2 * fp2, rel=1e-15)
    assert bp1 == pytest.approx(2 * bp2, rel=1e-15)


def test_noncommon_bits_hand_value():
    sc = _two_dev_scenario()
    # submodel sizes at cuts (1, 2): 1e6 and 3e6 -> 2*3e6 - 4e6 = 2e6
    assert server_noncommon_bits(sc, Decision(batches=(1, 1), cuts=(1, 2))) == 2e6


def test_noncommon_bits_zero_for_equal_cuts():
    sc = _two_dev_scenario()
    assert server_noncommon_bits(sc, Decision(batches=(5, 2), cuts=(3, 3))) == 0.0


def test_noncommon_bits_zero_for_single_device():
    layers = _layers()
    sc = Scenario(layers=layers, devices=(_device(),),
                  server=ServerProfile(compute=2e10, fed_up_rate=1e8, fed_down_rate=1e8),
                  lr=1e-3, agg_interval=2, target_eps=0.05, smoothness=10.0, loss_gap=1.0)
    assert server_noncommon_bits(sc, Decision(batches=(3,), cuts=(2,))) == 0.0
    up, down = aggregation_latencies(sc, Decision(batches=(3,), cuts=(2,)))
    assert up == 3e6 / 8e6 and down == 3e6 / 4e7


# ---- golden two-device round, all values hand-computed once ----

GOLDEN = {
    "client_fp": (0.8, 1.2),
    "act_up": (2.0, 1.6),
    "grad_down": (0.4, 0.32),
    "client_bp": (1.6, 2.4),
    "sub_up": (0.375, 0.6),
    "sub_down": (0.075, 0.12),
    "server_fp": 0.08,
    "server_bp": 0.16,
    "server_sub_up": 0.03,
    "server_sub_down": 0.03,
    "split_total": 5.76,
    "agg_total": 0.72,
}


def test_round_latency_golden(desk_scenario, desk_decision):
    lb = round_latency(desk_scenario, desk_decision)
    for name, expected in GOLDEN.items():
        got = getattr(lb, name)
        assert got == pytest.approx(expected, rel=1e-12), name


def test_total_time_golden(desk_scenario, desk_decision):
    # 30 rounds, interval 2: 30*5.76 + 15*0.72 = 183.6
    assert total_time(desk_scenario, desk_decision, 30) == pytest.approx(183.6, rel=1e-12)


def test_round_latency_recomposition(desk_scenario, desk_decision):
    lb = round_latency(desk_scenario, desk_decision)
    split = (max(f + u for f, u in zip(lb.client_fp, lb.act_up))
             + lb.server_fp + lb.server_bp
             + max(d + b for d, b in zip(lb.grad_down, lb.client_bp)))
    agg = (max(max(lb.sub_up), lb.server_sub_up)
           + max(max(lb.sub_down), lb.server_sub_down))
    assert lb.split_total == split
    assert lb.agg_total == agg


def test_identical_devices_max_equals_single(desk_scenario):
    sc = dataclasses.replace(desk_scenario, devices=(_device(), _device()))
    d = Decision(batches=(5, 5), cuts=(2, 2))
    lb = round_latency(sc, d)
    assert lb.split_total == pytest.approx(
        lb.client_fp[0] + lb.act_up[0] + lb.server_fp + lb.server_bp
        + lb.grad_down[0] + lb.client_bp[0], rel=1e-15)


def test_fast_device_leaves_the_maxes(desk_scenario, desk_decision):
    fast = DeviceProfile(compute=1e30, up_rate=1e30, down_rate=1e30,
                         fed_up_rate=1e30, fed_down_rate=1e30, memory_bits=1e9)
    sc = dataclasses.replace(desk_scenario, devices=(desk_scenario.devices[0], fast))
    lb = round_latency(sc, desk_decision)
    assert lb.split_total == pytest.approx(
        lb.client_fp[0] + lb.act_up[0] + lb.server_fp + lb.server_bp
        + lb.grad_down[0] + lb.client_bp[0], rel=1e-12)


# ---- totals and properties ----

def test_total_time_floor_arithmetic(desk_scenario, desk_decision):
    lb = round_latency(desk_scenario, desk_decision)
    sc15 = dataclasses.replace(desk_scenario, agg_interval=15)
    assert total_time(sc15, desk_decision, 30) == pytest.approx(
        30 * lb.split_total + 2 * lb.agg_total, rel=1e-15)
    assert total_time(sc15, desk_decision, 14) == pytest.approx(
        14 * lb.split_total, rel=1e-15)
    assert total_time(sc15, desk_decision, 1000) == pytest.approx(
        1000 * lb.split_total + 66 * lb.agg_total, rel=1e-15)


def test_total_time_rejects_nonpositive_rounds(desk_scenario, desk_decision):
    with pytest.raises(ValueError):
        total_time(desk_scenario, desk_decision, 0)


def test_latencies_nonnegative_and_monotone_in_batch(desk_scenario):
    rng = np.random.default_rng(0)
    for _ in range(25):
        b = tuple(int(x) for x in rng.integers(1, 20, 2))
        c = tuple(int(x) for x in rng.integers(1, 5, 2))
        lb = round_latency(desk_scenario, Decision(batches=b, cuts=c))
        vals = (list(lb.client_fp) + list(lb.act_up) + list(lb.grad_down)
                + list(lb.client_bp) + list(lb.sub_up) + list(lb.sub_down)
                + [lb.server_fp, lb.server_bp, lb.server_sub_up,
                   lb.server_sub_down, lb.split_total, lb.agg_total])
        assert all(np.isfinite(vals)) and all(v >= 0 for v in vals)
        # bump one device's batch: split total must not decrease
        i = int(rng.integers(0, 2))
        b2 = tuple(x + (3 if k == i else 0) for k, x in enumerate(b))
        lb2 = round_latency(desk_scenario, Decision(batches=b2, cuts=c))
        assert lb2.split_total >= lb.split_total - 1e-15


def test_compute_and_rate_scaling(desk_scenario, desk_decision):
    k = 4.0
    fast_devs = tuple(dataclasses.replace(d, compute=k * d.compute)
                      for d in desk_scenario.devices)
    fast_server = dataclasses.replace(desk_scenario.server,
                                      compute=k * desk_scenario.server.compute)
    sc = dataclasses.replace(desk_scenario, devices=fast_devs, server=fast_server)
    base = round_latency(desk_scenario, desk_decision)
    fast = round_latency(sc, desk_decision)
    for i in range(2):
        assert fast.client_fp[i] == pytest.approx(base.client_fp[i] / k, rel=1e-12)
        assert fast.client_bp[i] == pytest.approx(base.client_bp[i] / k, rel=1e-12)
    assert fast.server_fp == pytest.approx(base.server_fp / k, rel=1e-12)

    quick_devs = tuple(dataclasses.replace(
        d, up_rate=k * d.up_rate, down_rate=k * d.down_rate,
        fed_up_rate=k * d.fed_up_rate, fed_down_rate=k * d.fed_down_rate)
        for d in desk_scenario.devices)
    quick_server = dataclasses.replace(
        desk_scenario.server, fed_up_rate=k * desk_scenario.server.fed_up_rate,
        fed_down_rate=k * desk_scenario.server.fed_down_rate)
    sc2 = dataclasses.replace(desk_scenario, devices=quick_devs, server=quick_server)
    quick = round_latency(sc2, desk_decision)
    for i in range(2):
        assert quick.act_up[i] == pytest.approx(base.act_up[i] / k, rel=1e-12)
        assert quick.grad_down[i] == pytest.approx(base.grad_down[i] / k, rel=1e-12)
    assert quick.agg_total == pytest.approx(base.agg_total / k, rel=1e-12)


def test_decision_validation(desk_scenario):
    with pytest.raises(ValueError):
        Decision(batches=(0, 1), cuts=(1, 1))
    with pytest.raises(ValueError):
        Decision(batches=(1, 1), cuts=(1,))
    with pytest.raises(ValueError):
        Decision(batches=(1, 1), cuts=(1, 5)).validate_against(desk_scenario)
    with pytest.raises(ValueError):
        Decision(batches=(1, 1, 1), cuts=(1, 1, 1)).validate_against(desk_scenario)
