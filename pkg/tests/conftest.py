import pytest

from hasfl.latency import Decision
from hasfl.profiles import DeviceProfile, LayerProfile, Scenario, ServerProfile


@pytest.fixture
def desk_scenario():
    """Two-device scenario with round numbers; every latency below was worked
    out by hand once and is pinned in the golden tests."""
    layers = LayerProfile(
        fp_flops_cum=(1e8, 2e8, 3e8, 4e8),
        bp_flops_cum=(2e8, 4e8, 6e8, 8e8),
        act_bits=(8e6, 4e6, 2e6, 1e6),
        actgrad_bits=(8e6, 4e6, 2e6, 1e6),
        submodel_bits=(1e6, 3e6, 6e6, 1e7),
        opt_state_bits_cum=(1e6, 3e6, 6e6, 1e7),
        grad_var=(1.0, 1.0, 1.0, 1.0),
        grad_sqmoment=(2.0, 2.0, 2.0, 2.0),
    )
    devices = (
        DeviceProfile(compute=1e9, up_rate=8e6, down_rate=4e7,
                      fed_up_rate=8e6, fed_down_rate=4e7, memory_bits=1e9),
        DeviceProfile(compute=2e9, up_rate=1e7, down_rate=5e7,
                      fed_up_rate=1e7, fed_down_rate=5e7, memory_bits=1e9),
    )
    server = ServerProfile(compute=2e10, fed_up_rate=1e8, fed_down_rate=1e8)
    return Scenario(layers=layers, devices=devices, server=server,
                    lr=1e-3, agg_interval=2, target_eps=0.05,
                    smoothness=10.0, loss_gap=1.0)


@pytest.fixture
def desk_decision():
    return Decision(batches=(4, 8), cuts=(2, 3))
