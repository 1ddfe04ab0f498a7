"""Heterogeneity-aware split federated learning lab.

Latency modeling, convergence-bound evaluation, joint batch-size/split-point
optimization, and a desk-scale protocol simulator.
"""

from .convergence import (AuxiliaryCaps, BoundInputs, InfeasibleError,
                          convergence_time, convergence_time_capped,
                          drift_bound, grad_norm_bound, rounds_to_target)
from .latency import Decision, LatencyBreakdown, round_latency, total_time
from .optimizer import (BatchSizeProblem, bcd_optimize, brute_force_joint,
                        enumerate_split, newton_jacobi, parametric_split_min,
                        solve_batch_sizes, solve_split)
from .profiles import (DeviceProfile, LayerProfile, SamplingRanges, Scenario,
                       ScenarioFormatError, ServerProfile, cumulative_stats,
                       default_layer_profile, generate_scenario, load_scenario,
                       save_scenario)
from .simulation import (DataPartition, DivergenceError, PlateauRule, RunReport,
                         TrainState, aggregate_clients, centralized_reference,
                         estimate_constants, partition_data, run_round, train)

__version__ = "0.1.0"
