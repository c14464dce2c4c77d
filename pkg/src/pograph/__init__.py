"""Simulate optimization algorithms on oracle graphs and measure their suboptimality."""
from .algorithms import (AMBSGD, SVRG, DelayedSGD, ParallelSGD, SequentialSGD, SmoothedAMBSGD,
                         WaitAndCollect, program_from_spec)
from .errors import (BudgetError, ConfigError, ConvergenceFailure, DomainViolation, InvalidArgument,
                     InvalidParameter, InvalidQuery, PographError, SchedulingError, UnsupportedInstance,
                     UnsupportedOracle, VisibilityViolation)
from .executor import NodeProgram, Query, RunTrace, check_compliance, execute, measure_progress
from .graphs import (OracleGraph, build_custom, build_delay, build_intermittent, build_layer, build_path,
                     graph_from_spec)
from .harness import ExperimentConfig, RateSeries, regime_table, run, sweep
from .instances import (LipschitzSmoothClass, chain_instance, coinflip_instance, instance_from_spec,
                        moreau_instance, quadratic_chain_instance, true_suboptimality)
from .prox import moreau_grad, project_simplex, prox_max_affine, prox_smooth_numeric

__version__ = "0.1.0"
