"""Cooperative multi-agent Q-value factorization testbed.

Four methods (additive, monotone-mixed, and two transformation-based
variants), three desk-scale environments, and brute-force checkers for the
factorization conditions the methods are meant to satisfy.
"""

from .agents import (
    ALGOS,
    Assembly,
    Dims,
    NetConfig,
    assembly_for_env,
    build_assembly,
    vdn_joint_value,
)
from .envs import (
    GaussianSqueeze,
    MatrixGame,
    PayoffTable,
    PredatorPrey,
    gs_multi_domain,
    gs_single_domain,
    penalty_game,
    random_payoff,
    two_peak_game,
    two_peak_reward,
)
from .training import (
    Batch,
    LossBreakdown,
    MetricRow,
    ReplayBuffer,
    TrainConfig,
    epsilon_at,
    evaluate,
    loss_qmix,
    loss_qtran_alt,
    loss_qtran_base,
    loss_vdn,
    td_targets,
    train,
)
from .verifier import (
    ConditionReport,
    TabularQ,
    affine_argmax_invariant,
    check_factorization,
    check_igm,
    check_min_consistency,
    oracle_optimal,
    rebalance_factors,
    tabulate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
