"""Data-enabled predictive control for inter-area oscillation damping.

Submodules: ``plant`` (LTI engine and swing-network surrogate), ``datamat``
(Hankel/Page data matrices), ``qp`` (dense convex QP solver), ``predictive``
(DeePC and PEM-MPC), ``robust`` (Min-Max DeePC with disturbance feedback),
``harness`` (closed-loop experiments) and ``cli``.
"""

from .datamat import DataBlocks, Trajectory, hankel, page, partition
from .harness import Scenario, Subsystem, closed_loop_cost, monte_carlo, run_closed_loop, run_decentralized
from .plant import StateSpaceModel, SwingNetworkSpec, build_swing_surrogate, default_four_machine_spec, simulate
from .predictive import DeePCConfig, DeePCController, IniBuffer, PemMpcController, deepc_solve
from .qp import QpSolver, QuadraticProgram, solve_qp
from .robust import DisturbanceBox, MinMaxConfig, df_minmax_solve, interpolate_disturbance, minmax_step

__version__ = "0.1.0"

__all__ = [
    "DataBlocks", "Trajectory", "hankel", "page", "partition",
    "Scenario", "Subsystem", "closed_loop_cost", "monte_carlo", "run_closed_loop", "run_decentralized",
    "StateSpaceModel", "SwingNetworkSpec", "build_swing_surrogate", "default_four_machine_spec", "simulate",
    "DeePCConfig", "DeePCController", "IniBuffer", "PemMpcController", "deepc_solve",
    "QpSolver", "QuadraticProgram", "solve_qp",
    "DisturbanceBox", "MinMaxConfig", "df_minmax_solve", "interpolate_disturbance", "minmax_step",
]
