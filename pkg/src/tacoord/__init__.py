"""Total-action based coordination of IBR damping controllers.

Simulate a multi-machine grid under faults, collect training data over
operating conditions, disturbances, and switching combinations, fit a
total-action approximator, and select the on/off combination of damping
controllers that minimizes it -- with model-based coordination and fixed
policies as baselines.
"""

from .approximator import (MlpConfig, MlpModel, cross_validate, forward,
                           load_model, predict_batch, save_model, train)
from .coordinator import (CoordinationResult, PolicyReport, Scenario,
                          delay_sweep, dic_select, evaluate_policies, mape,
                          spearman)
from .damping import DcConfig, DcState, compose_reference, dc_derivatives, dc_output
from .dataset import (Dataset, Disturbance, OperatingCondition, Sample,
                      ScenarioGrid, Standardizer, Timing, apply_condition,
                      collect, fit_standardizer, make_folds)
from .dynamics import (EventSchedule, Trajectory, derivatives, prepare,
                       simulate, snapshot_features)
from .errors import (CaseError, LinearTaError, NetworkSolveError,
                     PowerFlowError, SimulationUnstableError, TacoordError,
                     TrainingDivergedError)
from .mbc import (EigenDecomp, LinearModel, eigen_ta, linearize, mbc_switching,
                  solve_lyapunov, tas)
from .metrics import (EnergySeries, TotalActionResult, action, coi_speed,
                      oscillation_energy, total_action)
from .netmodel import (Bus, Generator, Ibr, Line, Load, NetworkStage,
                       PowerFlowSolution, ReducedNetwork, SystemCase,
                       build_ybus, line_flows, load_builtin_case, load_case,
                       reduce_network, save_case, solve_power_flow)

__version__ = "0.1.0"
