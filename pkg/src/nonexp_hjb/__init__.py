"""HJB collocation under exponential and hyperbolic discounting, with discount inference."""
from .discount import DiscountModel, Verdict, check_well_defined, gamma_mixture_survival
from .hjb import NetSolution, SolverConfig, hjb_residual, policy, q_values, train
from .irl import SwitchDatum, grid_scan, switch_objective, total_gradient, train_sensitivity
from .oracle import GridSpec, backward_induction, compare, fd_theta_gradient
from .sim import extract_switches, generate_irl_dataset, rollout, rollout_batch
from .tasks import TaskModel, get_task, investment_task, line_task
from .valuenet import ValueNet

__all__ = [
    "DiscountModel", "Verdict", "check_well_defined", "gamma_mixture_survival",
    "NetSolution", "SolverConfig", "hjb_residual", "policy", "q_values", "train",
    "SwitchDatum", "grid_scan", "switch_objective", "total_gradient", "train_sensitivity",
    "GridSpec", "backward_induction", "compare", "fd_theta_gradient",
    "extract_switches", "generate_irl_dataset", "rollout", "rollout_batch",
    "TaskModel", "get_task", "investment_task", "line_task", "ValueNet",
]
__version__ = "0.1.0"
