"""Depth scaling of trained residual network weights, and the ODE/SDE
limits of the residual recursion."""

__version__ = "0.1.0"

from .core import PowerLawFit, RngStream, loglog_fit, smooth_series
from .datasets import Dataset, generate_synthetic, load_idx, serialize_idx
from .diagnostics import (ScalingReport, WeightTensor, classify_regime, decompose, diagnose_networks,
                          estimate_alpha, estimate_beta, quadratic_variation, table1_norms)
from .limits import (ConvergenceTable, ItoSpec, discrete_hidden_states, euler_maruyama, integrate_ode,
                     ito_correction_check, q_form, sample_driving_path, strong_error_sweep)
from .resnet import Architecture, ResNet, backward, forward, init_network, loss, sgd_train

__all__ = [
    "Architecture", "ConvergenceTable", "Dataset", "ItoSpec", "PowerLawFit", "ResNet", "RngStream",
    "ScalingReport", "WeightTensor", "backward", "classify_regime", "decompose", "diagnose_networks",
    "discrete_hidden_states", "estimate_alpha", "estimate_beta", "euler_maruyama", "forward",
    "generate_synthetic", "init_network", "integrate_ode", "ito_correction_check", "load_idx",
    "loglog_fit", "loss", "q_form", "quadratic_variation", "sample_driving_path", "serialize_idx",
    "sgd_train", "smooth_series", "strong_error_sweep", "table1_norms",
]
