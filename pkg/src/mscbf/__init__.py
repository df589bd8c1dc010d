"""Multiscale stochastic convective Brinkman-Forchheimer averaging on the 2D torus."""
from .averaging import ErgodicConfig, estimate_fbar, fbar_oracle_linear, run_hmm_averaged, run_khasminskii
from .config import ConfigError, RunConfig, parse_config
from .coupling import AssumptionError, CouplingSpec, ModelParams, validate_assumptions
from .dynamics import BlowUpError, IntegratorConfig, simulate, step_coupled
from .fields import StokesBasis, VelocityField, build_basis, random_field
from .stochastic import Channel, CovarianceSpec, NoiseStream, power_law_covariance

__all__ = [
    "AssumptionError", "BlowUpError", "Channel", "ConfigError", "CouplingSpec", "CovarianceSpec",
    "ErgodicConfig", "IntegratorConfig", "ModelParams", "NoiseStream", "RunConfig", "StokesBasis",
    "VelocityField", "build_basis", "estimate_fbar", "fbar_oracle_linear", "parse_config",
    "power_law_covariance", "random_field", "run_hmm_averaged", "run_khasminskii", "simulate",
    "step_coupled", "validate_assumptions",
]
