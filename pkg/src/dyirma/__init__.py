"""Hierarchical pooling of per-segment TMRCA realizations by importance resampling."""
from .errors import (ConfigError, ConvergenceError, DataError, DomainError, DyirmaError,
                     NumericalError)
from .gamma_kde import GammaKernelKde, fit as fit_kde
from .hier_model import CovarianceSpec, HierParams
from .realization_io import PriorSamples, RealizationStore
from .sampler import Hyperpriors, SamplerConfig, run_chain, run_chains
from .trace import ChainTrace

__version__ = "0.1.0"

__all__ = [
    "ChainTrace", "ConfigError", "ConvergenceError", "CovarianceSpec", "DataError",
    "DomainError", "DyirmaError", "GammaKernelKde", "HierParams", "Hyperpriors",
    "NumericalError", "PriorSamples", "RealizationStore", "SamplerConfig", "fit_kde",
    "run_chain", "run_chains",
]
