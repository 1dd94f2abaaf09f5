"""Bayesian multiple-testing model selection for inverse regression."""
from .streams import SeededStream, derive_stream, sample_dirichlet, std_normal_cdf, std_normal_inverse_cdf, empirical_quantile, InvalidParameterError
from .models import ModelSpec, Family, Link, RegressionForm, CovariateSet, Dataset, ParamVector, InverseModel, default_roster

__version__ = "0.1.0"
