"""Goodness-of-fit testing for the functional linear model with functional response."""

from .fdata import (
    FpcBasis,
    FunctionalSample,
    Grid,
    GramFactor,
    ScoreMatrix,
    center,
    fpc,
    gram_factor,
    inner_product,
    make_grid,
    project,
    reconstruct,
    truncate_by_ev,
)
from .gof import GofConfig, GofResult, Simple, golden_multipliers, pvalue, run_gof, run_gof_simple
from .pcvm import adot, pcvm_statistic, pcvm_statistic_general
from .regfit import EstimatorSpec, Kind, fit, select_lambda

__version__ = "0.1.0"
