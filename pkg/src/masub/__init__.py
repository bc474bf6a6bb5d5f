"""Moment-assisted subsampling for parametric models on large datasets.

A small Poisson subsample gives a cheap estimate; whole-data averages of a
moment function, computed in one streaming pass, then correct it through a
one-step GMM update that cannot lose efficiency.
"""
from .data import ArrayDataset, CsvDataset, DataError
from .estimator import EstimatorKind, assemble_gmm, mas_step, solve_plain, whole_data_mle
from .model import LogisticModel, WeibullModel, make_model
from .moments import OptimalScoreMoment, XYMoment, make_moment, whole_data_moment
from .pipeline import FitResult, fit
from .sampling import draw_pilot, draw_poisson, make_plan

__all__ = [
    "ArrayDataset", "CsvDataset", "DataError", "EstimatorKind", "FitResult", "LogisticModel",
    "OptimalScoreMoment", "WeibullModel", "XYMoment", "assemble_gmm", "draw_pilot", "draw_poisson",
    "fit", "make_model", "make_moment", "make_plan", "mas_step", "solve_plain", "whole_data_mle",
    "whole_data_moment",
]
