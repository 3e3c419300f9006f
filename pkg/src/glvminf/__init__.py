"""Alternating estimation and debiased inference for generalized latent variable models."""

from .families import Family, FamilyDomainError, get_family
from .model import DataSet, ParamSet, joint_objective, linear_predictor
from .init import InitConfig, anchor_init, initialize, refine_covfree, spectral_init
from .altfit import (
    FitConfig,
    FitResult,
    alternate,
    cross_validate,
    fit,
    fit_baseline,
    fit_item,
    update_latent,
)
from .debias import DebiasReport, DebiasTarget, debias_one, decorrelate, score_and_info, screen

__version__ = "0.1.0"
