"""Rao-Blackwellized filtering and smoothing for self-organizing state-space models."""

from .core import GaussianBelief, ParamVector, PosteriorBands, RunSummary, TimeSeries, as_series, ingest_csv
from .kalman import LinearGaussianSSM, kf_filter, ks_smooth, loglik, mle_fit
from .models import (VARIANCE_NAMES, ModelFamily, augment, data_prior, from_config, seasonal_model, seasonal_start,
                     simulate, split_partial_linear, trend_model)
from .particle import pf_filter, sof_pf_run
from .rao_blackwell import rbngf_run, rbpf_filter, rbpf_smooth
from .twostep import twostep_from_run, twostep_run

__version__ = "0.1.0"

__all__ = [
    "GaussianBelief", "ParamVector", "PosteriorBands", "RunSummary", "TimeSeries", "as_series", "ingest_csv",
    "LinearGaussianSSM", "kf_filter", "ks_smooth", "loglik", "mle_fit",
    "VARIANCE_NAMES", "ModelFamily", "augment", "data_prior", "from_config", "seasonal_model", "seasonal_start",
    "simulate", "split_partial_linear", "trend_model", "pf_filter", "sof_pf_run",
    "rbngf_run", "rbpf_filter", "rbpf_smooth", "twostep_from_run", "twostep_run",
]
