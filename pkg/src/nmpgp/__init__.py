"""Gaussian-process correction of numerical market-price forecasts."""

from .data_io import DataError, MarketSeries, impute_knn, load_csv, write_csv
from .pipeline import (
    FittedPipeline,
    ForecastReport,
    PipelineConfig,
    fit_pipeline,
    forecast,
    load_pipeline,
    save_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "FittedPipeline",
    "ForecastReport",
    "MarketSeries",
    "PipelineConfig",
    "fit_pipeline",
    "forecast",
    "impute_knn",
    "load_csv",
    "load_pipeline",
    "save_pipeline",
    "write_csv",
]
