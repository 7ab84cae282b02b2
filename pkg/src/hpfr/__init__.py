"""Heavy-tailed process functional regression.

Robust estimation of a population mean curve and subject-specific curve
prediction for longitudinal data, with the subject-level deviation modelled
as a scale mixture of Gaussian processes (Gaussian, Student-t, slash or
contaminated normal).
"""
from .data import (BasisConfig, ColumnSchema, Dataset, Subject, assemble_design,
                   dataset_from_arrays, load_dataset, write_dataset)
from .em import FitConfig, FitResult, fit
from .errors import (DataError, DataParseError, DomainError, HPFRError, MomentError,
                     NumericalError, SchemaError)
from .kernels import CovParams, SqExpParams, Targets
from .likelihood import ModelParams, marginal_loglik
from .mixing import MixingFamily
from .predict import (PredictionJob, PredictionResult, predict_jobs, predict_new_subject,
                      predict_random_terms)
from .sample import sample_paths

__version__ = "0.1.0"

__all__ = [
    "BasisConfig", "ColumnSchema", "CovParams", "DataError", "DataParseError", "Dataset",
    "DomainError", "FitConfig", "FitResult", "HPFRError", "MixingFamily", "ModelParams",
    "MomentError", "NumericalError", "PredictionJob", "PredictionResult", "SchemaError",
    "SqExpParams", "Subject", "Targets", "assemble_design", "dataset_from_arrays", "fit",
    "load_dataset", "marginal_loglik", "predict_jobs", "predict_new_subject",
    "predict_random_terms", "sample_paths", "write_dataset",
]
