"""Multiple imputation by chained equations for high-dimensional data.

Seven high-dimensional elementary imputation strategies (Bayesian ridge,
direct and indirect regularized regression, Bayesian lasso, principal
components, regression trees, random forests) plus screening-, analysis-
model-, and oracle-based reference strategies, a MAR amputation module, and
a Monte Carlo / resampling harness that scores methods by percent relative
bias and confidence-interval coverage under Rubin's-rules pooling.
"""

from .data import Dataset, MissingMask, Standardization, read_csv, write_csv
from .engine import (
    ImputationSpec,
    Method,
    MethodParams,
    MultiplyImputedData,
    mice_run,
)
from .pooling import Estimand, EstimandValue, PooledEstimate, rubin_pool

__all__ = [
    "Dataset",
    "MissingMask",
    "Standardization",
    "read_csv",
    "write_csv",
    "ImputationSpec",
    "Method",
    "MethodParams",
    "MultiplyImputedData",
    "mice_run",
    "Estimand",
    "EstimandValue",
    "PooledEstimate",
    "rubin_pool",
]
