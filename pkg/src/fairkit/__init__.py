"""fairkit: fairness-aware classification with debiasing, group fairness
metrics, and multi-objective model selection."""

from . import analysis, data, evaluation, nn, postproc, training
from .errors import FairkitError

__version__ = "0.1.0"

__all__ = ["analysis", "data", "evaluation", "nn", "postproc", "training",
           "FairkitError", "__version__"]
