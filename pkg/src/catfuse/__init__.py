"""Penalized level fusion for multi-response ANOVA models."""

from catfuse.estimator import FusedANOVARegressor

__all__ = ["FusedANOVARegressor"]
__version__ = "0.1.0"
