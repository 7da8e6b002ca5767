"""Heteroscedastic temporal VAE for irregularly sampled time series."""

from .model import HetvaeConfig, HeTVAE, OutputDistribution

__all__ = ["HetvaeConfig", "HeTVAE", "OutputDistribution"]
__version__ = "0.1.0"
