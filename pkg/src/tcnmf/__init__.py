"""Temporal multimorbidity patterns via temporally concatenated NMF.

The package mines disease clusters and their per-patient age trajectories
from longitudinal patient-disease event records, derives a directed
cluster ascendancy network from the learned time courses, and scores the
clusters against reference comorbid/causal disease-pair lookups.
"""

from tcnmf.errors import ConfigError, DataFormatError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataFormatError", "NumericalError", "__version__"]
