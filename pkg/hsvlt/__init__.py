"""
HSVLT: hierarchical scale-aware vision-language multi-label classifier

Subpackages:
    hsvlt.core      tensor engine, config, containers, reports, errors
    hsvlt.models    IVLA, encoder, cross-scale aggregation, cost counting
    hsvlt.services  dataset, training, evaluation, sweeps, gradient checks, Celery workers
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
