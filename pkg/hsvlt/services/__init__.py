"""
Services: synthetic data, training, checkpoints, evaluation, ablation sweeps and gradient checks
Each module exposes a service class with a module-level singleton; Celery workers
(hsvlt.services.tasks) run evaluation shards and ablation rows.
"""

__all__ = [
    "celery_app",
    "dataset_service",
    "training_service",
    "storage",
    "evaluation_service",
    "sweep_service",
    "verification_service",
    "tasks"
]
