"""
Celery Tasks - workers for sharded evaluation and ablation rows

Arguments and results are plain JSON values: paths, flat config dicts,
lists of floats and dumped pydantic models.
"""
import logging
from typing import Any, Dict, Optional

from celery import Task

from hsvlt.core.errors import HsvltError
from hsvlt.services.celery_app import celery_app

logger = logging.getLogger(__name__)


class CallbackTask(Task):
    """Task base that logs completion and failure"""

    def on_success(self, retval, task_id, args, kwargs):
        logger.info(f"✅ task {self.name} [{task_id}] completed")

    def on_failure(self, exc, task_id, args, kwargs, einfo):
        logger.error(f"❌ task {self.name} [{task_id}] failed: {exc}")


def _progress(task: Task, progress: int, stage: str) -> None:
    # eager tasks have no result backend to report to
    if task.request.is_eager or task.request.id is None:
        return
    task.update_state(state='PROCESSING', meta={
        'status': 'processing',
        'progress': progress,
        'stage': stage,
    })


def _reraise(exc: Exception, what: str):
    if isinstance(exc, HsvltError):
        raise exc
    raise HsvltError(f"{type(exc).__name__}: {what}: {exc}") from exc


@celery_app.task(bind=True, base=CallbackTask, name='hsvlt.evaluate_shard')
def evaluate_shard(self, checkpoint: str, data_dir: str, start: int, stop: int) -> Dict[str, Any]:
    """
    Score images [start, stop) of a dataset with a checkpoint.

    Returns:
        Dict with start, stop and scores (list of per-image score lists)
    """
    from hsvlt.services.evaluation_service import evaluation_service

    try:
        _progress(self, 10, f'Scoring images {start}..{stop - 1}...')
        scores = evaluation_service.score_shard(checkpoint, data_dir, start, stop)
        return {'start': start, 'stop': stop, 'scores': scores.tolist()}
    except Exception as e:
        logger.error(f"❌ shard {start}..{stop} failed: {e}")
        _reraise(e, f"evaluate_shard({start}, {stop})")


@celery_app.task(bind=True, base=CallbackTask, name='hsvlt.run_ablation_row')
def run_ablation_row(
    self,
    base_config: Dict[str, str],
    axis: str,
    label: str,
    overrides: Dict[str, Any],
    data_dir: str,
    eval_dir: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Train and evaluate one ablation row.

    Returns:
        AblationRow as a JSON-ready dict
    """
    from hsvlt.core.config import from_flat
    from hsvlt.services.dataset_service import load_dataset
    from hsvlt.services.sweep_service import sweep_service

    try:
        _progress(self, 5, f'{axis}: {label}')
        cfg = from_flat(base_config)
        dataset = load_dataset(data_dir)
        eval_dataset = load_dataset(eval_dir) if eval_dir else None
        row = sweep_service.run_row(cfg, axis, label, overrides, dataset, eval_dataset)
        return row.model_dump(mode='json')
    except Exception as e:
        logger.error(f"❌ ablation row {axis}/{label} failed: {e}")
        _reraise(e, f"run_ablation_row({axis}, {label})")
