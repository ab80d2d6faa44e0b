"""
Celery worker app for evaluation shards and ablation rows.

Broker and result backend are both REDIS_URL. HSVLT_CELERY_EAGER=1 runs
every task inside the calling process, which the tests and single-machine
runs use instead of a live Redis.
"""
import os

from celery import Celery
from dotenv import load_dotenv

load_dotenv()

REDIS_URL = os.getenv('REDIS_URL', 'redis://localhost:6379/0')

# one ablation row trains a model from scratch
ROW_TIME_LIMIT = 6 * 3600


def _env_flag(name: str) -> bool:
    return os.getenv(name, '0').strip().lower() in ('1', 'true', 'yes')


celery_app = Celery('hsvlt', broker=REDIS_URL, backend=REDIS_URL, include=['hsvlt.services.tasks'])
celery_app.conf.update(
    task_serializer='json',
    result_serializer='json',
    accept_content=['json'],
    task_time_limit=ROW_TIME_LIMIT,
    worker_prefetch_multiplier=1,
    task_always_eager=_env_flag('HSVLT_CELERY_EAGER'),
    task_eager_propagates=True,
)


def set_eager(enabled: bool) -> None:
    celery_app.conf.task_always_eager = enabled


__all__ = ('celery_app', 'set_eager')
