import pytest

from hsvlt.core.config import from_flat
from hsvlt.services.celery_app import celery_app, set_eager
from hsvlt.services.dataset_service import generate_dataset, save_dataset

TINY = {
    "image_size": "32",
    "num_labels": "3",
    "linguistic_channels": "4",
    "depths": "1,1,1,1",
    "channels": "4,6,8,10",
    "gconv_kernel": "3",
    "ham_rank": "2",
    "ham_updates": "2",
    "epochs": "2",
    "batch_size": "4",
    "target_map": "",
}


@pytest.fixture
def tiny_cfg():
    """Four small stages on 32x32 images with 3 labels; trains in well under a second per epoch."""
    return from_flat(TINY)


@pytest.fixture
def tiny_dataset():
    return generate_dataset(seed=0, num_images=8, num_labels=3, image_size=32)


@pytest.fixture
def data_dir(tmp_path, tiny_dataset):
    return save_dataset(tiny_dataset, tmp_path / "data")


@pytest.fixture
def eager_celery():
    previous = celery_app.conf.task_always_eager
    set_eager(True)
    yield celery_app
    set_eager(previous)
