"""
Dataset Service - label-conditioned synthetic images

Every label owns a fixed motif: labels t with t % 3 == 0 paint a
whole-image wash, t % 3 == 1 a mid-size blob, t % 3 == 2 a small dot. An
image is the sum of the motifs of its labels plus Gaussian noise, so the
labels live at three different spatial scales.

On disk a dataset is a directory with images.hsvt (N, 3, H, W), truths.hsvt
(N, T), both version-1 tensor containers, and meta.json.
"""
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel

from hsvlt.core.container import encode_tensor, load_tensor, save_tensor
from hsvlt.core.errors import ConfigError, ContainerError, LabelError, ShapeError
from hsvlt.core.rng import Rng

logger = logging.getLogger(__name__)

IMAGES_FILE = "images.hsvt"
TRUTHS_FILE = "truths.hsvt"
META_FILE = "meta.json"

MOTIF_KINDS = ("wash", "blob", "dot")
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
BLOB_SIGMA = 0.12
NOISE_STD = 0.05
LABEL_PROB = 0.3


class DatasetMeta(BaseModel):
    seed: Optional[int] = None
    num_images: int
    num_labels: int
    image_size: Tuple[int, int]
    sha256: str


@dataclass
class SyntheticDataset:
    images: np.ndarray   # (N, 3, H, W) float64, exactly representable in float32
    truths: np.ndarray   # (N, T) int64 in {0, 1}
    seed: Optional[int] = None

    @property
    def num_images(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_labels(self) -> int:
        return int(self.truths.shape[1])

    @property
    def image_size(self) -> Tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    def subset(self, start: int, stop: int) -> "SyntheticDataset":
        return SyntheticDataset(self.images[start:stop].copy(), self.truths[start:stop].copy(), self.seed)


def motif_kind(label: int) -> str:
    return MOTIF_KINDS[label % len(MOTIF_KINDS)]


def paint_motif(label: int, height: int, width: int) -> np.ndarray:
    """(3, H, W) pattern for one label; depends only on the label id and the image size."""
    kind = motif_kind(label)
    phase = ((label // len(MOTIF_KINDS)) * GOLDEN + 0.1) % 1.0
    color = np.cos(2.0 * np.pi * (phase + np.arange(3) / 3.0))
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / height
    xx = xx / width
    if kind == "wash":
        angle = 2.0 * np.pi * phase
        pattern = 0.5 * np.cos(2.0 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)))
    elif kind == "blob":
        cy = 0.25 + 0.5 * phase
        cx = 0.25 + 0.5 * ((phase * 7.0) % 1.0)
        pattern = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * BLOB_SIGMA ** 2))
    else:
        size = max(2, height // 16)
        top = int(phase * (height - size))
        left = int(((phase * 5.0) % 1.0) * (width - size))
        pattern = np.zeros((height, width))
        pattern[top:top + size, left:left + size] = 1.0
    return color[:, None, None] * pattern[None]


def draw_label_sets(rng: Rng, num_images: int, num_labels: int, label_prob: float = LABEL_PROB) -> np.ndarray:
    """Random label sets; every image has a label and every label appears in >= ceil(N/T) images."""
    presence = rng.random((num_images, num_labels)) < label_prob
    presence[np.arange(num_images), np.arange(num_images) % num_labels] = True
    needed = math.ceil(num_images / num_labels)
    for label in range(num_labels):
        deficit = needed - int(presence[:, label].sum())
        if deficit <= 0:
            continue
        candidates = np.flatnonzero(~presence[:, label])
        order = candidates[np.argsort(presence[candidates].sum(axis=1), kind="stable")]
        presence[order[:deficit], label] = True
    return presence.astype(np.int64)


def generate_dataset(seed: int, num_images: int, num_labels: int, image_size: int = 32,
                     noise: float = NOISE_STD) -> SyntheticDataset:
    if num_images < 1 or num_labels < 1:
        raise ConfigError(f"need at least one image and one label, got N={num_images}, T={num_labels}")
    if image_size < 16 or image_size % 16:
        raise ConfigError(f"image size must be a positive multiple of 16, got {image_size}")
    rng = Rng(seed)
    truths = draw_label_sets(rng.child("labels"), num_images, num_labels)
    motifs = np.stack([paint_motif(t, image_size, image_size) for t in range(num_labels)])
    images = np.einsum("nt,tchw->nchw", truths.astype(np.float64), motifs)
    images += rng.child("noise").normal(noise, images.shape)
    # stored as float32; keep the in-memory copy identical to what a reload gives back
    images = images.astype(np.float32).astype(np.float64)
    logger.info(f"🎨 generated {num_images} images {image_size}x{image_size} with {num_labels} labels (seed={seed})")
    return SyntheticDataset(images=images, truths=truths, seed=seed)


def dataset_digest(dataset: SyntheticDataset) -> str:
    """SHA-256 over the serialized image and truth containers."""
    digest = hashlib.sha256()
    digest.update(encode_tensor(dataset.images, version=1))
    digest.update(encode_tensor(dataset.truths, version=1))
    return digest.hexdigest()


def save_dataset(dataset: SyntheticDataset, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(out_dir / IMAGES_FILE, dataset.images, version=1)
    save_tensor(out_dir / TRUTHS_FILE, dataset.truths, version=1)
    meta = DatasetMeta(seed=dataset.seed, num_images=dataset.num_images, num_labels=dataset.num_labels,
                       image_size=dataset.image_size, sha256=dataset_digest(dataset))
    (out_dir / META_FILE).write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"💾 dataset saved to {out_dir} (sha256={meta.sha256[:12]}...)")
    return out_dir


def load_dataset(data_dir: Union[str, Path]) -> SyntheticDataset:
    data_dir = Path(data_dir)
    images_path, truths_path = data_dir / IMAGES_FILE, data_dir / TRUTHS_FILE
    if not images_path.is_file() or not truths_path.is_file():
        raise ContainerError(f"{data_dir} must contain {IMAGES_FILE} and {TRUTHS_FILE}")
    images = load_tensor(images_path).astype(np.float64)
    truths = load_tensor(truths_path)
    if images.ndim != 4 or truths.ndim != 2 or images.shape[0] != truths.shape[0]:
        raise ShapeError(f"images {images.shape} and truths {truths.shape} do not describe the same image set")
    if not np.isin(truths, (0.0, 1.0)).all():
        raise LabelError(f"{truths_path} must contain only 0 and 1")
    seed = None
    meta_path = data_dir / META_FILE
    if meta_path.is_file():
        seed = DatasetMeta.model_validate_json(meta_path.read_text(encoding="utf-8")).seed
    return SyntheticDataset(images=images, truths=truths.astype(np.int64), seed=seed)


class DatasetService:
    """Service facade over generation and persistence"""

    @staticmethod
    def generate(seed: int, num_images: int, num_labels: int, image_size: int = 32) -> SyntheticDataset:
        return generate_dataset(seed, num_images, num_labels, image_size)

    @staticmethod
    def save(dataset: SyntheticDataset, out_dir: Union[str, Path]) -> Path:
        return save_dataset(dataset, out_dir)

    @staticmethod
    def load(data_dir: Union[str, Path]) -> SyntheticDataset:
        return load_dataset(data_dir)


# Global instance
dataset_service = DatasetService()
