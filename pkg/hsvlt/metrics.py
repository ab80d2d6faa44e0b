"""
Multi-label evaluation metrics.

Average precision is the non-interpolated rank-based form: the mean, over the
positives of a class, of precision at each positive's rank. Rankings sort
scores descending with ties broken by ascending image index.
"""
import logging
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from hsvlt.core.errors import ConfigError, LabelError, NoPositiveLabelsError, ShapeError
from hsvlt.schemas import MeanApResult, PrfReport

logger = logging.getLogger(__name__)

POSITIVE_THRESHOLD = 0.5


class PrfMode(str, Enum):
    THRESHOLD = "threshold_05"
    TOP_K = "top_k"


def check_prediction_set(scores, truths) -> Tuple[np.ndarray, np.ndarray]:
    """Validate an (N_images, T) score matrix against a binary truth matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.ndim != 2 or scores.shape != truths.shape:
        raise ShapeError(f"scores {scores.shape} and truths {truths.shape} must be matching (N, T) matrices")
    if not np.isin(truths, (0, 1)).all():
        raise LabelError("truths must contain only 0 and 1")
    return scores, truths.astype(np.int64)


def descending_order(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Indices sorting scores high to low; equal scores keep index order."""
    return np.argsort(-scores, axis=axis, kind="stable")


def average_precision(scores, truths) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truths = np.asarray(truths).reshape(-1)
    if scores.shape != truths.shape:
        raise ShapeError(f"scores {scores.shape} and truths {truths.shape} differ")
    if truths.sum() == 0:
        raise NoPositiveLabelsError("average precision is undefined for a class without positives")
    hits = truths[descending_order(scores)] == 1
    ranks = np.arange(1, hits.size + 1)
    precision_at_hits = np.cumsum(hits)[hits] / ranks[hits]
    return float(precision_at_hits.mean())


def mean_ap(scores, truths) -> MeanApResult:
    """Unweighted mean AP over classes that have positives; the rest are listed as excluded."""
    scores, truths = check_prediction_set(scores, truths)
    per_class: List[Optional[float]] = []
    excluded: List[int] = []
    for label in range(scores.shape[1]):
        try:
            per_class.append(average_precision(scores[:, label], truths[:, label]))
        except NoPositiveLabelsError:
            per_class.append(None)
            excluded.append(label)
    valid = [ap for ap in per_class if ap is not None]
    if not valid:
        raise NoPositiveLabelsError("no class has a positive example; mAP is undefined")
    if excluded:
        logger.info(f"mAP excludes {len(excluded)} classes without positives: {excluded}")
    return MeanApResult(mean_ap=float(np.mean(valid)), per_class=per_class, excluded_classes=excluded)


def f1(precision: float, recall: float) -> float:
    total = precision + recall
    return 0.0 if total == 0 else 2.0 * precision * recall / total


def decisions(scores: np.ndarray, mode: PrfMode, k: int = 3) -> np.ndarray:
    """Binary predictions: score > 0.5, or the k best labels per image."""
    if mode == PrfMode.THRESHOLD:
        return (scores > POSITIVE_THRESHOLD).astype(np.int64)
    if not 1 <= k <= scores.shape[1]:
        raise ConfigError(f"top-k needs 1 <= k <= {scores.shape[1]}, got k={k}")
    picked = descending_order(scores, axis=1)[:, :k]
    out = np.zeros(scores.shape, dtype=np.int64)
    np.put_along_axis(out, picked, 1, axis=1)
    return out


def prf_suite(scores, truths, mode: Union[PrfMode, str] = PrfMode.THRESHOLD, k: int = 3) -> PrfReport:
    scores, truths = check_prediction_set(scores, truths)
    mode = PrfMode(mode)
    predicted = decisions(scores, mode, k)

    tp = (predicted * truths).sum(axis=0)
    predicted_pos = predicted.sum(axis=0)
    actual_pos = truths.sum(axis=0)

    has_pred = predicted_pos > 0
    has_pos = actual_pos > 0
    cp = float(np.mean(tp[has_pred] / predicted_pos[has_pred])) if has_pred.any() else 0.0
    cr = float(np.mean(tp[has_pos] / actual_pos[has_pos])) if has_pos.any() else 0.0
    op = float(tp.sum() / predicted_pos.sum()) if predicted_pos.sum() else 0.0
    overall_recall = float(tp.sum() / actual_pos.sum()) if actual_pos.sum() else 0.0

    return PrfReport(
        mode=mode.value if mode == PrfMode.THRESHOLD else f"top_{k}",
        CP=cp,
        CR=cr,
        CF1=f1(cp, cr),
        OP=op,
        OR=overall_recall,
        OF1=f1(op, overall_recall),
        undefined_precision_classes=np.flatnonzero(~has_pred).tolist(),
        undefined_recall_classes=np.flatnonzero(~has_pos).tolist(),
    )


# CSV surface: header `image_id,label_0..label_{T-1}`

def write_prediction_csv(path: Union[str, Path], matrix: np.ndarray, image_ids=None) -> None:
    matrix = np.asarray(matrix)
    ids = list(range(matrix.shape[0])) if image_ids is None else list(image_ids)
    frame = pd.DataFrame(matrix, columns=[f"label_{t}" for t in range(matrix.shape[1])])
    frame.insert(0, "image_id", ids)
    frame.to_csv(path, index=False, float_format="%.17g")


def read_prediction_csv(path: Union[str, Path]) -> Tuple[List[str], np.ndarray]:
    frame = pd.read_csv(path, dtype={"image_id": str})
    if frame.columns.empty or frame.columns[0] != "image_id":
        raise ShapeError(f"{path}: first column must be image_id")
    label_columns = list(frame.columns[1:])
    expected = [f"label_{t}" for t in range(len(label_columns))]
    if label_columns != expected:
        raise ShapeError(f"{path}: label columns must be label_0..label_{len(label_columns) - 1}")
    return frame["image_id"].tolist(), frame[label_columns].to_numpy(dtype=np.float64)


def read_prediction_set(scores_path, truths_path) -> Tuple[np.ndarray, np.ndarray]:
    score_ids, scores = read_prediction_csv(scores_path)
    truth_ids, truths = read_prediction_csv(truths_path)
    if score_ids != truth_ids:
        raise ShapeError("scores and truths files list different image ids")
    return check_prediction_set(scores, truths.astype(np.int64))
