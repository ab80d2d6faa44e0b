"""
Report schemas shared by services, CLI and workers
"""
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class GradCheckReport(BaseModel):
    """Outcome of comparing analytic gradients with central differences"""
    name: str = "f"
    max_rel_err: float = Field(..., ge=0.0)
    passed: bool
    tol: float
    step: float
    coords_checked: int = Field(..., ge=0)
    worst: Optional[str] = None
    max_abs_err: float = 0.0
    atol: float = 0.0


class MeanApResult(BaseModel):
    mean_ap: float
    per_class: List[Optional[float]]
    excluded_classes: List[int] = []


class PrfReport(BaseModel):
    """Per-class (C*) and overall (O*) precision, recall and F1"""
    mode: str
    CP: float
    CR: float
    CF1: float
    OP: float
    OR: float
    OF1: float
    undefined_precision_classes: List[int] = []
    undefined_recall_classes: List[int] = []


class CostReport(BaseModel):
    params: int = Field(..., ge=0)
    flops_per_image: int = Field(..., ge=0)
    spatial_flops: int = Field(..., ge=0)
    token_flops: int = Field(..., ge=0)
    image_size: List[int]
    num_labels: int


class RunReport(BaseModel):
    """Everything a train or eval run reports, re-derivable from checkpoint + data"""
    config: Dict[str, Any]
    mAP: float
    all: PrfReport
    top3: PrfReport
    excluded_classes: List[int] = []
    params: int = 0
    flops_per_image: int = 0
    wall_time: float = 0.0
    epochs_run: int = 0
    final_loss: Optional[float] = None
    num_images: int = 0
    ap_kind: str = "non-interpolated rank-based AP"


class AblationRow(BaseModel):
    axis: str
    label: str
    overrides: Dict[str, Any]
    report: RunReport
