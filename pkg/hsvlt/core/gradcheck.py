"""
Finite-difference oracle for analytic gradients.

Each checked coordinate is perturbed by +/- step and the central difference
(f(x+h) - f(x-h)) / 2h is compared with the analytic gradient using
rel_err = |a - n| / max(|a|, |n|, 1e-8). A coordinate also passes when
|a - n| <= atol; parameter sweeps set a small atol for coordinates a later
normalization makes (almost) irrelevant, where the difference is pure rounding.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from hsvlt.core.errors import GradientCheckError, ShapeError
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor, no_grad
from hsvlt.schemas import GradCheckReport

logger = logging.getLogger(__name__)

REL_ERR_FLOOR = 1e-8


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_FLOOR)


def _pick_coordinates(size: int, max_coords: Optional[int], rng: Optional[Rng]) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    rng = rng or Rng(0)
    return np.sort(rng.generator.choice(size, size=max_coords, replace=False))


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(f"gradient check needs a scalar function, got shape {value.shape}")
    return value.item()


def _compare(
    evaluate: Callable[[], Tensor],
    targets: Sequence[Tuple[str, Tensor]],
    step: float,
    tol: float,
    max_coords: Optional[int],
    rng: Optional[Rng],
    name: str,
    atol: float = 0.0,
) -> GradCheckReport:
    for _, tensor in targets:
        tensor.data = np.array(tensor.data, copy=True, order="C")
        tensor.requires_grad = True
        tensor.zero_grad()
    out = evaluate()
    _scalar(out)
    out.backward()

    worst_err, worst_at, checked, worst_abs, failures = 0.0, None, 0, 0.0, 0
    for label, tensor in targets:
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        flat = tensor.data.reshape(-1)
        for index in _pick_coordinates(flat.size, max_coords, rng):
            original = flat[index]
            with no_grad():
                flat[index] = original + step
                plus = _scalar(evaluate())
                flat[index] = original - step
                minus = _scalar(evaluate())
                flat[index] = original
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[index])
            err = relative_error(a, numeric)
            checked += 1
            worst_abs = max(worst_abs, abs(a - numeric))
            if err >= tol and abs(a - numeric) > atol:
                failures += 1
            if err > worst_err:
                worst_err, worst_at = err, f"{label}[{int(index)}]"

    report = GradCheckReport(
        name=name,
        max_rel_err=worst_err,
        passed=failures == 0,
        tol=tol,
        step=step,
        coords_checked=checked,
        worst=worst_at,
        max_abs_err=worst_abs,
        atol=atol,
    )
    logger.debug(f"gradcheck {name}: max_rel_err={worst_err:.3e} at {worst_at} over {checked} coords")
    return report


def grad_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[Rng] = None,
    name: str = "f",
    atol: float = 0.0,
) -> GradCheckReport:
    """Check d fn(x) / dx for a scalar-valued fn."""
    return _compare(lambda: fn(x), [("x", x)], step, tol, max_coords, rng, name, atol)


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    named_parameters: List[Tuple[str, Tensor]],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = 4,
    rng: Optional[Rng] = None,
    name: str = "loss",
    atol: float = 0.0,
) -> GradCheckReport:
    """Check a closure's gradient with respect to many named tensors, sampling coordinates."""
    return _compare(loss_fn, named_parameters, step, tol, max_coords, rng, name, atol)


def require_pass(report: GradCheckReport) -> GradCheckReport:
    if not report.passed:
        raise GradientCheckError(
            f"{report.name}: max_rel_err={report.max_rel_err:.3e} at {report.worst} exceeds tol={report.tol:g}"
        )
    return report
