"""
Report formatting: key/value text, one-row CSV and ablation tables.
"""
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import pandas as pd

from hsvlt.schemas import AblationRow, CostReport, GradCheckReport, PrfReport, RunReport

METRIC_KEYS = ("CP", "CR", "CF1", "OP", "OR", "OF1")
TABLE_COLUMNS = ("mAP", "CF1", "OF1", "top3_CF1", "top3_OF1", "epochs_run", "params", "flops_per_image")


def _prf(prefix: str, prf: PrfReport) -> Dict[str, Any]:
    return {f"{prefix}{key}": getattr(prf, key) for key in METRIC_KEYS}


def build_output(report: RunReport) -> Dict[str, Any]:
    """
    Flatten a RunReport into ordered key/value pairs.
    - metrics of the 0.5-threshold regime are unprefixed, top-3 ones carry `top3_`
    - the config echo follows under `config.`
    """
    result: Dict[str, Any] = {"mAP": report.mAP}
    result.update(_prf("", report.all))
    result.update(_prf("top3_", report.top3))
    result["excluded_classes"] = ",".join(map(str, report.excluded_classes))
    result["params"] = report.params
    result["flops_per_image"] = report.flops_per_image
    result["epochs_run"] = report.epochs_run
    result["final_loss"] = report.final_loss
    result["num_images"] = report.num_images
    result["wall_time"] = report.wall_time
    result["ap_kind"] = report.ap_kind
    for key, value in report.config.items():
        result[f"config.{key}"] = value
    return result


def _text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def key_value_lines(values: Dict[str, Any]) -> str:
    return "".join(f"{key}: {_text(value)}\n" for key, value in values.items())


def write_report(report: RunReport, out_dir: Union[str, Path]) -> None:
    """report.txt (key: value lines) and report.csv (one row)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = build_output(report)
    (out_dir / "report.txt").write_text(key_value_lines(values), encoding="utf-8")
    pd.DataFrame([values]).to_csv(out_dir / "report.csv", index=False, float_format="%.17g")


def cost_lines(cost: CostReport) -> str:
    return key_value_lines(cost.model_dump())


def gradcheck_lines(reports: Sequence[GradCheckReport]) -> str:
    lines = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name} max_rel_err={r.max_rel_err:.3e} tol={r.tol:g} coords={r.coords_checked}"
                     + (f" worst={r.worst}" if not r.passed else ""))
    return "\n".join(lines) + "\n"


def ablation_frame(rows: Sequence[AblationRow]) -> pd.DataFrame:
    records: List[Dict[str, Any]] = []
    for row in rows:
        values = build_output(row.report)
        records.append({"axis": row.axis, "row": row.label, **{c: values[c] for c in TABLE_COLUMNS}})
    return pd.DataFrame(records, columns=["axis", "row", *TABLE_COLUMNS])


def ablation_table(rows: Sequence[AblationRow], fmt: str = "markdown") -> str:
    frame = ablation_frame(rows)
    if fmt == "csv":
        return frame.to_csv(index=False, float_format="%.6f")
    header = "| " + " | ".join(frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = []
    for record in frame.itertuples(index=False):
        cells = [f"{v:.4f}" if isinstance(v, float) else str(v) for v in record]
        body.append("| " + " | ".join(cells) + " |")
    return "\n".join([header, rule, *body]) + "\n"
