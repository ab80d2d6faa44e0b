"""
Sweep Service - ablation tables

Each axis enumerates a fixed set of rows. A row is a set of flat config
overrides applied to the same base config; every row trains from the same
seeds on the same dataset, so differences between rows come from the
config alone.
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Union

from hsvlt.core.config import CsaVariant, EmbeddingKind, ExperimentConfig, to_flat, with_overrides
from hsvlt.core.container import save_tensor
from hsvlt.core.errors import ConfigError, HsvltError
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import precision
from hsvlt.schemas import AblationRow
from hsvlt.services.dataset_service import SyntheticDataset, load_dataset
from hsvlt.services.evaluation_service import evaluation_service
from hsvlt.services.training_service import predict, training_service

logger = logging.getLogger(__name__)

EXTERNAL_EMBEDDING_FILE = "label_embeddings.hsvt"
EXTERNAL_EMBEDDING_STREAM = "external_embedding"


class AblationAxis(str, Enum):
    IVLA_KERNEL = "ivla_kernel"
    IVLA_TOGGLES = "ivla_toggles"
    CSA_VARIANT = "csa_variant"
    CSA_STAGES = "csa_stages"
    CSA_FEATURES = "csa_features"
    EMBEDDING = "embedding"


class AblationSpec(NamedTuple):
    label: str
    overrides: Dict[str, Any]


_TOGGLE_ROWS = (
    ("G-Conv", (True, False, False, False)),
    ("G-Conv+L-Act", (True, True, False, False)),
    ("G-Conv+L-Act+V-Gate", (True, True, True, False)),
    ("G-Conv+L-Act+L-Gate", (True, True, False, True)),
    ("G-Conv+L-Act+V-Gate+L-Gate", (True, True, True, True)),
)

_STAGE_ROWS = ((4,), (3, 4), (1, 2, 3), (2, 3, 4), (1, 2, 3, 4))


def ablation_rows(axis: Union[AblationAxis, str]) -> List[AblationSpec]:
    try:
        axis = AblationAxis(axis)
    except ValueError:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {[a.value for a in AblationAxis]}") from None

    if axis == AblationAxis.IVLA_KERNEL:
        return [AblationSpec(f"{k}x{k}", {"gconv_kernel": k, "use_gconv": True}) for k in (3, 5, 7, 11)]
    if axis == AblationAxis.IVLA_TOGGLES:
        keys = ("use_gconv", "use_l_act", "use_v_gate", "use_l_gate")
        return [AblationSpec(label, dict(zip(keys, flags))) for label, flags in _TOGGLE_ROWS]
    if axis == AblationAxis.CSA_VARIANT:
        return [AblationSpec(v.value, {"csa_variant": v.value, "csa_enabled": True})
                for v in (CsaVariant.S4_HEAD_MLP, CsaVariant.MLP_CONCAT_MLP, CsaVariant.CONCAT_HEAD_MLP)]
    if axis == AblationAxis.CSA_STAGES:
        return [AblationSpec("{" + ",".join(map(str, stages)) + "}",
                             {"csa_stages": list(stages), "csa_variant": CsaVariant.CONCAT_HEAD_MLP.value,
                              "csa_enabled": True})
                for stages in _STAGE_ROWS]
    if axis == AblationAxis.CSA_FEATURES:
        return [AblationSpec(f, {"csa_features": f, "csa_variant": CsaVariant.CONCAT_HEAD_MLP.value,
                                 "csa_enabled": True})
                for f in ("L", "S", "S_and_L")]
    return [AblationSpec(kind.value, {"embedding_kind": kind.value})
            for kind in (EmbeddingKind.ONE_HOT_PROJECTED, EmbeddingKind.LEARNED_TABLE, EmbeddingKind.EXTERNAL_FILE)]


def write_external_embedding(cfg: ExperimentConfig, out_dir: Union[str, Path]) -> Path:
    """Fixed (C_l, T) label table drawn from the model seed, standing in for pretrained text embeddings."""
    model = cfg.model
    path = Path(out_dir) / EXTERNAL_EMBEDDING_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    table = Rng(model.seed).child(EXTERNAL_EMBEDDING_STREAM).normal(1.0, (model.linguistic_channels, model.num_labels))
    save_tensor(path, table, version=1)
    return path


class SweepService:
    """Service for ablation tables"""

    @staticmethod
    def rows(axis: Union[AblationAxis, str]) -> List[AblationSpec]:
        return ablation_rows(axis)

    @staticmethod
    def run_row(
        base: ExperimentConfig,
        axis: str,
        label: str,
        overrides: Dict[str, Any],
        dataset: SyntheticDataset,
        eval_dataset: Optional[SyntheticDataset] = None,
    ) -> AblationRow:
        """Train one row on `dataset` and report on `eval_dataset` (the training set when omitted)."""
        cfg = with_overrides(base, **overrides)
        logger.info(f"🧪 {axis}: {label}")
        state, report = training_service.train(cfg, dataset)
        if eval_dataset is not None:
            with precision(cfg.train.precision.value):
                scores = predict(state.model, eval_dataset.images, cfg.train.batch_size)
            report = evaluation_service.build_report(cfg, scores, eval_dataset.truths, epochs_run=state.epoch,
                                                     final_loss=state.final_loss, wall_time=report.wall_time)
        return AblationRow(axis=axis, label=label, overrides=overrides, report=report)

    @staticmethod
    def ablation_sweep(
        base: ExperimentConfig,
        axis: Union[AblationAxis, str],
        data_dir: Union[str, Path],
        out_dir: Union[str, Path],
        eval_dir: Optional[Union[str, Path]] = None,
        workers: int = 0,
    ) -> List[AblationRow]:
        """
        Run every row of an axis.

        Args:
            base: config every row starts from
            axis: ablation axis name
            data_dir: training dataset directory, shared by all rows
            out_dir: where the external embedding table is written when needed
            eval_dir: optional held-out dataset directory
            workers: 0 runs rows in-process; N > 0 dispatches one Celery task per row

        Returns:
            One AblationRow per row, in table order
        """
        specs = ablation_rows(axis)
        axis = AblationAxis(axis)
        if axis == AblationAxis.EMBEDDING:
            table = write_external_embedding(base, out_dir)
            specs = [AblationSpec(s.label, {**s.overrides, "embedding_file": str(table)})
                     if s.overrides["embedding_kind"] == EmbeddingKind.EXTERNAL_FILE.value else s
                     for s in specs]

        if workers > 0:
            return SweepService._dispatch(base, axis, specs, data_dir, eval_dir)

        dataset = load_dataset(data_dir)
        eval_dataset = load_dataset(eval_dir) if eval_dir else None
        return [SweepService.run_row(base, axis.value, s.label, s.overrides, dataset, eval_dataset) for s in specs]

    @staticmethod
    def _dispatch(base, axis: AblationAxis, specs: List[AblationSpec], data_dir, eval_dir) -> List[AblationRow]:
        from hsvlt.services.tasks import run_ablation_row

        flat = to_flat(base)
        pending = [
            run_ablation_row.delay(flat, axis.value, s.label, s.overrides, str(data_dir),
                                   str(eval_dir) if eval_dir else None)
            for s in specs
        ]
        logger.info(f"⚙️ dispatched {len(pending)} ablation rows for {axis.value}")
        try:
            return [AblationRow.model_validate(task.get()) for task in pending]
        except HsvltError:
            raise
        except Exception as e:
            raise HsvltError(f"{type(e).__name__}: ablation sweep failed: {e}") from e


def ablation_sweep(base: ExperimentConfig, axis, data_dir, out_dir, eval_dir=None, workers: int = 0) -> List[AblationRow]:
    return SweepService.ablation_sweep(base, axis, data_dir, out_dir, eval_dir, workers)


# Global instance
sweep_service = SweepService()
