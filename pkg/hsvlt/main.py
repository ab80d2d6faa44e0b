"""
HSVLT command line

    python -m hsvlt gen-data --seed 0 --images 64 --labels 5 --size 32 --out data/
    python -m hsvlt train --preset desk --data data/ --out runs/desk
    python -m hsvlt eval --checkpoint runs/desk/checkpoint.hsva --data data/
    python -m hsvlt gradcheck --module ivla --seeds 10
    python -m hsvlt count --preset full
    python -m hsvlt ablate --axis ivla_toggles --preset desk --data data/ --out runs/ablate
    python -m hsvlt inspect --checkpoint runs/desk/checkpoint.hsva --image img.hsvt --out att/
    python -m hsvlt score --scores scores.csv --truths truths.csv

Any failure prints one line `error=<Class> message=<text>` on stderr and
exits with the class's exit code.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from hsvlt.core.config import ExperimentConfig, Precision, desk_preset, get_preset, load_config, save_config, with_overrides
from hsvlt.core.container import load_tensor, save_tensor
from hsvlt.core.errors import ConfigError, HsvltError, ShapeError
from hsvlt.core.output_builder import ablation_table, build_output, cost_lines, gradcheck_lines, key_value_lines, write_report
from hsvlt.core.tensor import Tensor, no_grad, precision
from hsvlt.metrics import PrfMode, mean_ap, prf_suite, read_prediction_set, write_prediction_csv
from hsvlt.models.counting import count_params_flops
from hsvlt.models.hsvlt import model_forward

load_dotenv()

logger = logging.getLogger("hsvlt")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CHECKPOINT_FILE = "checkpoint.hsva"


def _configure_logging() -> None:
    level = os.getenv("HSVLT_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, stream=sys.stderr)


def _experiment(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=desk_preset())
    else:
        cfg = get_preset(getattr(args, "preset", None) or "desk")
    env_precision = os.getenv("HSVLT_PRECISION")
    if env_precision:
        try:
            Precision(env_precision)
        except ValueError:
            raise ConfigError(f"HSVLT_PRECISION must be float64 or float32, got {env_precision!r}") from None
        cfg = with_overrides(cfg, precision=env_precision)
    return cfg


def _write_loss_history(state, out_dir: Path) -> None:
    frame = pd.DataFrame({
        "step": np.arange(1, len(state.loss_history) + 1),
        "loss": state.loss_history,
        "lr": state.lr_history,
    })
    frame.to_csv(out_dir / "loss_history.csv", index=False, float_format="%.17g")


def _write_predictions(scores: np.ndarray, truths: np.ndarray, out_dir: Path) -> None:
    write_prediction_csv(out_dir / "scores.csv", scores)
    write_prediction_csv(out_dir / "truths.csv", truths)


# Commands

def cmd_gen_data(args) -> int:
    from hsvlt.services.dataset_service import dataset_service

    dataset = dataset_service.generate(args.seed, args.images, args.labels, args.size)
    path = dataset_service.save(dataset, args.out)
    print(f"images={dataset.num_images} labels={dataset.num_labels} size={args.size} out={path}")
    return 0


def cmd_train(args) -> int:
    from hsvlt.services.dataset_service import load_dataset
    from hsvlt.services.storage import load_checkpoint, save_checkpoint
    from hsvlt.services.training_service import predict, training_service

    dataset = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / CHECKPOINT_FILE

    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = state.config
        logger.info(f"resuming from {args.resume} at epoch {state.epoch}")
    else:
        cfg = _experiment(args)
    save_config(cfg, out_dir / "config.env")

    def on_epoch(current) -> None:
        if args.checkpoint_every and current.epoch % args.checkpoint_every == 0:
            save_checkpoint(checkpoint, current, dataset.num_images)

    state, report = training_service.train(cfg, dataset, state=state, epochs=args.epochs, on_epoch=on_epoch)
    save_checkpoint(checkpoint, state, dataset.num_images)

    with precision(cfg.train.precision.value):
        scores = predict(state.model, dataset.images, cfg.train.batch_size)
    write_report(report, out_dir)
    _write_predictions(scores, dataset.truths, out_dir)
    _write_loss_history(state, out_dir)
    sys.stdout.write(key_value_lines(build_output(report)))
    return 0


def cmd_eval(args) -> int:
    from hsvlt.services.evaluation_service import evaluation_service

    report, scores, truths = evaluation_service.evaluate(args.checkpoint, args.data, workers=args.workers)
    if args.out:
        out_dir = Path(args.out)
        write_report(report, out_dir)
        _write_predictions(scores, truths, out_dir)
    sys.stdout.write(key_value_lines(build_output(report)))
    return 0


def cmd_gradcheck(args) -> int:
    from hsvlt.services.verification_service import verification_service

    reports = verification_service.run(args.module, seeds=args.seeds)
    sys.stdout.write(gradcheck_lines(reports))
    verification_service.require_all(reports)
    return 0


def cmd_count(args) -> int:
    cost = count_params_flops(_experiment(args).model)
    sys.stdout.write(cost_lines(cost))
    return 0


def cmd_ablate(args) -> int:
    from hsvlt.services.sweep_service import sweep_service

    cfg = _experiment(args)
    if args.epochs:
        cfg = with_overrides(cfg, epochs=args.epochs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sweep_service.ablation_sweep(cfg, args.axis, args.data, out_dir, eval_dir=args.eval_data,
                                        workers=args.workers)
    (out_dir / f"{args.axis}.csv").write_text(ablation_table(rows, fmt="csv"), encoding="utf-8")
    table = ablation_table(rows)
    (out_dir / f"{args.axis}.md").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_inspect(args) -> int:
    from hsvlt.services.storage import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    image = load_tensor(args.image)
    if image.ndim == 3:
        image = image[None]
    expected = (cfg.model.input_channels, *cfg.model.image_size)
    if image.ndim != 4 or image.shape[0] != 1 or tuple(image.shape[1:]) != expected:
        raise ShapeError(f"inspect expects one image of shape {expected}, got {image.shape}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = state.model
    model.eval()
    model.set_capture_attention(True)
    with precision(cfg.train.precision.value), no_grad():
        logits = model_forward(Tensor(image), model)
    written = 0
    for stage in model.stages:
        for j, block in enumerate(stage.blocks):
            # (1, HW, T) -> (HW, T)
            save_tensor(out_dir / f"att_stage{stage.index}_block{j}.hsvt", block.ivla.last_attention[0], version=1)
            written += 1
    model.set_capture_attention(False)
    save_tensor(out_dir / "logits.hsvt", logits.data[0], version=1)
    print(f"attention_maps={written} out={out_dir}")
    return 0


def cmd_score(args) -> int:
    scores, truths = read_prediction_set(args.scores, args.truths)
    ap = mean_ap(scores, truths)
    values = {"mAP": ap.mean_ap}
    values.update({k: v for k, v in prf_suite(scores, truths, PrfMode.THRESHOLD).model_dump().items()
                   if k in ("CP", "CR", "CF1", "OP", "OR", "OF1")})
    top = prf_suite(scores, truths, PrfMode.TOP_K, k=min(3, truths.shape[1]))
    values.update({f"top3_{k}": getattr(top, k) for k in ("CP", "CR", "CF1", "OP", "OR", "OF1")})
    values["excluded_classes"] = ",".join(map(str, ap.excluded_classes))
    values["num_images"] = int(scores.shape[0])
    sys.stdout.write(key_value_lines(values))
    return 0


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--config", help="flat key=value config file (unset keys come from the desk preset)")
    group.add_argument("--preset", choices=("desk", "full"), help="named configuration")


class CliParser(argparse.ArgumentParser):
    """Usage errors surface as ConfigError so they share the one-line error format."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="hsvlt", description="Hierarchical vision-language multi-label classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-scale dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--labels", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_config_options(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None, help="epochs to run in this invocation")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints (0 = only at the end)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=0, help="Celery shards (0 = in-process)")
    p.add_argument("--out", default=None, help="also write report and score CSVs here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient campaigns")
    p.add_argument("--module", default="all",
                   choices=("all", "primitives", "ivla", "encoder", "csa", "loss", "model"))
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter and FLOP count")
    _add_config_options(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("ablate", help="run one ablation axis")
    _add_config_options(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--workers", type=int, default=0, help="Celery tasks, one per row (0 = in-process)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump per-block attention maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="HSVT tensor of shape (3, H, W)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("score", help="metric report from score/truth CSVs")
    p.add_argument("--scores", required=True)
    p.add_argument("--truths", required=True)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except HsvltError as e:
        message = " ".join(str(e).split())
        sys.stderr.write(f"error={type(e).__name__} message={message}\n")
        return e.exit_code
    except (OSError, ValueError) as e:
        message = " ".join(str(e).split())
        sys.stderr.write(f"error={type(e).__name__} message={message}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
