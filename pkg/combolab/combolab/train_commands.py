"""Training, evaluation, cross-validation and loss-comparison commands."""
import argparse
import logging
from pathlib import Path
from typing import Optional, Tuple

from .config import RunConfig, load_configured_dataset, load_run_config, write_config_echo
from .errors import EXIT_OK
from .model import load_checkpoint, make_forward, save_checkpoint
from .report import (
    format_loss_table,
    format_metrics,
    loss_table_payload,
    write_history,
    write_json_report,
)
from .train import check_loss_names, compare_losses, evaluate, fit_model, run_folds, summarize_folds

logger = logging.getLogger("TrainCommands")

CHECKPOINT_NAME = "model.clck"
CONFIG_ARG = (("--config",), dict(required=True, help="TOML run configuration"))
OUT_ARG = (("--out",), dict(default=None, help="output directory (overrides output.dir)"))


class TrainCommands:
    """Commands that train and score models from a run configuration."""

    def __init__(self, app):
        self.app = app
        self._register_commands()

    def _register_commands(self):
        self.app.command("train", [CONFIG_ARG, OUT_ARG])(self.train)
        self.app.command("eval", [
            CONFIG_ARG,
            (("--checkpoint",), dict(required=True, help="checkpoint written by train")),
            OUT_ARG,
        ])(self.eval)
        self.app.command("cv", [
            CONFIG_ARG,
            (("--k",), dict(type=int, default=None, help="number of folds (default: experiment.k)")),
            OUT_ARG,
        ])(self.cv)
        self.app.command("compare", [
            CONFIG_ARG,
            (("--losses",), dict(default=None, help="comma separated, e.g. mse,l1,smooth_l1,huber,combo")),
            OUT_ARG,
        ])(self.compare)

    def _prepare(self, args: argparse.Namespace, **experiment) -> Tuple[RunConfig, Path]:
        cfg = load_run_config(args.config)
        if args.out is not None:
            cfg = cfg.model_copy(update={"output": cfg.output.model_copy(update={"dir": args.out})})
        if experiment:
            cfg = cfg.model_copy(update={"experiment": cfg.experiment.model_copy(update=experiment)})
        out = Path(cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        write_config_echo(cfg, out)
        return cfg, out

    def train(self, args: argparse.Namespace) -> int:
        """Train one model on the whole configured dataset."""
        cfg, out = self._prepare(args)
        dataset = load_configured_dataset(cfg)
        result = fit_model(dataset, cfg.discretization, cfg.backbone, cfg.train, augment_cfg=cfg.augment)
        metrics = evaluate(result.params, result.forward, dataset)

        save_checkpoint(out / CHECKPOINT_NAME, result.params)
        write_history(out / "history.jsonl", result.history)
        write_json_report(out / "report.json", {
            "command": "train",
            "loss": cfg.train.loss,
            "samples": len(dataset),
            "parameters": result.params.count(),
            "epochs": cfg.train.epochs,
            "final_loss": result.history[-1].loss if result.history else None,
            "discretization": result.spec.model_dump(mode="json"),
            "class_weights": result.class_weights.tolist(),
            "train_metrics": metrics.to_dict(),
        })
        print("train: {0}".format(format_metrics(metrics)))
        print("outputs in {0}".format(out))
        return EXIT_OK

    def eval(self, args: argparse.Namespace) -> int:
        """Score a checkpoint on the whole configured dataset."""
        cfg, out = self._prepare(args)
        params = load_checkpoint(args.checkpoint)
        dataset = load_configured_dataset(cfg)
        metrics = evaluate(params, make_forward(params), dataset)
        write_json_report(out / "eval_report.json", {
            "command": "eval",
            "samples": len(dataset),
            "parameters": params.count(),
            "metrics": metrics.to_dict(),
        })
        print("eval: {0}".format(format_metrics(metrics)))
        return EXIT_OK

    def cv(self, args: argparse.Namespace) -> int:
        """k-fold cross validation; class weights are recomputed on every training fold."""
        overrides = {"k": args.k} if args.k is not None else {}
        cfg, out = self._prepare(args, **overrides)
        dataset = load_configured_dataset(cfg)
        k = cfg.experiment.k
        outcomes = run_folds(dataset, k, cfg.discretization, cfg.backbone, cfg.train,
                             seed=cfg.experiment.split_seed, augment_cfg=cfg.augment)
        summary = summarize_folds([o.metrics for o in outcomes])

        for outcome in outcomes:
            write_history(out / "history_fold{0}.jsonl".format(outcome.fold), outcome.history, fold=outcome.fold)
            print("fold {0}: {1}".format(outcome.fold, format_metrics(outcome.metrics)))
        write_json_report(out / "cv_report.json", {
            "command": "cv",
            "k": k,
            "loss": cfg.train.loss,
            "folds": [{"fold": o.fold, "train_size": o.train_size, "test_size": o.test_size,
                       **o.metrics.to_dict()} for o in outcomes],
            "mean": {"mae": summary.mae, "rmse": summary.rmse, "pc": summary.pc, "pc_defined": summary.pc_defined},
        })
        print("mean over {0} folds: {1}".format(k, format_metrics(summary)))
        return EXIT_OK

    def compare(self, args: argparse.Namespace) -> int:
        """Train one model per loss on a shared 60/40 split and print the comparison table."""
        losses: Optional[Tuple[str, ...]] = None
        if args.losses is not None:
            losses = tuple(check_loss_names(args.losses.split(",")))
        cfg, out = self._prepare(args, **({"losses": losses} if losses else {}))
        dataset = load_configured_dataset(cfg)
        rows = compare_losses(dataset, cfg.experiment.losses, cfg.discretization, cfg.backbone, cfg.train,
                              seed=cfg.experiment.split_seed, augment_cfg=cfg.augment)

        for row in rows:
            write_history(out / "history_{0}.jsonl".format(row.loss), row.history, loss_name=row.loss)
        write_json_report(out / "compare_report.json", {"command": "compare", **loss_table_payload(rows)})
        print(format_loss_table(rows), end="")
        return EXIT_OK
