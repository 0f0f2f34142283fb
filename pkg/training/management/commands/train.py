from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand

from frontend.services.feature_service import Frontend
from ptsd.systems import SystemKind
from runs.services.command_guard import guarded_run
from runs.services.run_config import RunConfig
from runs.services.run_log_service import RunLogService
from simulation.services.dataset_service import DatasetService
from training.services.sampler_service import ClipStore
from training.services.train_service import TrainService


class Command(BaseCommand):
    help = "Entrena PTSD (o un baseline) con Adam y decaimiento de lr por época; escribe checkpoints y metrics.jsonl."

    def add_arguments(self, parser):
        parser.add_argument("--train-manifest", type=str, required=True)
        parser.add_argument("--val-manifest", type=str, default="", help="Manifest de validación (opcional).")
        parser.add_argument("--out", type=str, default="", help="Directorio de checkpoints. Default PTSD_RUNS_DIR/<system>.")
        parser.add_argument("--config", type=str, default="", help="Config JSON (secciones frontend|model|train|eval|seed).")
        parser.add_argument("--set", action="append", default=[], dest="overrides", metavar="SECTION.KEY=VALUE")
        parser.add_argument("--system", type=str, default="", help=f"Uno de {', '.join(SystemKind.values)}.")
        parser.add_argument("--seed", type=int, default=None)
        parser.add_argument("--resume", type=str, default="", help="Checkpoint a continuar (optimizador + RNG).")
        parser.add_argument("--init-from", type=str, default="", help="Checkpoint de partida (solo parámetros).")

    def handle(self, *args, **options):
        with guarded_run("train", output_path=options["out"]) as run:
            run_config = RunConfig.from_sources(options["config"] or None, options["overrides"], seed=options["seed"])
            if options["system"]:
                run_config = replace(run_config, train=replace(run_config.train, system=options["system"]))
            out_dir = Path(options["out"] or Path(settings.PTSD_RUNS_DIR) / run_config.train.system)
            RunLogService.annotate(
                run,
                config_hash=run_config.config_hash(),
                seed=run_config.seed,
                config=run_config.as_dict(),
                output_path=str(out_dir),
            )

            # Los features crudos no dependen de parámetros entrenables
            frontend = Frontend(run_config.frontend)
            train_store = ClipStore.from_manifest(DatasetService.read_manifest(options["train_manifest"]), frontend)
            val_store = None
            if options["val_manifest"]:
                val_store = ClipStore.from_manifest(DatasetService.read_manifest(options["val_manifest"]), frontend)

            result = TrainService.train_loop(
                train_store,
                val_store,
                run_config,
                out_dir,
                resume=options["resume"] or None,
                init_from=options["init_from"] or None,
                run=run,
            )
            RunLogService.annotate(
                run,
                metadata={
                    "epochs_run": len(result.history),
                    "best_epoch": result.best_epoch,
                    "best_ap": result.best_ap,
                    "last_checkpoint": str(result.last_checkpoint),
                },
            )

        best = "-" if result.best_ap is None else f"{result.best_ap:.4f}"
        self.stdout.write(self.style.SUCCESS(
            f"OK: system={run_config.train.system} épocas={len(result.history)} "
            f"best_epoch={result.best_epoch} best_mean_ap={best} -> {result.last_checkpoint}"
        ))
