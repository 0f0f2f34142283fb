from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand

from evaluation.services.inference_service import read_score_dump
from evaluation.services.protocol_service import EvalConfig, ProtocolService
from evaluation.services.report_service import METRIC_CHOICES, ReportService
from labels.types import FRAME_RATE
from runs.services.command_guard import guarded_run
from runs.services.run_log_service import RunLogService
from simulation.services.dataset_service import DatasetService
from training.services.sampler_service import ClipStore


class Command(BaseCommand):
    help = "Puntúa score dumps contra la referencia (RTTM) y emite el reporte por atributo."

    def add_arguments(self, parser):
        parser.add_argument("--dump", nargs="+", required=True, help="Uno o más score dumps.")
        parser.add_argument("--manifest", type=str, required=True, help="Manifest con las referencias.")
        parser.add_argument(
            "--metric",
            action="append",
            default=[],
            choices=METRIC_CHOICES,
            help="Repetible. AP/AUC/EER siempre se incluyen.",
        )
        parser.add_argument("--collar", type=float, default=0.25)
        parser.add_argument("--threshold", type=float, default=0.5)
        parser.add_argument("--median-window", type=int, default=11)
        parser.add_argument("--no-score-overlap", action="store_true", help="Excluye frames con traslape del DER.")
        parser.add_argument("--per-clip", action="store_true", help="Agrega métricas promedio por clip.")
        parser.add_argument("--dataset", type=str, default="", help="Nombre del dataset en el reporte.")
        parser.add_argument("--out", type=str, default="", help="Reporte JSON lines (opcional).")

    def handle(self, *args, **options):
        out_path = Path(options["out"]) if options["out"] else None

        with guarded_run("score", output_path=str(out_path or "")) as run:
            dumps = [read_score_dump(path) for path in options["dump"]]
            rates = {d.frame_rate for d in dumps}
            if rates != {FRAME_RATE}:
                raise ValidationError(
                    f"Frame rates de los dumps {sorted(rates)}; solo se puntúa a {FRAME_RATE} fps sin mezclar.",
                    code="frame_rate_mismatch",
                )

            cfg = EvalConfig(
                threshold=options["threshold"],
                median_window=options["median_window"],
                collar=options["collar"],
                score_overlap=not options["no_score_overlap"],
                per_clip=options["per_clip"],
            )
            metrics = tuple(dict.fromkeys(("ap", "auc", "eer", *(options["metric"] or METRIC_CHOICES))))
            manifest = DatasetService.read_manifest(options["manifest"])
            store = ClipStore.references(manifest)
            dataset = options["dataset"] or manifest.path.parent.name

            records = []
            for path, dump in zip(options["dump"], dumps):
                result = ProtocolService.from_dump(dump.posteriors, store, dump.chunk, system=dump.system)
                records.extend(ReportService.build_records(
                    result,
                    cfg,
                    dataset=dataset,
                    config_hash=dump.config_hash,
                    metrics=metrics,
                    extra={"dump": str(path)},
                ))
            RunLogService.annotate(
                run,
                config_hash=dumps[0].config_hash,
                config={"eval": asdict(cfg), "metrics": list(metrics)},
                metadata={"records": len(records)},
            )

            if out_path is not None:
                ReportService.write_report(out_path, records)
                out_path.with_name(f"{out_path.stem}.run_config.json").write_text(
                    json.dumps(
                        {
                            "dumps": [str(p) for p in options["dump"]],
                            "config_hashes": [d.config_hash for d in dumps],
                            "manifest": str(manifest.path),
                            "metrics": list(metrics),
                            "eval": asdict(cfg),
                        },
                        sort_keys=True,
                        indent=2,
                    ) + "\n",
                    encoding="utf-8",
                )

        self.stdout.write(ReportService.format_table(records))
        self.stdout.write(self.style.SUCCESS(f"OK: {len(records)} registros" + (f" -> {out_path}" if out_path else "")))
