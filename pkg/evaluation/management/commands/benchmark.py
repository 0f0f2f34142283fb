from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand

from evaluation.services.protocol_service import EvalConfig, ProtocolService
from evaluation.services.report_service import THRESHOLD_METRICS, ReportService
from ptsd.services.checkpoint_service import CheckpointService
from ptsd.systems import GENDER_SYSTEMS, SystemKind
from runs.services.command_guard import guarded_run
from runs.services.run_log_service import RunLogService
from simulation.services.dataset_service import DatasetService
from training.services.sampler_service import ClipStore


def _lengths(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValidationError(f"--enrollment-lengths inválido: {text!r}", code="invalid_config")
    if not values or any(v <= 0 for v in values):
        raise ValidationError("Las longitudes de enrolamiento deben ser > 0.", code="invalid_config")
    return values


class Command(BaseCommand):
    help = (
        "Reporte comparativo: atributos de PTSD (AP/AUC/EER), DER de PTSD(T) vs TS-VAD por longitud "
        "de enrolamiento, OSD precision/recall y tabla de género baseline1/baseline2/PTSD(G)."
    )

    def add_arguments(self, parser):
        parser.add_argument("--ptsd", type=str, required=True, help="Checkpoint PTSD.")
        parser.add_argument("--tsvad", type=str, default="", help="Checkpoint TS-VAD (opcional).")
        parser.add_argument("--gender-baseline1", type=str, default="")
        parser.add_argument("--gender-baseline2", type=str, default="")
        parser.add_argument("--manifest", type=str, required=True, help="Manifest de evaluación.")
        parser.add_argument("--chunk", type=float, default=40.0)
        parser.add_argument("--enrollment-lengths", type=str, default="1,2,3")
        parser.add_argument("--collar", type=float, default=0.25)
        parser.add_argument("--threshold", type=float, default=0.5)
        parser.add_argument("--median-window", type=int, default=11)
        parser.add_argument("--per-clip", action="store_true")
        parser.add_argument("--dataset", type=str, default="")
        parser.add_argument("--out", type=str, required=True, help="Reporte JSON lines.")

    def handle(self, *args, **options):
        out_path = Path(options["out"])

        with guarded_run("benchmark", output_path=str(out_path)) as run:
            cfg = EvalConfig(
                chunk=options["chunk"],
                threshold=options["threshold"],
                median_window=options["median_window"],
                collar=options["collar"],
                per_clip=options["per_clip"],
                enrollment_lengths=_lengths(options["enrollment_lengths"]),
            )
            manifest = DatasetService.read_manifest(options["manifest"])
            dataset = options["dataset"] or manifest.path.parent.name
            stores: dict[str, ClipStore] = {}

            def store_for(model) -> ClipStore:
                key = model.frontend.cfg.config_hash()
                if key not in stores:
                    stores[key] = ClipStore.from_manifest(manifest, model.frontend)
                return stores[key]

            def load(path: str, expected_kind: tuple[str, ...]):
                model, checkpoint = CheckpointService.load_model(path)
                if checkpoint.system not in expected_kind:
                    raise ValidationError(
                        f"{path}: sistema {checkpoint.system}, se esperaba {' | '.join(expected_kind)}.",
                        code="config_mismatch",
                    )
                return model, checkpoint

            records = []
            hashes = {}

            model, checkpoint = load(options["ptsd"], (SystemKind.PTSD.value,))
            hashes["ptsd"] = checkpoint.meta.get("config_hash", "")
            result = ProtocolService.evaluate(model, SystemKind.PTSD, store_for(model), cfg)
            records.extend(ReportService.build_records(
                result, cfg, dataset=dataset, config_hash=hashes["ptsd"], system_label=SystemKind.PTSD.value,
            ))

            if options["tsvad"]:
                model, checkpoint = load(options["tsvad"], (SystemKind.TSVAD.value,))
                hashes["tsvad"] = checkpoint.meta.get("config_hash", "")
                store = store_for(model)
                for seconds in cfg.enrollment_lengths:
                    result = ProtocolService.evaluate(model, SystemKind.TSVAD, store, cfg, enrollment_seconds=seconds)
                    records.extend(ReportService.build_records(
                        result,
                        cfg,
                        dataset=dataset,
                        config_hash=hashes["tsvad"],
                        system_label=SystemKind.TSVAD.value,
                        metrics=(*THRESHOLD_METRICS, "der"),
                        extra={"enrollment_seconds": seconds},
                    ))

            for option, kind in (
                ("gender_baseline1", SystemKind.GENDER_BASELINE1.value),
                ("gender_baseline2", SystemKind.GENDER_BASELINE2.value),
            ):
                if not options[option]:
                    continue
                model, checkpoint = load(options[option], GENDER_SYSTEMS)
                hashes[kind] = checkpoint.meta.get("config_hash", "")
                result = ProtocolService.evaluate(model, checkpoint.system, store_for(model), cfg)
                records.extend(ReportService.build_records(
                    result,
                    cfg,
                    dataset=dataset,
                    config_hash=hashes[kind],
                    system_label=kind,
                    metrics=(*THRESHOLD_METRICS, "der"),
                ))

            ReportService.write_report(out_path, records)
            out_path.with_name(f"{out_path.stem}.run_config.json").write_text(
                json.dumps(
                    {
                        "checkpoints": {k: options[k] for k in ("ptsd", "tsvad", "gender_baseline1", "gender_baseline2")},
                        "config_hashes": hashes,
                        "manifest": str(manifest.path),
                        "eval": asdict(cfg),
                    },
                    sort_keys=True,
                    indent=2,
                ) + "\n",
                encoding="utf-8",
            )
            RunLogService.annotate(run, config_hash=hashes["ptsd"], config={"eval": asdict(cfg)}, metadata={"records": len(records)})

        self.stdout.write(ReportService.format_table(records))
        self.stdout.write(self.style.SUCCESS(f"OK: {len(records)} registros -> {out_path}"))
