from __future__ import annotations

import hashlib
import json
from pathlib import Path

import soundfile as sf
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand

from baselines.services.enrollment_service import pick_enrollment
from evaluation.services.inference_service import (
    MISSING_ANCHOR_ERROR,
    MISSING_ANCHOR_FLOOR,
    InferenceService,
    resolve_queries,
    write_score_dump,
)
from frontend.services.feature_service import FeatureService
from labels.types import AudioClip
from ptsd.prompts import parse_prompt_lines
from ptsd.services.checkpoint_service import CheckpointService
from ptsd.systems import GENDER_SYSTEMS, SystemKind
from runs.services.command_guard import guarded_run
from runs.services.run_log_service import RunLogService
from simulation.services.dataset_service import DatasetService
from training.services.sampler_service import ClipStore


def checkpoint_hash(checkpoint) -> str:
    if checkpoint.meta.get("config_hash"):
        return str(checkpoint.meta["config_hash"])
    payload = json.dumps(checkpoint.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


class Command(BaseCommand):
    help = "Inferencia por chunks: checkpoint + archivo de prompts -> score dump (posteriores a 25 fps)."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", type=str, required=True)
        parser.add_argument("--prompts", type=str, default="", help="Una línea por prompt: T <clip> <seg> | G female | N overlap | K")
        parser.add_argument("--manifest", type=str, default="", help="Manifest de clips (con referencia para re-anclar T).")
        parser.add_argument("--audio", nargs="*", default=[], help="Wavs sueltos (clip_id = nombre de archivo).")
        parser.add_argument("--chunk", type=float, default=40.0, help="Segundos por chunk (<= 0: clip completo).")
        parser.add_argument(
            "--missing-anchor",
            type=str,
            default=MISSING_ANCHOR_ERROR,
            choices=[MISSING_ANCHOR_ERROR, MISSING_ANCHOR_FLOOR],
        )
        parser.add_argument("--enrollment-seconds", type=float, default=3.0, help="Solo TS-VAD.")
        parser.add_argument("--out", type=str, required=True, help="Ruta del score dump.")

    def _clips(self, options, model) -> list[tuple[str, object, object]]:
        """(clip_id, features crudos, actividad de referencia o None)."""
        clips = []
        if options["manifest"]:
            store = ClipStore.from_manifest(DatasetService.read_manifest(options["manifest"]), model.frontend)
            clips.extend((c.clip_id, c.raw, c.activity) for c in store.clips)
        for wav in options["audio"]:
            try:
                samples, sr = sf.read(str(wav), dtype="float32", always_2d=False)
            except RuntimeError as ex:
                raise ValidationError(f"No se pudo leer {wav}: {ex}", code="missing_file")
            audio = AudioClip(samples=samples, sample_rate=sr, clip_id=Path(wav).stem)
            clips.append((audio.clip_id, FeatureService.raw_features(audio, model.frontend), None))
        if not clips:
            raise ValidationError("Se requiere --manifest o --audio.", code="missing_input")
        return clips

    def handle(self, *args, **options):
        out_path = Path(options["out"])

        with guarded_run("infer", output_path=str(out_path)) as run:
            model, checkpoint = CheckpointService.load_model(options["checkpoint"])
            system = checkpoint.system
            config_hash = checkpoint_hash(checkpoint)
            RunLogService.annotate(
                run,
                config_hash=config_hash,
                config=checkpoint.config,
                metadata={"checkpoint": options["checkpoint"], "chunk": options["chunk"]},
            )

            queries = []
            if system not in GENDER_SYSTEMS and system != SystemKind.TSVAD:
                if not options["prompts"]:
                    raise ValidationError("PTSD requiere --prompts.", code="missing_input")
                path = Path(options["prompts"])
                try:
                    lines = path.read_text(encoding="utf-8").splitlines()
                except OSError as ex:
                    raise ValidationError(f"No se pudo leer {path}: {ex}", code="missing_file")
                queries = parse_prompt_lines(lines, source=str(path))

            clips = self._clips(options, model)
            known = {clip_id for clip_id, _, _ in clips}
            unknown = sorted({q.clip_id for q in queries if q.clip_id} - known)
            if unknown:
                raise ValidationError(f"Prompts T para clips ausentes: {', '.join(unknown)}", code="unknown_clip")

            posteriors = []
            for clip_id, raw, activity in clips:
                if system in GENDER_SYSTEMS:
                    posteriors.append(InferenceService.chunked_gender(model, raw, options["chunk"], clip_id))
                    continue
                if system == SystemKind.TSVAD:
                    if activity is None:
                        raise ValidationError("TS-VAD requiere --manifest para elegir enrolamientos.", code="missing_input")
                    enrollments = [
                        spec for spec in (
                            pick_enrollment(activity, s, options["enrollment_seconds"], clip_id)
                            for s in activity.speaker_ids
                        ) if spec is not None
                    ]
                    if not enrollments:
                        raise ValidationError(f"{clip_id}: ningún hablante tiene habla solitaria.", code="no_enrollment")
                    posteriors.append(InferenceService.chunked_tsvad(model, raw, enrollments, options["chunk"], clip_id))
                    continue

                specs = resolve_queries(queries, clip_id, raw.shape[0], activity)
                if not specs:
                    self.stdout.write(self.style.WARNING(f"{clip_id}: sin prompts, se omite."))
                    continue
                posteriors.append(InferenceService.chunked_infer(
                    model,
                    raw,
                    specs,
                    chunk=options["chunk"],
                    reference=activity,
                    missing_anchor=options["missing_anchor"],
                    clip_id=clip_id,
                ))

            write_score_dump(out_path, posteriors, config_hash=config_hash, chunk=options["chunk"], system=system)
            out_path.with_name(f"{out_path.stem}.run_config.json").write_text(
                json.dumps(
                    {
                        "checkpoint": str(options["checkpoint"]),
                        "config": checkpoint.config,
                        "config_hash": config_hash,
                        "run_config": checkpoint.meta.get("run_config"),
                        "chunk": options["chunk"],
                        "missing_anchor": options["missing_anchor"],
                    },
                    sort_keys=True,
                    indent=2,
                ) + "\n",
                encoding="utf-8",
            )
            RunLogService.annotate(run, metadata={"clips": len(posteriors)})

        self.stdout.write(self.style.SUCCESS(f"OK: system={system} clips={len(posteriors)} -> {out_path}"))
