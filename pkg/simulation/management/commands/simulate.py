from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand

from runs.services.command_guard import guarded_run
from runs.services.run_log_service import RunLogService
from simulation.services.conversation_service import ConversationStats, load_utterance_pool
from simulation.services.dataset_service import VALID_N_SPEAKERS, DatasetService


class Command(BaseCommand):
    help = "Simula conversaciones multi-hablante (wav + rttm + manifest) de forma determinista."

    def add_arguments(self, parser):
        parser.add_argument("--n-speakers", type=int, required=True, help=f"Hablantes por clip, uno de {VALID_N_SPEAKERS}.")
        parser.add_argument("--clips", type=int, required=True, help="Número de clips.")
        parser.add_argument("--duration", type=float, default=60.0, help="Duración de cada clip en segundos.")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", type=str, default="", help="Directorio de salida. Default PTSD_DATA_DIR/sim<N>spk.")
        parser.add_argument("--workers", type=int, default=None, help="Procesos (0 = en serie). Default PTSD_NUM_WORKERS.")
        parser.add_argument("--pool", type=str, default="", help="Pool manifest de grabaciones reales (opcional).")
        parser.add_argument("--overlap-probability", type=float, default=None)
        parser.add_argument("--utterance-min", type=float, default=None)
        parser.add_argument("--utterance-max", type=float, default=None)

    def handle(self, *args, **options):
        workers = options["workers"]
        if workers is None:
            workers = int(getattr(settings, "PTSD_NUM_WORKERS", 0))
        out_dir = Path(options["out"] or Path(settings.PTSD_DATA_DIR) / f"sim{options['n_speakers']}spk")

        with guarded_run("simulate", seed=options["seed"], output_path=str(out_dir)) as run:
            overrides = {
                key: options[key]
                for key in ("overlap_probability", "utterance_min", "utterance_max")
                if options[key] is not None
            }
            stats = ConversationStats(**overrides)
            sample_rate = int(getattr(settings, "PTSD_SAMPLE_RATE", 16000))
            pool = load_utterance_pool(options["pool"], sample_rate=sample_rate) if options["pool"] else None

            config = {
                "n_speakers": options["n_speakers"],
                "clips": options["clips"],
                "duration": options["duration"],
                "seed": options["seed"],
                "sample_rate": sample_rate,
                "pool": options["pool"],
                "stats": {**asdict(stats), "turn_weights": dict(stats.turn_weights)},
            }
            payload = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
            config_hash = hashlib.sha256(payload).hexdigest()
            RunLogService.annotate(run, config_hash=config_hash, config=config)

            manifest = DatasetService.build_dataset(
                stats=stats,
                n_speakers=options["n_speakers"],
                n_clips=options["clips"],
                clip_duration=options["duration"],
                out_dir=out_dir,
                seed=options["seed"],
                sample_rate=sample_rate,
                workers=workers,
                pool=pool,
            )
            (out_dir / "run_config.json").write_text(
                json.dumps({**config, "config_hash": config_hash}, sort_keys=True, indent=2) + "\n",
                encoding="utf-8",
            )
            RunLogService.annotate(run, metadata={"records": len(manifest)})

        self.stdout.write(self.style.SUCCESS(f"OK: {len(manifest)} clips -> {manifest.path}"))
