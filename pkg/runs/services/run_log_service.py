from __future__ import annotations

import logging
from typing import Any

from django.db import transaction
from django.utils import timezone

from runs.models import MetricRecord, RunRecord, RunStatus

logger = logging.getLogger(__name__)


class RunLogService:
    @staticmethod
    @transaction.atomic
    def start(
        *,
        command: str,
        config_hash: str = "",
        seed: int | None = None,
        config: dict[str, Any] | None = None,
        output_path: str = "",
        metadata: dict[str, Any] | None = None,
    ) -> RunRecord:
        run = RunRecord.objects.create(
            command=command,
            config_hash=config_hash or "",
            seed=seed,
            config=config or {},
            output_path=str(output_path or ""),
            metadata=metadata or {},
        )
        logger.info("run=%s command=%s config_hash=%s iniciado", run.pk, command, config_hash[:12])
        return run

    @staticmethod
    @transaction.atomic
    def annotate(
        run: RunRecord | None,
        *,
        config_hash: str | None = None,
        seed: int | None = None,
        config: dict[str, Any] | None = None,
        output_path: str | None = None,
        metadata: dict[str, Any] | None = None,
    ) -> RunRecord | None:
        """Completa la procedencia cuando se conoce después de start()."""
        if run is None:
            return None
        if config_hash is not None:
            run.config_hash = config_hash
        if seed is not None:
            run.seed = seed
        if config is not None:
            run.config = config
        if output_path is not None:
            run.output_path = str(output_path)
        if metadata:
            run.metadata = {**run.metadata, **metadata}
        run.save(update_fields=["config_hash", "seed", "config", "output_path", "metadata"])
        return run

    @staticmethod
    @transaction.atomic
    def finish(run: RunRecord | None, *, metadata: dict[str, Any] | None = None) -> RunRecord | None:
        if run is None:
            return None
        run.status = RunStatus.SUCCEEDED
        run.finished_at = timezone.now()
        if metadata:
            run.metadata = {**run.metadata, **metadata}
        run.save(update_fields=["status", "finished_at", "metadata"])
        return run

    @staticmethod
    @transaction.atomic
    def fail(run: RunRecord | None, error: str) -> RunRecord | None:
        if run is None:
            return None
        run.status = RunStatus.FAILED
        run.finished_at = timezone.now()
        run.error = error
        run.save(update_fields=["status", "finished_at", "error"])
        logger.warning("run=%s command=%s falló: %s", run.pk, run.command, error)
        return run

    @staticmethod
    @transaction.atomic
    def record_metric(
        run: RunRecord | None,
        *,
        epoch: int,
        lr: float,
        loss: float | None,
        metrics: dict[str, Any],
    ) -> MetricRecord | None:
        if run is None:
            return None
        record, _ = MetricRecord.objects.update_or_create(
            run=run,
            epoch=epoch,
            defaults={"lr": lr, "loss": loss, "metrics": metrics},
        )
        return record
