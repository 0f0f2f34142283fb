from __future__ import annotations

from django.db import models


class RunStatus(models.TextChoices):
    PENDING = "PENDING", "Pending"
    SUCCEEDED = "SUCCEEDED", "Succeeded"
    FAILED = "FAILED", "Failed"


class RunRecord(models.Model):
    """
    Bitácora de corridas (procedencia):
    - Que comando (command)
    - Con que config (config_hash, seed, config)
    - Donde quedo (output_path)
    - Como termino (status, error)
    """
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    command = models.CharField(max_length=40)
    config_hash = models.CharField(max_length=64, blank=True, default="")
    seed = models.BigIntegerField(null=True, blank=True)

    status = models.CharField(
        max_length=16,
        choices=RunStatus.choices,
        default=RunStatus.PENDING,
    )
    output_path = models.CharField(max_length=512, blank=True, default="")
    config = models.JSONField(blank=True, default=dict)
    metadata = models.JSONField(blank=True, default=dict)
    error = models.TextField(blank=True, default="")

    class Meta:
        indexes = [
            models.Index(fields=["command", "created_at"], name="runs_runrec_command_5b1e0a_idx"),
            models.Index(fields=["config_hash", "created_at"], name="runs_runrec_config__9d2c41_idx"),
            models.Index(fields=["status", "created_at"], name="runs_runrec_status_7f3a82_idx"),
        ]
        ordering = ["-created_at"]

    def __str__(self) -> str:
        return f"{self.created_at} {self.command} {self.status} {self.config_hash[:12]}"


class MetricRecord(models.Model):
    """Una fila por validación de época (espejo de metrics.jsonl)."""
    created_at = models.DateTimeField(auto_now_add=True)

    run = models.ForeignKey(RunRecord, on_delete=models.CASCADE, related_name="metrics")
    epoch = models.PositiveIntegerField()
    lr = models.FloatField()
    loss = models.FloatField(null=True, blank=True)
    metrics = models.JSONField(blank=True, default=dict)

    class Meta:
        indexes = [
            models.Index(fields=["run", "epoch"], name="runs_metric_run_id_2e6c1d_idx"),
        ]
        constraints = [
            models.UniqueConstraint(fields=["run", "epoch"], name="uq_metric_run_epoch"),
        ]
        ordering = ["run", "epoch"]
