# training/services/schedule.py
from __future__ import annotations

from dataclasses import dataclass

from django.core.exceptions import ValidationError

from ptsd.systems import SystemKind


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.95
    batch_size: int = 4
    epochs: int = 30
    steps_per_epoch: int = 50
    chunk_min: float = 20.0
    chunk_max: float = 60.0
    eval_chunk: float = 40.0
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_prompts: int = 0  # 0 = todos los eventos disponibles
    system: str = SystemKind.PTSD.value
    workers: int = 0
    enrollment_min: float = 1.0
    enrollment_max: float = 3.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValidationError("train.lr0 debe ser > 0.", code="invalid_config")
        if not 0 < self.decay <= 1:
            raise ValidationError("train.decay debe estar en (0, 1].", code="invalid_config")
        if not 0 < self.chunk_min <= self.chunk_max:
            raise ValidationError(
                f"Rango de chunk inválido [{self.chunk_min}, {self.chunk_max}].",
                code="invalid_config",
            )
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 0:
            raise ValidationError("batch_size y steps_per_epoch >= 1, epochs >= 0.", code="invalid_config")
        if self.max_prompts < 0 or self.workers < 0:
            raise ValidationError("max_prompts y workers deben ser >= 0.", code="invalid_config")
        if self.system not in SystemKind.values:
            raise ValidationError(f"train.system desconocido: {self.system}", code="invalid_config")
        if not 0 < self.enrollment_min <= self.enrollment_max:
            raise ValidationError("Rango de enrolamiento inválido.", code="invalid_config")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """lr0 · decay^epoch (5 % menos por epoch con los valores por defecto)."""
    if epoch < 0:
        raise ValidationError(f"epoch debe ser >= 0, se recibió {epoch}.", code="invalid_config")
    return cfg.lr0 * cfg.decay ** epoch
