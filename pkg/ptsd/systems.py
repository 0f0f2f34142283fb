# ptsd/systems.py
from __future__ import annotations

from dataclasses import asdict, replace

from django.core.exceptions import ValidationError
from django.db import models
from torch import nn

from baselines.network import GenderBaseline1, GenderBaseline2
from frontend.services.feature_service import FrontendConfig
from labels.types import FRAME_RATE
from ptsd.network import ModelConfig, PromptSource, PTSDModel


class SystemKind(models.TextChoices):
    PTSD = "ptsd", "PTSD"
    TSVAD = "tsvad", "Modified TS-VAD"
    GENDER_BASELINE1 = "gender_baseline1", "Gender baseline 1 (conv)"
    GENDER_BASELINE2 = "gender_baseline2", "Gender baseline 2 (transformer)"


PROMPTED_SYSTEMS = (SystemKind.PTSD.value, SystemKind.TSVAD.value)
GENDER_SYSTEMS = (SystemKind.GENDER_BASELINE1.value, SystemKind.GENDER_BASELINE2.value)


def model_config_for(system: str, cfg: ModelConfig) -> ModelConfig:
    """El prompt_source lo fija el sistema; el resto de la config es compartida."""
    if system == SystemKind.TSVAD:
        return replace(cfg, prompt_source=PromptSource.ENROLLMENT)
    return replace(cfg, prompt_source=PromptSource.TABLE)


def system_config(system: str, frontend_cfg: FrontendConfig, cfg: ModelConfig) -> dict:
    """Bloque de config que va en la cabecera del checkpoint."""
    return {
        "system": str(system),
        "frame_rate": FRAME_RATE,
        "frontend": asdict(frontend_cfg),
        "model": asdict(model_config_for(system, cfg)),
    }


def build_system(system: str, frontend_cfg: FrontendConfig, cfg: ModelConfig) -> nn.Module:
    if system not in SystemKind.values:
        raise ValidationError(f"Sistema desconocido: {system}", code="invalid_config")
    cfg = model_config_for(system, cfg)
    if system in PROMPTED_SYSTEMS:
        return PTSDModel(frontend_cfg, cfg)
    if system == SystemKind.GENDER_BASELINE1:
        return GenderBaseline1(frontend_cfg, cfg)
    return GenderBaseline2(frontend_cfg, cfg)


def system_from_config(config: dict) -> nn.Module:
    frontend_cfg = FrontendConfig(**config["frontend"])
    cfg = ModelConfig(**config["model"])
    return build_system(config["system"], frontend_cfg, cfg)
