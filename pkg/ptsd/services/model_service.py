# ptsd/services/model_service.py
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch
from django.core.exceptions import ValidationError

from frontend.services.feature_service import FeatureService
from labels.types import AudioClip
from ptsd.network import PosteriorSet, PTSDModel
from ptsd.prompts import PromptBatch, PromptSpec

logger = logging.getLogger(__name__)


def _as_raw(model: PTSDModel, source: AudioClip | np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(source, AudioClip):
        source = FeatureService.raw_features(source, model.frontend)
    raw = torch.as_tensor(np.asarray(source) if not isinstance(source, torch.Tensor) else source)
    weight = model.frontend.projection.weight
    return raw.to(dtype=weight.dtype, device=weight.device)


class ModelService:
    """Entradas de un solo clip sobre PTSDModel (modo inferencia)."""

    @staticmethod
    def resolve_prompt(spec: PromptSpec, f_a: torch.Tensor, model: PTSDModel) -> torch.Tensor:
        """Vector de prompt p (D,) para un PromptSpec sobre F_a (T, D)."""
        spec.descriptor.check_frame(int(f_a.shape[0]))
        batch = PromptBatch.from_specs([[spec]], n_frames=[int(f_a.shape[0])])
        return model.resolve_prompts(f_a.unsqueeze(0), batch)[0, 0]

    @staticmethod
    def forward(
        model: PTSDModel,
        source: AudioClip | np.ndarray | torch.Tensor,
        specs: Sequence[PromptSpec],
        clip_id: str = "",
    ) -> PosteriorSet:
        """
        source: audio del clip o features crudos (T, raw_dim).
        Devuelve una fila por spec, en el mismo orden.
        """
        if not specs:
            raise ValidationError("forward requiere al menos un prompt.", code="empty_prompts")
        if isinstance(source, AudioClip):
            clip_id = clip_id or source.clip_id

        raw = _as_raw(model, source)
        n_frames = int(raw.shape[0])
        batch = PromptBatch.from_specs([list(specs)], n_frames=[n_frames])

        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                probs = model(raw.unsqueeze(0), batch)[0]
        finally:
            model.train(was_training)

        values = probs.detach().to("cpu", torch.float64).numpy()
        return PosteriorSet(descriptors=tuple(s.descriptor for s in specs), values=values, clip_id=clip_id)
