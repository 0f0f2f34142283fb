# ptsd/services/loss.py
from __future__ import annotations

import numpy as np
import torch
from django.core.exceptions import ValidationError

from labels.types import FrameLabelSet
from ptsd.network import PROB_EPS, PosteriorSet


def bce_loss(posteriors: PosteriorSet, labels: FrameLabelSet) -> float:
    """
    BCE por evento promediada sobre T, luego promedio sobre los N eventos.
    Las filas se emparejan por descriptor, no por posición.
    """
    if len(posteriors.descriptors) != len(labels.descriptors):
        raise ValidationError(
            f"{len(posteriors.descriptors)} posteriores vs {len(labels.descriptors)} filas de etiquetas.",
            code="descriptor_mismatch",
        )
    if posteriors.n_frames != labels.n_frames:
        raise ValidationError(
            f"T de posteriores ({posteriors.n_frames}) != T de etiquetas ({labels.n_frames}).",
            code="shape_mismatch",
        )
    if not posteriors.descriptors:
        raise ValidationError("No hay eventos que evaluar.", code="empty_prompts")

    per_event = []
    for idx, desc in enumerate(posteriors.descriptors):
        y = labels.row(desc).astype(np.float64)
        d = np.clip(posteriors.values[idx].astype(np.float64), PROB_EPS, 1.0 - PROB_EPS)
        per_event.append(-np.mean(y * np.log(d) + (1.0 - y) * np.log(1.0 - d)))
    return float(np.mean(per_event))


def masked_bce(
    probs: torch.Tensor,
    targets: torch.Tensor,
    frame_mask: torch.Tensor,
    query_mask: torch.Tensor,
) -> torch.Tensor:
    """
    Versión por lotes (B, N, T): los frames de relleno no entran en la media
    por evento y las filas de relleno no entran en la media entre eventos.
    """
    probs = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    targets = targets.to(probs.dtype)
    frames = frame_mask.to(probs.dtype).unsqueeze(1)  # (B, 1, T)
    events = query_mask.to(probs.dtype)               # (B, N)

    elementwise = -(targets * torch.log(probs) + (1.0 - targets) * torch.log(1.0 - probs))
    per_event = (elementwise * frames).sum(dim=-1) / frames.sum(dim=-1).clamp(min=1.0)
    return (per_event * events).sum() / events.sum().clamp(min=1.0)
