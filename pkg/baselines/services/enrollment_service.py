# baselines/services/enrollment_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from django.core.exceptions import ValidationError
from torch import nn

from frontend.services.feature_service import FeatureService
from labels.services.label_service import GENDER_DESCRIPTORS
from labels.types import FRAME_RATE, Attribute, AudioClip, EventDescriptor, SpeakerActivity
from ptsd.network import EnrollmentBatch, PosteriorSet, PTSDModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnrollmentSpec:
    """Segmento limpio (un solo hablante) usado como prompt de TS-VAD."""
    clip_id: str
    onset: float
    offset: float
    speaker_id: str

    def __post_init__(self):
        if self.onset < 0 or self.offset - self.onset < 1.0 / FRAME_RATE - 1e-9:
            raise ValidationError(
                f"Enrolamiento {self.speaker_id} ({self.onset}, {self.offset}) más corto que un frame.",
                code="too_short",
            )

    @property
    def frames(self) -> tuple[int, int]:
        return int(round(self.onset * FRAME_RATE)), int(round(self.offset * FRAME_RATE))

    @property
    def descriptor(self) -> EventDescriptor:
        return EventDescriptor(Attribute.TIMESTAMP, self.frames[0], self.speaker_id)

    def check_solo(self, activity: SpeakerActivity) -> None:
        start, end = self.frames
        row = activity.row(self.speaker_id)[start:end]
        counts = activity.counts()[start:end]
        if row.size == 0 or not (row.all() and (counts == 1).all()):
            raise ValidationError(
                f"Enrolamiento {self.speaker_id} ({self.onset}, {self.offset}) no es habla de un solo hablante.",
                code="invalid_enrollment",
            )


def solo_runs(activity: SpeakerActivity, speaker_id: str) -> list[tuple[int, int]]:
    solo = (activity.row(speaker_id) == 1) & (activity.counts() == 1)
    edges = np.diff(np.concatenate(([0], solo.astype(np.int8), [0])))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def pick_enrollment(
    activity: SpeakerActivity,
    speaker_id: str,
    seconds: float,
    clip_id: str = "",
    rng: np.random.Generator | None = None,
) -> EnrollmentSpec | None:
    """
    Tramo solo de `seconds` del hablante. Sin rng: centrado en la corrida más
    larga (protocolo de evaluación). Si ninguna corrida alcanza, se usa la más
    larga completa; sin habla solitaria devuelve None.
    """
    runs = solo_runs(activity, speaker_id)
    if not runs:
        return None
    want = max(1, int(round(seconds * FRAME_RATE)))
    long_enough = [r for r in runs if r[1] - r[0] >= want]

    if long_enough and rng is not None:
        run_start, run_end = long_enough[int(rng.integers(len(long_enough)))]
        start = run_start + int(rng.integers(0, run_end - run_start - want + 1))
        end = start + want
    else:
        run_start, run_end = max(runs, key=lambda r: (r[1] - r[0], -r[0]))
        length = min(want, run_end - run_start)
        start = run_start + (run_end - run_start - length) // 2
        end = start + length
    return EnrollmentSpec(clip_id, round(start / FRAME_RATE, 6), round(end / FRAME_RATE, 6), speaker_id)


def _raw_of(model: nn.Module, source: AudioClip | np.ndarray) -> np.ndarray:
    if isinstance(source, AudioClip):
        return FeatureService.raw_features(source, model.frontend)
    return np.asarray(source, dtype=np.float32)


def _as_tensor(model: nn.Module, array: np.ndarray) -> torch.Tensor:
    weight = model.frontend.projection.weight
    return torch.as_tensor(array).to(dtype=weight.dtype, device=weight.device)


class EnrollmentService:

    @staticmethod
    def pooled_features(raw: np.ndarray, spec: EnrollmentSpec) -> np.ndarray:
        start, end = spec.frames
        if end > raw.shape[0]:
            raise ValidationError(
                f"Enrolamiento {spec.speaker_id} termina en el frame {end}, el clip tiene {raw.shape[0]}.",
                code="time_out_of_range",
            )
        return raw[start:end].mean(axis=0)

    @staticmethod
    def enrollment_batch(raw: np.ndarray, enrollments: Sequence[EnrollmentSpec]) -> EnrollmentBatch:
        if not enrollments:
            raise ValidationError("tsvad_forward requiere al menos un enrolamiento.", code="empty_prompts")
        pooled = np.stack([EnrollmentService.pooled_features(raw, e) for e in enrollments]).astype(np.float32)
        return EnrollmentBatch(
            pooled=torch.from_numpy(pooled).unsqueeze(0),
            valid=torch.ones(1, len(enrollments), dtype=torch.bool),
        )

    @staticmethod
    def enrollment_embedding(model: PTSDModel, source: AudioClip | np.ndarray, spec: EnrollmentSpec) -> torch.Tensor:
        """Vector D: media de features crudos del segmento -> proyección del frontend -> proyección de enrolamiento."""
        raw = _raw_of(model, source)
        batch = EnrollmentService.enrollment_batch(raw, [spec])
        with torch.no_grad():
            f_a = model.features(_as_tensor(model, raw).unsqueeze(0))
            return model.resolve_prompts(f_a, batch)[0, 0]

    @staticmethod
    def tsvad_forward(
        model: PTSDModel,
        source: AudioClip | np.ndarray,
        enrollments: Sequence[EnrollmentSpec],
        clip_id: str = "",
        pooled_from: np.ndarray | None = None,
    ) -> PosteriorSet:
        """
        Una fila por hablante enrolado. `pooled_from` permite tomar los
        enrolamientos de un audio distinto al evaluado (p. ej. el clip completo
        cuando se evalúa por chunks).
        """
        raw = _raw_of(model, source)
        batch = EnrollmentService.enrollment_batch(raw if pooled_from is None else pooled_from, enrollments)
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                probs = model(_as_tensor(model, raw).unsqueeze(0), batch)[0]
        finally:
            model.train(was_training)
        return PosteriorSet(
            descriptors=tuple(e.descriptor for e in enrollments),
            values=probs.to("cpu", torch.float64).numpy(),
            clip_id=clip_id or (source.clip_id if isinstance(source, AudioClip) else ""),
        )

    @staticmethod
    def gender_baseline_forward(model: nn.Module, source: AudioClip | np.ndarray, clip_id: str = "") -> PosteriorSet:
        """2×T (female, male), sin prompts."""
        raw = _raw_of(model, source)
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                probs = model(_as_tensor(model, raw).unsqueeze(0))[0]
        finally:
            model.train(was_training)
        return PosteriorSet(
            descriptors=GENDER_DESCRIPTORS,
            values=probs.to("cpu", torch.float64).numpy(),
            clip_id=clip_id or (source.clip_id if isinstance(source, AudioClip) else ""),
        )
