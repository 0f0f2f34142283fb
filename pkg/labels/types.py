# labels/types.py
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError
from django.db import models


FRAME_RATE = 25
FRAME_SHIFT = 1.0 / FRAME_RATE


def n_frames_for(duration: float, frame_rate: int = FRAME_RATE) -> int:
    """
    T = ceil(duration * frame_rate), tolerante al ruido de punto flotante
    (0.6 s * 25 debe dar 15, no 16).
    """
    return int(math.ceil(round(duration * frame_rate, 6)))


class Gender(models.TextChoices):
    FEMALE = "female", "Female"
    MALE = "male", "Male"


class Attribute(models.TextChoices):
    TIMESTAMP = "T", "Timestamped speaker"
    GENDER = "G", "Gender"
    COUNTER = "N", "Speaker counter"
    KEYNOTE = "K", "Keynote speaker"


class CounterClass(models.TextChoices):
    NON_SPEECH = "non-speech", "Non-speech"
    SINGLE = "single", "Single-speaker speech"
    OVERLAP = "overlap", "Overlapped speech"


KEYNOTE_VALUE = "keynote"

CATEGORICAL_VALUES: dict[str, tuple[str, ...]] = {
    "G": ("female", "male"),
    "N": ("non-speech", "single", "overlap"),
    "K": (KEYNOTE_VALUE,),
}


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    gender: str
    f0_base: float = 120.0
    formants: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.speaker_id:
            raise ValidationError("speaker_id es obligatorio.", code="invalid_profile")
        if self.gender not in Gender.values:
            raise ValidationError(f"Género inválido: {self.gender}", code="invalid_profile")
        if self.f0_base <= 0:
            raise ValidationError(f"f0 base debe ser > 0 ({self.f0_base}).", code="invalid_profile")


@dataclass(frozen=True)
class Segment:
    speaker_id: str
    onset: float
    offset: float

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class SegmentAnnotation:
    """
    Verdad de referencia "quién habló cuándo" para un clip.
    Todas las etiquetas por frame se derivan de aquí.
    """
    clip_id: str
    duration: float
    segments: tuple[Segment, ...] = ()

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(sorted({s.speaker_id for s in self.segments}))

    @property
    def n_frames(self) -> int:
        return n_frames_for(self.duration)

    def for_speaker(self, speaker_id: str) -> list[Segment]:
        return sorted((s for s in self.segments if s.speaker_id == speaker_id), key=lambda s: s.onset)

    def validate(self, tolerance: float = 1e-6) -> None:
        if self.duration <= 0:
            raise ValidationError(f"{self.clip_id}: duración inválida ({self.duration}).", code="invalid_segment")

        for seg in self.segments:
            if not (0.0 - tolerance <= seg.onset < seg.offset <= self.duration + tolerance):
                raise ValidationError(
                    f"{self.clip_id}: segmento fuera de rango [0, {self.duration}]: "
                    f"{seg.speaker_id} ({seg.onset}, {seg.offset})",
                    code="invalid_segment",
                )

        for speaker_id in self.speakers:
            own = self.for_speaker(speaker_id)
            for prev, nxt in zip(own, own[1:]):
                if nxt.onset < prev.offset - tolerance:
                    raise ValidationError(
                        f"{self.clip_id}: segmentos traslapados del mismo hablante {speaker_id} "
                        f"({prev.onset}, {prev.offset}) / ({nxt.onset}, {nxt.offset})",
                        code="invalid_segment",
                    )

    def crop(self, start: float, end: float, clip_id: str | None = None) -> "SegmentAnnotation":
        """Recorta la anotación a la ventana [start, end) re-referenciada a 0."""
        kept = []
        for seg in self.segments:
            on, off = max(seg.onset, start), min(seg.offset, end)
            if off > on:
                kept.append(Segment(seg.speaker_id, round(on - start, 6), round(off - start, 6)))
        return SegmentAnnotation(clip_id=clip_id or self.clip_id, duration=round(end - start, 6), segments=tuple(kept))


@dataclass(frozen=True)
class EventDescriptor:
    attribute: str
    value: int | str
    speaker_id: str | None = None

    def __post_init__(self):
        if self.attribute not in Attribute.values:
            raise ValidationError(f"Atributo inválido: {self.attribute}", code="invalid_descriptor")

        if self.attribute == Attribute.TIMESTAMP:
            if isinstance(self.value, bool) or not isinstance(self.value, (int, np.integer)) or self.value < 0:
                raise ValidationError(
                    f"El atributo T requiere un índice de frame >= 0, se recibió {self.value!r}.",
                    code="invalid_descriptor",
                )
        elif self.value not in CATEGORICAL_VALUES[self.attribute]:
            raise ValidationError(
                f"Valor {self.value!r} no es legal para el atributo {self.attribute}.",
                code="invalid_descriptor",
            )

    @property
    def key(self) -> tuple[str, int | str]:
        """Identidad del evento; speaker_id solo acompaña para el scoring."""
        return (str(self.attribute), int(self.value) if self.attribute == Attribute.TIMESTAMP else str(self.value))

    @property
    def label(self) -> str:
        if self.attribute == Attribute.TIMESTAMP:
            return f"T:{self.speaker_id or '?'}@{self.value}"
        return f"{self.attribute}:{self.value}"

    def check_frame(self, n_frames: int) -> None:
        if self.attribute == Attribute.TIMESTAMP and int(self.value) >= n_frames:
            raise ValidationError(
                f"Frame {self.value} fuera de rango [0, {n_frames}).",
                code="prompt_out_of_range",
            )


@dataclass(frozen=True)
class SpeakerActivity:
    """Matriz binaria S×T, una fila por hablante (speaker_ids ordenados)."""
    speaker_ids: tuple[str, ...]
    matrix: np.ndarray
    frame_rate: int = FRAME_RATE

    @property
    def n_frames(self) -> int:
        return int(self.matrix.shape[1])

    def row(self, speaker_id: str) -> np.ndarray:
        try:
            return self.matrix[self.speaker_ids.index(speaker_id)]
        except ValueError:
            raise ValidationError(f"Hablante desconocido: {speaker_id}", code="unknown_speaker")

    def window(self, start: int, end: int) -> "SpeakerActivity":
        return SpeakerActivity(self.speaker_ids, self.matrix[:, start:end].copy(), self.frame_rate)

    def counts(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


@dataclass(frozen=True)
class FrameLabelSet:
    """
    y ∈ {0,1}^{N×T}: una fila binaria por descriptor, en el orden de los prompts.
    """
    n_frames: int
    rows: tuple[tuple[EventDescriptor, np.ndarray], ...] = field(default_factory=tuple)
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        for desc, seq in self.rows:
            if seq.shape != (self.n_frames,):
                raise ValidationError(
                    f"Fila {desc.label}: longitud {seq.shape} != ({self.n_frames},).",
                    code="shape_mismatch",
                )
            if not np.isin(seq, (0, 1)).all():
                raise ValidationError(f"Fila {desc.label}: valores no binarios.", code="shape_mismatch")

    @property
    def descriptors(self) -> tuple[EventDescriptor, ...]:
        return tuple(desc for desc, _ in self.rows)

    def matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.n_frames), dtype=np.uint8)
        return np.stack([seq for _, seq in self.rows]).astype(np.uint8)

    def row(self, descriptor: EventDescriptor) -> np.ndarray:
        for desc, seq in self.rows:
            if desc.key == descriptor.key:
                return seq
        raise ValidationError(f"Descriptor sin fila: {descriptor.label}", code="descriptor_mismatch")

    def select(self, descriptors) -> "FrameLabelSet":
        return FrameLabelSet(self.n_frames, tuple((d, self.row(d)) for d in descriptors), self.frame_rate)


@dataclass(frozen=True)
class AudioClip:
    """Audio mono 16 kHz en float32, rango [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = 16000
    clip_id: str = ""

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def crop(self, start: float, end: float) -> "AudioClip":
        a, b = int(round(start * self.sample_rate)), int(round(end * self.sample_rate))
        return AudioClip(self.samples[a:b], self.sample_rate, self.clip_id)
