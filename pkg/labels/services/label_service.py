# labels/services/label_service.py
from __future__ import annotations

import logging
from typing import Iterable, Mapping

import numpy as np
from django.core.exceptions import ValidationError

from labels.types import (
    FRAME_RATE,
    Attribute,
    CounterClass,
    EventDescriptor,
    FrameLabelSet,
    Gender,
    KEYNOTE_VALUE,
    SegmentAnnotation,
    SpeakerActivity,
    SpeakerProfile,
    n_frames_for,
)

logger = logging.getLogger(__name__)


COUNTER_DESCRIPTORS = (
    EventDescriptor(Attribute.COUNTER, CounterClass.NON_SPEECH),
    EventDescriptor(Attribute.COUNTER, CounterClass.SINGLE),
    EventDescriptor(Attribute.COUNTER, CounterClass.OVERLAP),
)
GENDER_DESCRIPTORS = (
    EventDescriptor(Attribute.GENDER, Gender.FEMALE),
    EventDescriptor(Attribute.GENDER, Gender.MALE),
)
KEYNOTE_DESCRIPTOR = EventDescriptor(Attribute.KEYNOTE, KEYNOTE_VALUE)


def _to_us(seconds: float) -> int:
    return int(round(seconds * 1_000_000))


class LabelService:
    """
    Álgebra de etiquetas: anotación por segmentos -> matrices binarias por frame.
    Funciones puras, sin estado.
    """

    @staticmethod
    def segments_to_activity(
        ann: SegmentAnnotation,
        frame_rate: int = FRAME_RATE,
        speaker_ids: Iterable[str] | None = None,
    ) -> SpeakerActivity:
        """
        Frame t activo para s sii su centro (t + 0.5)/fr cae en [onset, offset)
        de algún segmento de s. Se compara en microsegundos enteros para que el
        ida-y-vuelta por RTTM no dependa del redondeo.
        """
        if frame_rate != FRAME_RATE:
            raise ValidationError(f"frame_rate debe ser {FRAME_RATE}.", code="invalid_frame_rate")
        ann.validate()

        ids = tuple(sorted(set(speaker_ids or ()) | set(ann.speakers)))
        n_frames = n_frames_for(ann.duration, frame_rate)
        centers = np.array([_to_us((t + 0.5) / frame_rate) for t in range(n_frames)], dtype=np.int64)

        matrix = np.zeros((len(ids), n_frames), dtype=np.uint8)
        for seg in ann.segments:
            on, off = _to_us(seg.onset), _to_us(seg.offset)
            matrix[ids.index(seg.speaker_id)] |= ((centers >= on) & (centers < off)).astype(np.uint8)

        return SpeakerActivity(speaker_ids=ids, matrix=matrix, frame_rate=frame_rate)

    @staticmethod
    def derive_counter_labels(activity: np.ndarray) -> np.ndarray:
        """3×T one-hot: filas (non-speech, single, overlap) para k=0, k=1, k>=2."""
        activity = np.asarray(activity)
        counts = activity.sum(axis=0) if activity.size else np.zeros(activity.shape[-1], dtype=np.int64)
        return np.stack([counts == 0, counts == 1, counts >= 2]).astype(np.uint8)

    @staticmethod
    def derive_gender_labels(activity: SpeakerActivity, profiles: Mapping[str, SpeakerProfile]) -> np.ndarray:
        """2×T (female, male): OR de las filas de actividad de cada género."""
        out = np.zeros((2, activity.n_frames), dtype=np.uint8)
        for idx, speaker_id in enumerate(activity.speaker_ids):
            profile = profiles.get(speaker_id)
            if profile is None:
                raise ValidationError(f"Hablante sin perfil: {speaker_id}", code="unknown_speaker")
            target = 0 if profile.gender == Gender.FEMALE else 1
            out[target] |= activity.matrix[idx]
        return out

    @staticmethod
    def derive_keynote_labels(activity: SpeakerActivity) -> tuple[np.ndarray, str]:
        """
        Keynote = hablante con más frames activos en esta ventana.
        Empate -> speaker_id lexicográficamente menor (speaker_ids ya vienen ordenados).
        """
        totals = activity.matrix.sum(axis=1) if activity.speaker_ids else np.zeros(0)
        if totals.size == 0 or totals.max() == 0:
            raise ValidationError("no keynote definable", code="no_keynote")

        order = sorted(range(len(activity.speaker_ids)), key=lambda i: (-int(totals[i]), activity.speaker_ids[i]))
        winner = order[0]
        return activity.matrix[winner].copy(), activity.speaker_ids[winner]

    @staticmethod
    def frames_to_segments(binary, frame_rate: int = FRAME_RATE, min_duration: float = 0.0) -> list[tuple[float, float]]:
        """Corridas maximales de 1s -> (inicio, fin) en segundos; se descartan las cortas."""
        seq = np.asarray(binary, dtype=np.int8).ravel()
        if seq.size == 0:
            return []

        edges = np.diff(np.concatenate(([0], seq, [0])))
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)

        segments = []
        for start, end in zip(starts, ends):
            if (end - start) / frame_rate + 1e-9 < min_duration:
                continue
            segments.append((round(start / frame_rate, 6), round(end / frame_rate, 6)))
        return segments

    @staticmethod
    def solo_frames(activity: SpeakerActivity) -> dict[str, np.ndarray]:
        """Frames donde cada hablante es el único activo (candidatos a ancla T)."""
        single = activity.counts() == 1
        return {
            speaker_id: np.flatnonzero(single & (activity.matrix[idx] == 1))
            for idx, speaker_id in enumerate(activity.speaker_ids)
        }

    @staticmethod
    def assemble_label_set(
        activity: SpeakerActivity,
        profiles: Mapping[str, SpeakerProfile],
        anchors: Mapping[str, int] | None = None,
        include_keynote: bool = True,
    ) -> FrameLabelSet:
        """
        Construye el FrameLabelSet completo en orden canónico:
        T (uno por ancla) + G (female, male) + N (non-speech, single, overlap) + K.
        Si la ventana no tiene voz, K se omite.
        """
        rows: list[tuple[EventDescriptor, np.ndarray]] = []

        for speaker_id, frame in (anchors or {}).items():
            desc = EventDescriptor(Attribute.TIMESTAMP, int(frame), speaker_id)
            desc.check_frame(activity.n_frames)
            rows.append((desc, activity.row(speaker_id).astype(np.uint8)))

        gender = LabelService.derive_gender_labels(activity, profiles)
        rows.extend(zip(GENDER_DESCRIPTORS, gender))

        counter = LabelService.derive_counter_labels(activity.matrix)
        rows.extend(zip(COUNTER_DESCRIPTORS, counter))

        if include_keynote:
            try:
                keynote_row, keynote_id = LabelService.derive_keynote_labels(activity)
            except ValidationError:
                logger.debug("ventana sin voz, se omite la fila keynote")
            else:
                rows.append((EventDescriptor(Attribute.KEYNOTE, KEYNOTE_VALUE, keynote_id), keynote_row))

        return FrameLabelSet(n_frames=activity.n_frames, rows=tuple(rows), frame_rate=activity.frame_rate)
