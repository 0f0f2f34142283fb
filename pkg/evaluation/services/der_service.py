# evaluation/services/der_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy import optimize

from labels.types import SegmentAnnotation

logger = logging.getLogger(__name__)

SCORING_RATE = 100  # frames/s de la rejilla interna
DURATION_TOLERANCE = 0.04


@dataclass(frozen=True)
class DerResult:
    der: float
    miss: float
    false_alarm: float
    speaker_confusion: float
    total_seconds: float
    mapping: tuple[tuple[str, str], ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {
            "der": self.der,
            "miss": self.miss,
            "false_alarm": self.false_alarm,
            "speaker_confusion": self.speaker_confusion,
            "total_seconds": self.total_seconds,
        }


@dataclass(frozen=True)
class DerCounts:
    """Conteos en frames; se suman entre clips antes de normalizar."""
    miss: int = 0
    false_alarm: int = 0
    confusion: int = 0
    total: int = 0

    def __add__(self, other: "DerCounts") -> "DerCounts":
        return DerCounts(
            self.miss + other.miss,
            self.false_alarm + other.false_alarm,
            self.confusion + other.confusion,
            self.total + other.total,
        )

    def result(self, mapping: tuple[tuple[str, str], ...] = ()) -> DerResult:
        if self.total == 0:
            raise ValidationError("DER indefinido: la referencia no tiene voz puntuable.", code="empty_reference")
        miss = self.miss / self.total
        false_alarm = self.false_alarm / self.total
        confusion = self.confusion / self.total
        return DerResult(
            der=miss + false_alarm + confusion,
            miss=miss,
            false_alarm=false_alarm,
            speaker_confusion=confusion,
            total_seconds=self.total / SCORING_RATE,
            mapping=mapping,
        )


def _us(seconds: float) -> int:
    return int(round(seconds * 1_000_000))


def _grid(ann: SegmentAnnotation, n_frames: int) -> tuple[tuple[str, ...], np.ndarray]:
    speakers = ann.speakers
    centers = (np.arange(n_frames, dtype=np.int64) * 2 + 1) * (1_000_000 // (2 * SCORING_RATE))
    matrix = np.zeros((len(speakers), n_frames), dtype=bool)
    for seg in ann.segments:
        row = speakers.index(seg.speaker_id)
        matrix[row] |= (centers >= _us(seg.onset)) & (centers < _us(seg.offset))
    return speakers, matrix


def _scored_mask(ref: SegmentAnnotation, ref_matrix: np.ndarray, collar: float, score_overlap: bool) -> np.ndarray:
    n_frames = ref_matrix.shape[1]
    centers = (np.arange(n_frames, dtype=np.int64) * 2 + 1) * (1_000_000 // (2 * SCORING_RATE))
    scored = np.ones(n_frames, dtype=bool)
    if collar > 0:
        width = _us(collar)
        for seg in ref.segments:
            for boundary in (_us(seg.onset), _us(seg.offset)):
                scored &= ~((centers >= boundary - width) & (centers < boundary + width))
    if not score_overlap:
        scored &= ref_matrix.sum(axis=0) < 2
    return scored


class DerService:

    @staticmethod
    def der_counts(
        reference: SegmentAnnotation,
        hypothesis: SegmentAnnotation,
        collar: float = 0.25,
        score_overlap: bool = True,
    ) -> tuple[DerCounts, tuple[tuple[str, str], ...]]:
        if collar < 0:
            raise ValidationError("collar debe ser >= 0.", code="invalid_config")
        if abs(reference.duration - hypothesis.duration) > DURATION_TOLERANCE + 1e-9:
            raise ValidationError(
                f"{reference.clip_id}: duración de referencia {reference.duration} s vs hipótesis {hypothesis.duration} s.",
                code="duration_mismatch",
            )

        n_frames = int(np.ceil(round(reference.duration * SCORING_RATE, 6)))
        ref_ids, ref = _grid(reference, n_frames)
        hyp_ids, hyp = _grid(hypothesis, n_frames)
        scored = _scored_mask(reference, ref, collar, score_overlap)
        ref, hyp = ref[:, scored], hyp[:, scored]

        mapping: tuple[tuple[str, str], ...] = ()
        correct = np.zeros(ref.shape[1], dtype=np.int64)
        if ref_ids and hyp_ids:
            overlap = ref.astype(np.int64) @ hyp.T.astype(np.int64)
            rows, cols = optimize.linear_sum_assignment(overlap, maximize=True)
            mapping = tuple((ref_ids[r], hyp_ids[c]) for r, c in zip(rows, cols))
            for r, c in zip(rows, cols):
                correct += ref[r] & hyp[c]

        n_ref = ref.sum(axis=0).astype(np.int64)
        n_hyp = hyp.sum(axis=0).astype(np.int64)
        counts = DerCounts(
            miss=int(np.maximum(n_ref - n_hyp, 0).sum()),
            false_alarm=int(np.maximum(n_hyp - n_ref, 0).sum()),
            confusion=int((np.minimum(n_ref, n_hyp) - correct).sum()),
            total=int(n_ref.sum()),
        )
        return counts, mapping

    @staticmethod
    def der(
        reference: SegmentAnnotation,
        hypothesis: SegmentAnnotation,
        collar: float = 0.25,
        score_overlap: bool = True,
    ) -> DerResult:
        counts, mapping = DerService.der_counts(reference, hypothesis, collar, score_overlap)
        result = counts.result(mapping)
        logger.debug("clip=%s der=%.4f", reference.clip_id, result.der)
        return result
