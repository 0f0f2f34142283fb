# evaluation/services/protocol_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from django.core.exceptions import ValidationError
from torch import nn

from baselines.services.enrollment_service import pick_enrollment
from evaluation.services.der_service import DerCounts, DerService
from evaluation.services.inference_service import (
    MISSING_ANCHOR_FLOOR,
    InferenceService,
    chunk_bounds,
    speaker_at_anchor,
)
from evaluation.services.metrics import (
    ScoredFrames,
    binarize,
    binarize_segments,
    estimate_speaker_count,
    osd_precision_recall,
    threshold_metrics,
)
from labels.services.label_service import COUNTER_DESCRIPTORS, GENDER_DESCRIPTORS, KEYNOTE_DESCRIPTOR, LabelService
from labels.types import (
    FRAME_RATE,
    Attribute,
    CounterClass,
    EventDescriptor,
    FrameLabelSet,
    Segment,
    SegmentAnnotation,
    SpeakerActivity,
    SpeakerProfile,
)
from ptsd.network import PosteriorSet
from ptsd.prompts import PromptSpec
from ptsd.systems import GENDER_SYSTEMS, SystemKind
from training.services.sampler_service import ClipData, ClipStore

logger = logging.getLogger(__name__)

ATTRIBUTE_ORDER = (Attribute.TIMESTAMP.value, Attribute.GENDER.value, Attribute.COUNTER.value, Attribute.KEYNOTE.value)
OVERLAP_DESCRIPTOR = EventDescriptor(Attribute.COUNTER, CounterClass.OVERLAP)


@dataclass(frozen=True)
class EvalConfig:
    chunk: float = 40.0
    threshold: float = 0.5
    median_window: int = 11
    collar: float = 0.25
    score_overlap: bool = True
    per_clip: bool = False
    enrollment_lengths: tuple[float, ...] = (1.0, 2.0, 3.0)

    def __post_init__(self):
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValidationError(
                f"eval.median_window debe ser impar, se recibió {self.median_window}.",
                code="even_window",
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("eval.threshold debe estar en (0, 1).", code="invalid_config")
        if self.collar < 0:
            raise ValidationError("eval.collar debe ser >= 0.", code="invalid_config")
        if not self.enrollment_lengths or any(s <= 0 for s in self.enrollment_lengths):
            raise ValidationError("eval.enrollment_lengths debe tener valores > 0.", code="invalid_config")
        object.__setattr__(self, "enrollment_lengths", tuple(float(s) for s in self.enrollment_lengths))


@dataclass(frozen=True)
class ClipOutcome:
    clip_id: str
    posteriors: PosteriorSet
    labels: FrameLabelSet
    reference: SegmentAnnotation


def protocol_specs(activity: SpeakerActivity) -> list[PromptSpec]:
    """
    Prompts deterministas de evaluación: ancla T = frame solitario central de
    cada hablante en el clip completo, más G, N y K.
    """
    specs = []
    for speaker_id, frames in LabelService.solo_frames(activity).items():
        if frames.size:
            specs.append(PromptSpec.timestamp(int(frames[frames.size // 2]), speaker_id))
    specs.extend(PromptSpec(d.attribute, d.value) for d in (*GENDER_DESCRIPTORS, *COUNTER_DESCRIPTORS, KEYNOTE_DESCRIPTOR))
    return specs


def reference_labels(
    activity: SpeakerActivity,
    profiles: dict[str, SpeakerProfile],
    descriptors: Sequence[EventDescriptor],
    chunk: float,
) -> FrameLabelSet:
    """
    Etiquetas sobre el clip completo para cada descriptor. Las filas T siguen
    al hablante del ancla; keynote se recalcula por chunk.
    """
    gender = dict(zip((d.key for d in GENDER_DESCRIPTORS), LabelService.derive_gender_labels(activity, profiles)))
    counter = dict(zip((d.key for d in COUNTER_DESCRIPTORS), LabelService.derive_counter_labels(activity.matrix)))

    keynote = np.zeros(activity.n_frames, dtype=np.uint8)
    for start, end in chunk_bounds(activity.n_frames, chunk):
        try:
            row, _ = LabelService.derive_keynote_labels(activity.window(start, end))
        except ValidationError:
            continue
        keynote[start:end] = row

    rows = []
    for desc in descriptors:
        if desc.attribute == Attribute.TIMESTAMP:
            speaker_id = desc.speaker_id or speaker_at_anchor(activity, int(desc.value))
            if speaker_id is None:
                raise ValidationError(
                    f"Nadie habla solo en el ancla T {int(desc.value) / FRAME_RATE:.2f} s.",
                    code="anchor_unresolvable",
                )
            rows.append((EventDescriptor(desc.attribute, desc.value, speaker_id), activity.row(speaker_id).astype(np.uint8)))
        elif desc.attribute == Attribute.KEYNOTE:
            rows.append((desc, keynote.copy()))
        elif desc.attribute == Attribute.GENDER:
            rows.append((desc, gender[desc.key].astype(np.uint8)))
        else:
            rows.append((desc, counter[desc.key].astype(np.uint8)))
    return FrameLabelSet(activity.n_frames, tuple(rows))


def hypothesis_from_posteriors(
    posteriors: PosteriorSet,
    labels: FrameLabelSet,
    duration: float,
    threshold: float,
    median_window: int,
) -> SegmentAnnotation:
    """Hipótesis de diarización: una fila T por hablante, binarizada a segmentos."""
    segments = []
    for desc, _ in labels.rows:
        if desc.attribute != Attribute.TIMESTAMP:
            continue
        for onset, offset in binarize_segments(posteriors.row(desc), threshold, median_window):
            segments.append(Segment(f"hyp_{desc.speaker_id}", onset, min(offset, duration)))
    return SegmentAnnotation(posteriors.clip_id, duration, tuple(s for s in segments if s.offset > s.onset))


@dataclass(frozen=True)
class EvaluationResult:
    system: str
    outcomes: tuple[ClipOutcome, ...]

    def scored(self, attribute: str, value: str | None = None, outcomes: Sequence[ClipOutcome] | None = None) -> ScoredFrames:
        parts = []
        for outcome in outcomes if outcomes is not None else self.outcomes:
            for desc, label in outcome.labels.rows:
                if desc.attribute != attribute or (value is not None and desc.value != value):
                    continue
                parts.append(ScoredFrames(outcome.posteriors.row(desc), label, f"{attribute}:{value or '*'}"))
        return ScoredFrames.pool(parts, f"{attribute}:{value or '*'}")

    def attributes(self) -> list[str]:
        present = {str(desc.attribute) for o in self.outcomes for desc in o.labels.descriptors}
        return [a for a in ATTRIBUTE_ORDER if a in present]

    def attribute_metrics(self, outcomes: Sequence[ClipOutcome] | None = None) -> dict[str, dict[str, float]]:
        return {a: threshold_metrics(self.scored(a, outcomes=outcomes)) for a in self.attributes()}

    def per_clip_metrics(self) -> dict[str, dict[str, float]]:
        """Promedio entre clips de las métricas por clip (los indefinidos no cuentan)."""
        collected: dict[str, dict[str, list[float]]] = {}
        for outcome in self.outcomes:
            for attribute, metrics in self.attribute_metrics([outcome]).items():
                for name, value in metrics.items():
                    collected.setdefault(attribute, {}).setdefault(name, []).append(value)
        return {a: {m: float(np.mean(v)) for m, v in ms.items()} for a, ms in collected.items()}

    def mean_ap(self) -> float:
        aps = [m["ap"] for m in self.attribute_metrics().values() if "ap" in m]
        return float(np.mean(aps)) if aps else float("nan")

    def der(self, cfg: EvalConfig) -> dict[str, float] | None:
        """DER agregado sobre las filas T (hablantes con ancla)."""
        total = DerCounts()
        for outcome in self.outcomes:
            if not any(d.attribute == Attribute.TIMESTAMP for d in outcome.labels.descriptors):
                continue
            hyp = hypothesis_from_posteriors(
                outcome.posteriors, outcome.labels, outcome.reference.duration, cfg.threshold, cfg.median_window
            )
            counts, _ = DerService.der_counts(outcome.reference, hyp, cfg.collar, cfg.score_overlap)
            total = total + counts
        if total.total == 0:
            return None
        return total.result().as_dict()

    def gender_der(self, cfg: EvalConfig) -> dict[str, float] | None:
        """DER de diarización por género: referencia y hipótesis con 'hablantes' female/male."""
        total = DerCounts()
        for outcome in self.outcomes:
            descs = [d for d in outcome.labels.descriptors if d.attribute == Attribute.GENDER]
            if not descs:
                continue
            ref_segments, hyp_segments = [], []
            for desc in descs:
                for onset, offset in LabelService.frames_to_segments(outcome.labels.row(desc)):
                    ref_segments.append(Segment(str(desc.value), onset, min(offset, outcome.reference.duration)))
                for onset, offset in binarize_segments(outcome.posteriors.row(desc), cfg.threshold, cfg.median_window):
                    hyp_segments.append(Segment(f"hyp_{desc.value}", onset, min(offset, outcome.reference.duration)))
            duration = outcome.reference.duration
            ref = SegmentAnnotation(outcome.clip_id, duration, tuple(s for s in ref_segments if s.offset > s.onset))
            hyp = SegmentAnnotation(outcome.clip_id, duration, tuple(s for s in hyp_segments if s.offset > s.onset))
            counts, _ = DerService.der_counts(ref, hyp, cfg.collar, cfg.score_overlap)
            total = total + counts
        if total.total == 0:
            return None
        return total.result().as_dict()

    def overlap_precision_recall(self, cfg: EvalConfig) -> tuple[float | None, float | None] | None:
        preds, labels = [], []
        for outcome in self.outcomes:
            if OVERLAP_DESCRIPTOR.key not in {d.key for d in outcome.labels.descriptors}:
                continue
            preds.append(binarize(outcome.posteriors.row(OVERLAP_DESCRIPTOR), cfg.threshold, cfg.median_window))
            labels.append(outcome.labels.row(OVERLAP_DESCRIPTOR))
        if not preds:
            return None
        return osd_precision_recall(np.concatenate(preds), np.concatenate(labels))

    def speaker_count_accuracy(self) -> float | None:
        correct = total = 0
        for outcome in self.outcomes:
            keys = {d.key for d in outcome.labels.descriptors}
            if not all(d.key in keys for d in COUNTER_DESCRIPTORS):
                continue
            estimate = estimate_speaker_count(outcome.posteriors)
            truth = np.stack([outcome.labels.row(d) for d in COUNTER_DESCRIPTORS]).argmax(axis=0)
            correct += int((estimate == truth).sum())
            total += truth.size
        return correct / total if total else None


class ProtocolService:

    @staticmethod
    def evaluate_clip(
        model: nn.Module,
        system: str,
        clip: ClipData,
        cfg: EvalConfig,
        enrollment_seconds: float | None = None,
    ) -> ClipOutcome:
        if system in GENDER_SYSTEMS:
            posteriors = InferenceService.chunked_gender(model, clip.raw, cfg.chunk, clip.clip_id)
        elif system == SystemKind.TSVAD:
            seconds = enrollment_seconds or cfg.enrollment_lengths[-1]
            enrollments = [
                spec for spec in (
                    pick_enrollment(clip.activity, s, seconds, clip.clip_id) for s in clip.activity.speaker_ids
                ) if spec is not None
            ]
            if not enrollments:
                raise ValidationError(f"{clip.clip_id}: ningún hablante tiene habla solitaria.", code="no_enrollment")
            posteriors = InferenceService.chunked_tsvad(model, clip.raw, enrollments, cfg.chunk, clip.clip_id)
        else:
            posteriors = InferenceService.chunked_infer(
                model,
                clip.raw,
                protocol_specs(clip.activity),
                chunk=cfg.chunk,
                reference=clip.activity,
                missing_anchor=MISSING_ANCHOR_FLOOR,
                clip_id=clip.clip_id,
            )
        labels = reference_labels(clip.activity, clip.profiles, posteriors.descriptors, cfg.chunk)
        return ClipOutcome(clip.clip_id, posteriors, labels, clip.annotation)

    @staticmethod
    def evaluate(
        model: nn.Module,
        system: str,
        store: ClipStore,
        cfg: EvalConfig,
        enrollment_seconds: float | None = None,
    ) -> EvaluationResult:
        outcomes = tuple(
            ProtocolService.evaluate_clip(model, system, clip, cfg, enrollment_seconds) for clip in store.clips
        )
        logger.info("evaluación system=%s clips=%d", system, len(outcomes))
        return EvaluationResult(system=system, outcomes=outcomes)

    @staticmethod
    def from_dump(
        posteriors: Sequence[PosteriorSet],
        store: ClipStore,
        chunk: float,
        system: str = "",
    ) -> EvaluationResult:
        """Empareja un score dump con la verdad de referencia del manifest."""
        by_id = {clip.clip_id: clip for clip in store.clips}
        outcomes = []
        for post in posteriors:
            clip = by_id.get(post.clip_id)
            if clip is None:
                raise ValidationError(f"El clip {post.clip_id} del dump no está en el manifest.", code="unknown_clip")
            if post.n_frames != clip.n_frames:
                raise ValidationError(
                    f"{post.clip_id}: {post.n_frames} frames en el dump vs {clip.n_frames} en la referencia.",
                    code="shape_mismatch",
                )
            labels = reference_labels(clip.activity, clip.profiles, post.descriptors, chunk)
            # Las filas T quedan ligadas al hablante resuelto desde la referencia
            post = PosteriorSet(labels.descriptors, post.values, post.clip_id, post.frame_rate)
            outcomes.append(ClipOutcome(clip.clip_id, post, labels, clip.annotation))
        return EvaluationResult(system=system, outcomes=tuple(outcomes))
