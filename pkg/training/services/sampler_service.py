# training/services/sampler_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import soundfile as sf
import torch
from django.core.exceptions import ValidationError

from baselines.services.enrollment_service import EnrollmentService, EnrollmentSpec, pick_enrollment
from frontend.services.feature_service import FeatureService, Frontend
from labels.services.label_service import GENDER_DESCRIPTORS, LabelService
from labels.services.rttm import read_rttm
from labels.types import (
    FRAME_RATE,
    FrameLabelSet,
    SegmentAnnotation,
    SpeakerActivity,
    SpeakerProfile,
)
from ptsd.network import EnrollmentBatch
from ptsd.prompts import PromptBatch, PromptSpec
from ptsd.systems import GENDER_SYSTEMS, SystemKind
from simulation.services.dataset_service import DatasetManifest, DatasetService
from training.services.schedule import TrainConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClipData:
    """Clip listo para muestrear: features crudos a 25 fps + verdad de referencia."""
    clip_id: str
    raw: np.ndarray
    annotation: SegmentAnnotation
    activity: SpeakerActivity
    profiles: dict[str, SpeakerProfile]

    @property
    def n_frames(self) -> int:
        return int(self.raw.shape[0])


@dataclass(frozen=True)
class ClipStore:
    clips: tuple[ClipData, ...]

    def __len__(self) -> int:
        return len(self.clips)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, frontend: Frontend) -> "ClipStore":
        clips = []
        for record in manifest:
            audio, ann = DatasetService.load_clip(record)
            raw = FeatureService.raw_features(audio, frontend)
            activity = LabelService.segments_to_activity(ann, speaker_ids=record.profile_map)
            if activity.n_frames != raw.shape[0]:
                raise ValidationError(
                    f"{record.clip_id}: {raw.shape[0]} frames de audio vs {activity.n_frames} de etiquetas.",
                    code="shape_mismatch",
                )
            clips.append(ClipData(record.clip_id, raw, ann, activity, record.profile_map))
        logger.info("clip store cargado: %d clips desde %s", len(clips), manifest.path)
        return cls(tuple(clips))

    @classmethod
    def references(cls, manifest: DatasetManifest) -> "ClipStore":
        """Solo verdad de referencia (sin features), para puntuar score dumps."""
        clips = []
        for record in manifest:
            durations = {record.clip_id: sf.info(str(record.wav_path)).duration}
            ann = read_rttm(record.rttm_path, durations=durations)[record.clip_id]
            activity = LabelService.segments_to_activity(ann, speaker_ids=record.profile_map)
            raw = np.zeros((activity.n_frames, 0), dtype=np.float32)
            clips.append(ClipData(record.clip_id, raw, ann, activity, record.profile_map))
        return cls(tuple(clips))


@dataclass(frozen=True)
class TrainingExample:
    clip_id: str
    start_frame: int
    raw: np.ndarray
    labels: FrameLabelSet
    specs: tuple[PromptSpec, ...] = ()
    enrollments: tuple[EnrollmentSpec, ...] = ()
    pooled: np.ndarray | None = None  # (N, raw_dim) para TS-VAD


@dataclass(frozen=True)
class Batch:
    clip_ids: tuple[str, ...]
    raw: torch.Tensor          # (B, T, raw_dim)
    frame_mask: torch.Tensor   # (B, T)
    targets: torch.Tensor      # (B, N, T)
    query_mask: torch.Tensor   # (B, N)
    prompts: PromptBatch | EnrollmentBatch | None = None


def example_rng(seed: int, epoch: int, step: int, index: int) -> np.random.Generator:
    """Stream propio por ejemplo: el resultado no depende del número de workers."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, step, index]))


def _sample_window(clip: ClipData, cfg: TrainConfig, rng: np.random.Generator) -> tuple[int, int]:
    """
    Longitud uniforme en [chunk_min, chunk_max] y offset uniforme. Las longitudes
    que no caben en el clip se re-muestrean: equivale a muestrear en
    [chunk_min, min(chunk_max, duración)). Si ni chunk_min cabe, clip completo.
    """
    clip_seconds = clip.n_frames / FRAME_RATE
    if cfg.chunk_min >= clip_seconds:
        return 0, clip.n_frames
    seconds = float(rng.uniform(cfg.chunk_min, min(cfg.chunk_max, clip_seconds)))
    length = min(int(round(seconds * FRAME_RATE)), clip.n_frames)
    start = int(rng.integers(0, clip.n_frames - length + 1))
    return start, start + length


def _subsample(labels: FrameLabelSet, max_prompts: int, rng: np.random.Generator) -> FrameLabelSet:
    if max_prompts <= 0 or len(labels.rows) <= max_prompts:
        return labels
    keep = np.sort(rng.choice(len(labels.rows), size=max_prompts, replace=False))
    return FrameLabelSet(labels.n_frames, tuple(labels.rows[int(i)] for i in keep), labels.frame_rate)


def sample_training_example(
    store: ClipStore,
    cfg: TrainConfig,
    rng: np.random.Generator,
    system: str | None = None,
) -> TrainingExample:
    if len(store) == 0:
        raise ValidationError("El manifest de entrenamiento está vacío.", code="empty_manifest")
    system = system or cfg.system
    clip = store.clips[int(rng.integers(len(store)))]
    start, end = _sample_window(clip, cfg, rng)
    window = clip.activity.window(start, end)
    raw = clip.raw[start:end]

    if system in GENDER_SYSTEMS:
        labels = LabelService.assemble_label_set(window, clip.profiles, include_keynote=False)
        return TrainingExample(clip.clip_id, start, raw, labels.select(GENDER_DESCRIPTORS))

    if system == SystemKind.TSVAD:
        enrollments = []
        for speaker_id in clip.activity.speaker_ids:
            seconds = float(rng.uniform(cfg.enrollment_min, cfg.enrollment_max))
            spec = pick_enrollment(clip.activity, speaker_id, seconds, clip.clip_id, rng)
            if spec is not None:
                enrollments.append(spec)
        if not enrollments:
            raise ValidationError(f"{clip.clip_id}: ningún hablante tiene habla solitaria.", code="no_enrollment")
        rows = tuple((e.descriptor, window.row(e.speaker_id).astype(np.uint8)) for e in enrollments)
        pooled = np.stack([EnrollmentService.pooled_features(clip.raw, e) for e in enrollments])
        return TrainingExample(
            clip.clip_id, start, raw, FrameLabelSet(end - start, rows),
            enrollments=tuple(enrollments), pooled=pooled.astype(np.float32),
        )

    # PTSD: un ancla T por hablante con frames solitarios en el chunk
    anchors = {}
    for speaker_id, frames in LabelService.solo_frames(window).items():
        if frames.size:
            anchors[speaker_id] = int(frames[int(rng.integers(frames.size))])
    labels = _subsample(LabelService.assemble_label_set(window, clip.profiles, anchors), cfg.max_prompts, rng)
    specs = tuple(PromptSpec(d.attribute, d.value, d.speaker_id) for d in labels.descriptors)
    return TrainingExample(clip.clip_id, start, raw, labels, specs=specs)


def collate(examples: Sequence[TrainingExample], system: str) -> Batch:
    """Rellena a la T y la N máximas del lote; las máscaras marcan lo válido."""
    n_batch = len(examples)
    t_max = max(ex.raw.shape[0] for ex in examples)
    n_max = max(len(ex.labels.rows) for ex in examples)
    raw_dim = examples[0].raw.shape[1]

    raw = np.zeros((n_batch, t_max, raw_dim), dtype=np.float32)
    frame_mask = np.zeros((n_batch, t_max), dtype=bool)
    targets = np.zeros((n_batch, n_max, t_max), dtype=np.float32)
    query_mask = np.zeros((n_batch, n_max), dtype=bool)
    for b, ex in enumerate(examples):
        t, n = ex.raw.shape[0], len(ex.labels.rows)
        raw[b, :t] = ex.raw
        frame_mask[b, :t] = True
        targets[b, :n, :t] = ex.labels.matrix()
        query_mask[b, :n] = True

    prompts: PromptBatch | EnrollmentBatch | None = None
    if system == SystemKind.TSVAD:
        pooled = np.zeros((n_batch, n_max, raw_dim), dtype=np.float32)
        for b, ex in enumerate(examples):
            pooled[b, : len(ex.enrollments)] = ex.pooled
        prompts = EnrollmentBatch(torch.from_numpy(pooled), torch.from_numpy(query_mask.copy()))
    elif system not in GENDER_SYSTEMS:
        prompts = PromptBatch.from_specs([ex.specs for ex in examples], n_frames=[ex.raw.shape[0] for ex in examples])

    return Batch(
        clip_ids=tuple(ex.clip_id for ex in examples),
        raw=torch.from_numpy(raw),
        frame_mask=torch.from_numpy(frame_mask),
        targets=torch.from_numpy(targets),
        query_mask=torch.from_numpy(query_mask),
        prompts=prompts,
    )
