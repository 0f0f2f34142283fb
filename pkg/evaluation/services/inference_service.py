# evaluation/services/inference_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from django.core.exceptions import ValidationError
from torch import nn

from baselines.services.enrollment_service import EnrollmentService, EnrollmentSpec
from frontend.services.feature_service import FeatureService, FrameClock
from labels.services.label_service import LabelService
from labels.types import FRAME_RATE, Attribute, AudioClip, EventDescriptor, SpeakerActivity
from ptsd.network import PROB_EPS, PosteriorSet, PTSDModel
from ptsd.prompts import PromptQuery, PromptSpec
from ptsd.services.model_service import ModelService

logger = logging.getLogger(__name__)

MISSING_ANCHOR_ERROR = "error"
MISSING_ANCHOR_FLOOR = "floor"


def chunk_bounds(n_frames: int, chunk_seconds: float) -> list[tuple[int, int]]:
    """Chunks consecutivos sin traslape; el último es el resto tal cual. chunk <= 0: un solo chunk."""
    if n_frames <= 0:
        raise ValidationError("El clip no tiene frames.", code="too_short")
    if chunk_seconds <= 0:
        return [(0, n_frames)]
    size = int(round(chunk_seconds * FRAME_RATE))
    return [(start, min(start + size, n_frames)) for start in range(0, n_frames, size)]


def speaker_at_anchor(reference: SpeakerActivity, frame: int) -> str | None:
    """Hablante que habla solo en `frame` según la referencia."""
    if not 0 <= frame < reference.n_frames:
        return None
    active = np.flatnonzero(reference.matrix[:, frame])
    if active.size != 1:
        return None
    return reference.speaker_ids[int(active[0])]


def remap_anchor(
    frame: int,
    start: int,
    end: int,
    reference: SpeakerActivity | None,
    speaker_id: str | None = None,
) -> int | None:
    """
    Ancla local para un chunk que no contiene el ancla global: el frame
    solitario del mismo hablante más cercano dentro del chunk.
    """
    if reference is None:
        return None
    speaker_id = speaker_id or speaker_at_anchor(reference, frame)
    if speaker_id is None or speaker_id not in reference.speaker_ids:
        return None
    candidates = LabelService.solo_frames(reference.window(start, end))[speaker_id]
    if candidates.size == 0:
        return None
    target = min(max(frame - start, 0), end - start - 1)
    return int(candidates[int(np.argmin(np.abs(candidates - target)))])


def _raw_of(model: nn.Module, source: AudioClip | np.ndarray) -> np.ndarray:
    if isinstance(source, AudioClip):
        return FeatureService.raw_features(source, model.frontend)
    return np.asarray(source, dtype=np.float32)


def resolve_queries(
    queries: Sequence[PromptQuery],
    clip_id: str,
    n_frames: int,
    reference: SpeakerActivity | None = None,
) -> list[PromptSpec]:
    """Prompts de usuario -> specs de un clip: las líneas T solo aplican a su clip."""
    duration = n_frames / FRAME_RATE
    specs: list[PromptSpec] = []
    for q in queries:
        if q.attribute == Attribute.TIMESTAMP:
            if q.clip_id != clip_id:
                continue
            frame = FrameClock.time_to_frame(q.seconds, duration)
            speaker_id = speaker_at_anchor(reference, frame) if reference is not None else None
            specs.append(PromptSpec.timestamp(frame, speaker_id))
        else:
            specs.append(PromptSpec.categorical(q.attribute, q.value))
    return specs


class InferenceService:

    @staticmethod
    def chunked_infer(
        model: PTSDModel,
        source: AudioClip | np.ndarray,
        specs: Sequence[PromptSpec],
        chunk: float = 40.0,
        reference: SpeakerActivity | None = None,
        missing_anchor: str = MISSING_ANCHOR_ERROR,
        clip_id: str = "",
    ) -> PosteriorSet:
        """
        Forward por chunks de `chunk` segundos y concatenación. Las anclas T
        (frames globales) se re-resuelven en cada chunk; keynote es por chunk.
        """
        if not specs:
            raise ValidationError("chunked_infer requiere al menos un prompt.", code="empty_prompts")
        if isinstance(source, AudioClip):
            clip_id = clip_id or source.clip_id
        raw = _raw_of(model, source)
        n_frames = raw.shape[0]
        for spec in specs:
            spec.descriptor.check_frame(n_frames)

        parts = []
        for start, end in chunk_bounds(n_frames, chunk):
            values = np.full((len(specs), end - start), PROB_EPS, dtype=np.float64)
            local: list[tuple[int, PromptSpec]] = []
            for idx, spec in enumerate(specs):
                if spec.attribute != Attribute.TIMESTAMP:
                    local.append((idx, spec))
                    continue
                frame = int(spec.value)
                if start <= frame < end:
                    anchor = frame - start
                else:
                    anchor = remap_anchor(frame, start, end, reference, spec.speaker_id)
                if anchor is None:
                    if missing_anchor == MISSING_ANCHOR_FLOOR:
                        continue
                    raise ValidationError(
                        f"{clip_id}: el ancla T en {FrameClock.frame_to_time(frame):.2f} s no se puede "
                        f"resolver en el chunk [{start / FRAME_RATE:.2f}, {end / FRAME_RATE:.2f}) s.",
                        code="anchor_unresolvable",
                    )
                local.append((idx, PromptSpec.timestamp(anchor, spec.speaker_id)))

            if local:
                out = ModelService.forward(model, raw[start:end], [s for _, s in local], clip_id)
                for row, (idx, _) in enumerate(local):
                    values[idx] = out.values[row]
            parts.append(values)
            logger.debug("clip=%s chunk=[%d,%d) prompts=%d", clip_id, start, end, len(local))

        return PosteriorSet(
            descriptors=tuple(s.descriptor for s in specs),
            values=np.concatenate(parts, axis=1),
            clip_id=clip_id,
        )

    @staticmethod
    def chunked_tsvad(
        model: PTSDModel,
        source: AudioClip | np.ndarray,
        enrollments: Sequence[EnrollmentSpec],
        chunk: float = 40.0,
        clip_id: str = "",
    ) -> PosteriorSet:
        """Los enrolamientos se promedian sobre el clip completo y se reutilizan en cada chunk."""
        raw = _raw_of(model, source)
        clip_id = clip_id or (source.clip_id if isinstance(source, AudioClip) else "")
        parts = [
            EnrollmentService.tsvad_forward(model, raw[a:b], enrollments, clip_id, pooled_from=raw)
            for a, b in chunk_bounds(raw.shape[0], chunk)
        ]
        return PosteriorSet.concat(parts)

    @staticmethod
    def chunked_gender(model: nn.Module, source: AudioClip | np.ndarray, chunk: float = 40.0, clip_id: str = "") -> PosteriorSet:
        raw = _raw_of(model, source)
        clip_id = clip_id or (source.clip_id if isinstance(source, AudioClip) else "")
        parts = [
            EnrollmentService.gender_baseline_forward(model, raw[a:b], clip_id)
            for a, b in chunk_bounds(raw.shape[0], chunk)
        ]
        return PosteriorSet.concat(parts)


# -- score dump -------------------------------------------------------------

@dataclass(frozen=True)
class ScoreDump:
    frame_rate: int
    config_hash: str
    chunk: float
    system: str
    posteriors: tuple[PosteriorSet, ...]


def descriptor_text(desc: EventDescriptor) -> str:
    if desc.attribute == Attribute.TIMESTAMP:
        return f"T:{int(desc.value) / FRAME_RATE:.3f}"
    return f"{desc.attribute}:{desc.value}"


def parse_descriptor_text(text: str, source: str = "<dump>") -> EventDescriptor:
    attribute, _, value = text.partition(":")
    try:
        if attribute == Attribute.TIMESTAMP:
            return EventDescriptor(attribute, FrameClock.time_to_frame(float(value)))
        return EventDescriptor(attribute, value)
    except (ValueError, ValidationError) as ex:
        raise ValidationError(f"{source}: descriptor inválido {text!r} ({ex}).", code="bad_dump_line")


def write_score_dump(
    path: str | Path,
    posteriors: Iterable[PosteriorSet],
    *,
    config_hash: str,
    chunk: float,
    system: str,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# frame_rate={FRAME_RATE} config_hash={config_hash} chunk={chunk:g} system={system}"]
    for post in posteriors:
        for idx, desc in enumerate(post.descriptors):
            values = " ".join(f"{v:.6f}" for v in post.values[idx])
            lines.append(f"{post.clip_id}\t{descriptor_text(desc)}\t{values}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("score dump escrito: %s (%d filas)", path, len(lines) - 1)
    return path


def read_score_dump(path: str | Path) -> ScoreDump:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as ex:
        raise ValidationError(f"No se pudo leer el score dump {path}: {ex}", code="missing_file")

    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValidationError(f"{path}: falta la cabecera del score dump.", code="bad_dump_line")
    header = dict(field.split("=", 1) for field in lines[0][1:].split() if "=" in field)
    try:
        frame_rate = int(header["frame_rate"])
        chunk = float(header.get("chunk", "0"))
    except (KeyError, ValueError):
        raise ValidationError(f"{path}: cabecera inválida {lines[0]!r}.", code="bad_dump_line")

    by_clip: dict[str, list[tuple[EventDescriptor, np.ndarray]]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 3:
            raise ValidationError(f"{path}:{lineno}: se esperaban 3 campos.", code="bad_dump_line")
        clip_id, desc_text, values = fields
        desc = parse_descriptor_text(desc_text, f"{path}:{lineno}")
        try:
            row = np.array([float(v) for v in values.split()], dtype=np.float64)
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: posteriores no numéricos.", code="bad_dump_line")
        by_clip.setdefault(clip_id, []).append((desc, row))

    posteriors = []
    for clip_id, rows in by_clip.items():
        lengths = {r.size for _, r in rows}
        if len(lengths) != 1:
            raise ValidationError(f"{path}: filas de {clip_id} con longitudes distintas.", code="bad_dump_line")
        posteriors.append(PosteriorSet(tuple(d for d, _ in rows), np.stack([r for _, r in rows]), clip_id, frame_rate))

    return ScoreDump(
        frame_rate=frame_rate,
        config_hash=header.get("config_hash", ""),
        chunk=chunk,
        system=header.get("system", ""),
        posteriors=tuple(posteriors),
    )
