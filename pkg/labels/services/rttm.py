# labels/services/rttm.py
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping

from django.core.exceptions import ValidationError

from labels.types import Segment, SegmentAnnotation


def format_rttm_line(clip_id: str, speaker_id: str, onset: float, offset: float) -> str:
    return f"SPEAKER {clip_id} 1 {onset:.3f} {offset - onset:.3f} <NA> <NA> {speaker_id} <NA> <NA>"


def to_rttm_lines(ann: SegmentAnnotation) -> list[str]:
    ordered = sorted(ann.segments, key=lambda s: (s.onset, s.speaker_id, s.offset))
    return [format_rttm_line(ann.clip_id, s.speaker_id, s.onset, s.offset) for s in ordered]


def write_rttm(annotations: SegmentAnnotation | Iterable[SegmentAnnotation], path: str | Path) -> Path:
    if isinstance(annotations, SegmentAnnotation):
        annotations = [annotations]

    lines: list[str] = []
    for ann in annotations:
        lines.extend(to_rttm_lines(ann))

    path = Path(path)
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return path


def parse_rttm(text: str, source: str = "<rttm>") -> dict[str, list[Segment]]:
    by_clip: dict[str, list[Segment]] = defaultdict(list)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 8 or fields[0] != "SPEAKER":
            raise ValidationError(f"{source}:{lineno}: línea RTTM inválida: {line!r}", code="bad_rttm_line")
        try:
            onset = round(float(fields[3]), 3)
            duration = float(fields[4])
        except ValueError:
            raise ValidationError(f"{source}:{lineno}: onset/duración no numéricos.", code="bad_rttm_line")

        # Reconstruye offset sobre la rejilla de milisegundos del formato
        by_clip[fields[1]].append(Segment(fields[7], onset, round(onset + duration, 3)))

    return dict(by_clip)


def read_rttm(path: str | Path, durations: Mapping[str, float] | None = None) -> dict[str, SegmentAnnotation]:
    """
    Lee un RTTM (uno o varios clips). RTTM no trae duración del clip: se toma de
    `durations` si viene, si no del último offset.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as ex:
        raise ValidationError(f"No se pudo leer {path}: {ex}", code="missing_file")

    out: dict[str, SegmentAnnotation] = {}
    for clip_id, segments in parse_rttm(text, source=str(path)).items():
        duration = (durations or {}).get(clip_id) or max(s.offset for s in segments)
        out[clip_id] = SegmentAnnotation(clip_id=clip_id, duration=float(duration), segments=tuple(segments))

    for clip_id, duration in (durations or {}).items():
        out.setdefault(clip_id, SegmentAnnotation(clip_id=clip_id, duration=float(duration)))

    return out
