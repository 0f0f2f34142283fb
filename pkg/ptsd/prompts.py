# ptsd/prompts.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from django.core.exceptions import ValidationError

from labels.types import (
    Attribute,
    CounterClass,
    EventDescriptor,
    Gender,
    KEYNOTE_VALUE,
)

# Filas de la tabla de embeddings de prompts (G, N, K)
PROMPT_TABLE_ROWS: tuple[tuple[str, str], ...] = (
    (Attribute.GENDER.value, Gender.FEMALE.value),
    (Attribute.GENDER.value, Gender.MALE.value),
    (Attribute.COUNTER.value, CounterClass.NON_SPEECH.value),
    (Attribute.COUNTER.value, CounterClass.SINGLE.value),
    (Attribute.COUNTER.value, CounterClass.OVERLAP.value),
    (Attribute.KEYNOTE.value, KEYNOTE_VALUE),
)
TABLE_INDEX = {key: idx for idx, key in enumerate(PROMPT_TABLE_ROWS)}
TIMESTAMP_KIND = -1


@dataclass(frozen=True)
class PromptSpec:
    """Consulta simbólica: atributo + valor (índice de frame para T)."""
    attribute: str
    value: int | str
    speaker_id: str | None = None

    def __post_init__(self):
        # Reusa la validación de pares (atributo, valor) del descriptor
        self.descriptor

    @property
    def descriptor(self) -> EventDescriptor:
        return EventDescriptor(self.attribute, self.value, self.speaker_id)

    @property
    def table_index(self) -> int:
        if self.attribute == Attribute.TIMESTAMP:
            return TIMESTAMP_KIND
        return TABLE_INDEX[(str(self.attribute), str(self.value))]

    @classmethod
    def timestamp(cls, frame: int, speaker_id: str | None = None) -> "PromptSpec":
        return cls(Attribute.TIMESTAMP.value, int(frame), speaker_id)

    @classmethod
    def categorical(cls, attribute: str, value: str) -> "PromptSpec":
        return cls(str(attribute), str(value))


def full_categorical_specs() -> list[PromptSpec]:
    return [PromptSpec.categorical(a, v) for a, v in PROMPT_TABLE_ROWS]


@dataclass(frozen=True)
class PromptBatch:
    """
    Prompts empaquetados para el modelo:
    kind (B,N): índice de tabla o -1 para T; frame (B,N): índice de ancla T;
    valid (B,N): False en filas de relleno.
    """
    kind: torch.Tensor
    frame: torch.Tensor
    valid: torch.Tensor

    @property
    def n_queries(self) -> int:
        return int(self.kind.shape[1])

    @classmethod
    def from_specs(cls, batch: Sequence[Sequence[PromptSpec]], n_frames: Sequence[int] | None = None) -> "PromptBatch":
        if not batch or any(len(specs) == 0 for specs in batch):
            raise ValidationError("Se requiere al menos un prompt por ejemplo.", code="empty_prompts")
        n_max = max(len(specs) for specs in batch)
        kind = np.full((len(batch), n_max), TIMESTAMP_KIND, dtype=np.int64)
        frame = np.zeros((len(batch), n_max), dtype=np.int64)
        valid = np.zeros((len(batch), n_max), dtype=bool)

        for b, specs in enumerate(batch):
            for n, spec in enumerate(specs):
                if n_frames is not None:
                    spec.descriptor.check_frame(n_frames[b])
                kind[b, n] = spec.table_index
                frame[b, n] = int(spec.value) if spec.table_index == TIMESTAMP_KIND else 0
                valid[b, n] = True

        return cls(torch.from_numpy(kind), torch.from_numpy(frame), torch.from_numpy(valid))


@dataclass(frozen=True)
class PromptQuery:
    """
    Línea del archivo de prompts del usuario, antes de resolverse contra un clip:
    `T <clip_id> <seconds>` | `G female` | `G male` | `N <class>` | `K`.
    """
    attribute: str
    value: str
    clip_id: str | None = None
    seconds: float | None = None

    @property
    def text(self) -> str:
        if self.attribute == Attribute.TIMESTAMP:
            return f"T:{self.seconds:.3f}"
        return f"{self.attribute}:{self.value}"


def parse_prompt_lines(lines: Sequence[str], source: str = "<prompts>") -> list[PromptQuery]:
    queries: list[PromptQuery] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        head = fields[0]
        try:
            if head == "T" and len(fields) == 3:
                seconds = float(fields[2])
                if seconds < 0:
                    raise ValueError("tiempo negativo")
                queries.append(PromptQuery(Attribute.TIMESTAMP.value, "", clip_id=fields[1], seconds=seconds))
            elif head == "G" and len(fields) == 2 and fields[1] in Gender.values:
                queries.append(PromptQuery(Attribute.GENDER.value, fields[1]))
            elif head == "N" and len(fields) == 2 and fields[1] in CounterClass.values:
                queries.append(PromptQuery(Attribute.COUNTER.value, fields[1]))
            elif head == "K" and len(fields) == 1:
                queries.append(PromptQuery(Attribute.KEYNOTE.value, KEYNOTE_VALUE))
            else:
                raise ValueError("formato desconocido")
        except ValueError as ex:
            raise ValidationError(f"{source}:{lineno}: línea de prompt inválida {line!r} ({ex}).", code="bad_spec_line")
    return queries
