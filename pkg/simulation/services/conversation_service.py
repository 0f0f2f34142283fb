# simulation/services/conversation_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import soundfile as sf
from django.core.exceptions import ValidationError

from labels.types import AudioClip, Segment, SegmentAnnotation, SpeakerProfile
from simulation.services.speaker_synth import SpeakerSynth, SynthConfig

logger = logging.getLogger(__name__)

MAX_ORDER_ATTEMPTS = 200
MIN_TURN_SECONDS = 0.5
NOISE_FLOOR_RMS = 1e-3


@dataclass(frozen=True)
class ConversationStats:
    """
    Estadísticas de turnos. Defaults elegidos para que cada clip tenga
    non-speech, single y overlap; todo es configurable.
    """
    pause_mu: float = -0.2
    pause_sigma: float = 0.8
    overlap_probability: float = 0.3
    overlap_mu: float = -0.7
    overlap_sigma: float = 0.7
    utterance_min: float = 1.5
    utterance_max: float = 6.0
    turn_weights: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValidationError("overlap_probability debe estar en [0, 1].", code="invalid_stats")
        if self.pause_sigma <= 0 or self.overlap_sigma <= 0:
            raise ValidationError("sigma debe ser > 0.", code="invalid_stats")
        if not 0 < self.utterance_min <= self.utterance_max:
            raise ValidationError("Rango de duración de enunciado inválido.", code="invalid_stats")
        if any(w < 0 for w in self.turn_weights.values()):
            raise ValidationError("Los pesos de turno deben ser >= 0.", code="invalid_stats")


@dataclass(frozen=True)
class UtterancePool:
    """Grabaciones reales de un solo hablante, indexadas por speaker_id."""
    recordings: Mapping[str, tuple[np.ndarray, ...]]
    profiles: Mapping[str, SpeakerProfile]
    sample_rate: int = 16000

    def draw(self, speaker_id: str, duration: float, rng: np.random.Generator, rms_level: float) -> np.ndarray:
        recs = self.recordings.get(speaker_id)
        if not recs:
            raise ValidationError(f"El pool no tiene audio para {speaker_id}.", code="unknown_speaker")
        wav = recs[int(rng.integers(len(recs)))]
        n = int(round(duration * self.sample_rate))
        if len(wav) >= n:
            start = int(rng.integers(len(wav) - n + 1))
            out = wav[start:start + n].astype(np.float64)
        else:
            out = np.resize(wav, n).astype(np.float64)
        rms = np.sqrt(np.mean(out ** 2)) if n else 0.0
        return out * (rms_level / rms) if rms > 0 else out


def load_utterance_pool(manifest_path: str | Path, sample_rate: int = 16000) -> UtterancePool:
    """
    Pool manifest: una línea por grabación, `speaker_id<TAB>gender<TAB>wav_path`
    (ruta relativa al manifest o absoluta).
    """
    manifest_path = Path(manifest_path)
    recordings: dict[str, list[np.ndarray]] = {}
    profiles: dict[str, SpeakerProfile] = {}

    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 3:
            raise ValidationError(f"{manifest_path}:{lineno}: se esperaban 3 campos.", code="bad_manifest_line")
        speaker_id, gender, wav_rel = fields
        wav_path = (manifest_path.parent / wav_rel).resolve()
        audio, sr = sf.read(str(wav_path), dtype="float32", always_2d=False)
        if sr != sample_rate or audio.ndim != 1:
            raise ValidationError(f"{wav_path}: se requiere mono {sample_rate} Hz.", code="bad_audio")
        recordings.setdefault(speaker_id, []).append(audio)
        profiles.setdefault(speaker_id, SpeakerProfile(speaker_id=speaker_id, gender=gender))

    return UtterancePool(
        recordings={k: tuple(v) for k, v in recordings.items()},
        profiles=profiles,
        sample_rate=sample_rate,
    )


class ConversationService:

    @staticmethod
    def _next_speaker(
        rng: np.random.Generator,
        candidates: Sequence[str],
        weights: Mapping[str, float],
    ) -> str:
        w = np.array([float(weights.get(s, 1.0)) for s in candidates])
        if w.sum() <= 0:
            w = np.ones(len(candidates))
        return candidates[int(rng.choice(len(candidates), p=w / w.sum()))]

    @staticmethod
    def _sample_turns(
        stats: ConversationStats,
        speaker_ids: Sequence[str],
        target_duration: float,
        rng: np.random.Generator,
    ) -> list[Segment]:
        turns: list[Segment] = []
        last_end = {s: 0.0 for s in speaker_ids}

        current = ConversationService._next_speaker(rng, list(speaker_ids), stats.turn_weights)
        start = round(min(float(rng.lognormal(stats.pause_mu, stats.pause_sigma)), 1.0), 3)

        while True:
            dur = float(rng.uniform(stats.utterance_min, stats.utterance_max))
            end = round(min(start + dur, target_duration), 3)
            if end - start < MIN_TURN_SECONDS:
                break
            turns.append(Segment(current, start, end))
            last_end[current] = end

            others = [s for s in speaker_ids if s != current]
            next_start = None
            if rng.random() < stats.overlap_probability:
                overlap = float(rng.lognormal(stats.overlap_mu, stats.overlap_sigma))
                # Acotado por utterance_min: los fines de turno quedan monótonos
                overlap = min(overlap, 0.5 * (end - start), 0.5 * stats.utterance_min)
                proposed = round(end - overlap, 3)
                # El siguiente hablante no puede seguir hablando en `proposed`
                free = [s for s in others if last_end[s] <= proposed]
                if free and proposed < end:
                    next_start = proposed
                    others = free
            if next_start is None:
                next_start = round(end + float(rng.lognormal(stats.pause_mu, stats.pause_sigma)), 3)

            current = ConversationService._next_speaker(rng, others, stats.turn_weights)
            start = next_start
            if start >= target_duration:
                break

        return turns

    @staticmethod
    def sample_conversation(
        stats: ConversationStats,
        profiles: Sequence[SpeakerProfile],
        target_duration: float,
        seed: int,
        clip_id: str = "",
        sample_rate: int = 16000,
        pool: UtterancePool | None = None,
        synth_cfg: SynthConfig | None = None,
    ) -> tuple[AudioClip, SegmentAnnotation]:
        if not 2 <= len(profiles) <= 4:
            raise ValidationError(f"Se requieren entre 2 y 4 hablantes, se recibieron {len(profiles)}.", code="invalid_speakers")

        speaker_ids = [p.speaker_id for p in profiles]
        if len(set(speaker_ids)) != len(speaker_ids):
            raise ValidationError("speaker_id repetido en la conversación.", code="invalid_speakers")

        # Cota mínima: un turno por hablante más las pausas mínimas entre ellos
        if target_duration < len(profiles) * max(stats.utterance_min, MIN_TURN_SECONDS) + 1.0:
            raise ValidationError(
                f"target_duration={target_duration} s es muy corta para {len(profiles)} hablantes.",
                code="too_short",
            )

        rng = np.random.default_rng(seed)
        for attempt in range(MAX_ORDER_ATTEMPTS):
            turns = ConversationService._sample_turns(stats, speaker_ids, target_duration, rng)
            if {t.speaker_id for t in turns} == set(speaker_ids):
                break
            logger.debug("clip=%s intento=%d: faltan hablantes, se re-muestrea el orden", clip_id, attempt)
        else:
            raise ValidationError(
                f"No se logró que los {len(profiles)} hablantes aparezcan en {target_duration} s.",
                code="too_short",
            )

        synth_cfg = synth_cfg or SynthConfig(sample_rate=sample_rate)
        by_id = {p.speaker_id: p for p in profiles}
        n_samples = int(round(target_duration * sample_rate))
        mix = rng.normal(0.0, NOISE_FLOOR_RMS, size=n_samples)

        for turn in turns:
            a = int(round(turn.onset * sample_rate))
            b = min(int(round(turn.offset * sample_rate)), n_samples)
            utt_seed = int(rng.integers(2**31 - 1))
            if pool is not None:
                wav = pool.draw(turn.speaker_id, (b - a) / sample_rate, np.random.default_rng(utt_seed), synth_cfg.rms_level)
            else:
                wav = SpeakerSynth.synth_utterance(by_id[turn.speaker_id], (b - a) / sample_rate, utt_seed, synth_cfg).samples
            mix[a:a + len(wav)] += wav[: b - a]

        peak = np.max(np.abs(mix)) if n_samples else 0.0
        if peak > 1.0:
            mix = mix / peak  # re-escala todo el clip, las etiquetas no cambian

        ann = SegmentAnnotation(clip_id=clip_id, duration=round(target_duration, 6), segments=tuple(turns))
        ann.validate()

        return AudioClip(samples=mix.astype(np.float32), sample_rate=sample_rate, clip_id=clip_id), ann
