# simulation/services/speaker_synth.py
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy import signal

from labels.types import AudioClip, Gender, SpeakerProfile


F0_RANGE = {
    Gender.FEMALE.value: (165.0, 255.0),
    Gender.MALE.value: (85.0, 155.0),
}

# Formantes neutros (Hz); cada hablante los escala con sus coeficientes
BASE_FORMANTS = (500.0, 1500.0, 2500.0)
FORMANT_BANDWIDTHS = (90.0, 120.0, 160.0)

DEFAULT_RMS_LEVEL = 0.05
EDGE_RAMP_SECONDS = 0.025


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 16000
    rms_level: float = DEFAULT_RMS_LEVEL
    noise_level: float = 0.02  # relativo al RMS de la voz
    jitter_depth: float = 0.06
    syllable_rate: float = 4.0


class SpeakerSynth:
    """
    Generador de voz sintética: fuente armónica con jitter lento de f0,
    filtrada por los formantes del perfil, más ruido de bajo nivel.
    """

    @staticmethod
    def synth_speaker(seed: int, gender: str, speaker_id: str | None = None) -> SpeakerProfile:
        rng = np.random.default_rng(seed)
        low, high = F0_RANGE[str(gender)]
        f0 = float(rng.uniform(low, high))
        formants = tuple(float(c) for c in rng.uniform(0.8, 1.25, size=len(BASE_FORMANTS)))
        # Voces femeninas con tracto más corto: formantes más altos
        if str(gender) == Gender.FEMALE:
            formants = tuple(c * 1.15 for c in formants)
        return SpeakerProfile(
            speaker_id=speaker_id or f"spk{seed}",
            gender=str(gender),
            f0_base=round(f0, 6),
            formants=tuple(round(c, 6) for c in formants),
        )

    @staticmethod
    def _formant_filter(x: np.ndarray, profile: SpeakerProfile, sample_rate: int) -> np.ndarray:
        coefs = profile.formants or (1.0,) * len(BASE_FORMANTS)
        out = np.zeros_like(x)
        nyquist = sample_rate / 2.0
        for base, coef, bw in zip(BASE_FORMANTS, coefs, FORMANT_BANDWIDTHS):
            freq = min(base * coef, nyquist * 0.95)
            r = np.exp(-np.pi * bw / sample_rate)
            theta = 2.0 * np.pi * freq / sample_rate
            # Resonador de 2 polos, ganancia normalizada en el pico
            a = [1.0, -2.0 * r * np.cos(theta), r * r]
            b = [1.0 - r]
            out += signal.lfilter(b, a, x)
        return out

    @staticmethod
    def synth_utterance(
        profile: SpeakerProfile,
        duration: float,
        seed: int = 0,
        cfg: SynthConfig | None = None,
    ) -> AudioClip:
        if duration <= 0:
            raise ValidationError(f"duration debe ser > 0 ({duration}).", code="bad_duration")
        cfg = cfg or SynthConfig()
        rng = np.random.default_rng(seed)
        sr = cfg.sample_rate

        n = int(round(duration * sr))
        t = np.arange(n) / sr

        # f0 con deriva lenta (senoidal + caminata aleatoria suavizada)
        drift = np.cumsum(rng.normal(0.0, 1.0, size=n)) / np.sqrt(sr)
        drift = drift - drift.mean() if n else drift
        f0 = profile.f0_base * (
            1.0
            + cfg.jitter_depth * np.sin(2.0 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * np.pi))
            + 0.01 * np.clip(drift, -3.0, 3.0)
        )
        phase = 2.0 * np.pi * np.cumsum(f0) / sr

        n_harmonics = max(1, int((sr / 2.0 * 0.9) // (profile.f0_base * (1 + cfg.jitter_depth))))
        source = np.zeros(n)
        for k in range(1, n_harmonics + 1):
            source += np.sin(k * phase) / k

        voiced = SpeakerSynth._formant_filter(source, profile, sr)

        # Envolvente silábica y rampas en los bordes
        envelope = 0.55 + 0.45 * np.sin(np.pi * cfg.syllable_rate * t + rng.uniform(0, np.pi)) ** 2
        ramp = min(int(EDGE_RAMP_SECONDS * sr), n // 2)
        if ramp > 0:
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            envelope[:ramp] *= fade
            envelope[n - ramp:] *= fade[::-1]
        voiced = voiced * envelope

        voiced_rms = np.sqrt(np.mean(voiced ** 2)) if n else 0.0
        if voiced_rms > 0:
            voiced = voiced / voiced_rms
        noise = rng.normal(0.0, cfg.noise_level, size=n) * envelope
        clip = voiced + noise

        rms = np.sqrt(np.mean(clip ** 2)) if n else 0.0
        if rms > 0:
            clip = clip * (cfg.rms_level / rms)

        return AudioClip(samples=clip.astype(np.float32), sample_rate=sr, clip_id=profile.speaker_id)
