# frontend/services/feature_service.py
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torchaudio
from django.conf import settings
from django.core.exceptions import ValidationError
from torch import nn

from labels.types import FRAME_RATE, AudioClip, n_frames_for

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10

# Adaptadores externos: nombre -> fn(samples, sample_rate) -> ndarray T×adapter_dim a 25 fps
AdapterFn = Callable[[np.ndarray, int], np.ndarray]
_ADAPTERS: dict[str, AdapterFn] = {}


def register_adapter(name: str, fn: AdapterFn) -> None:
    _ADAPTERS[name] = fn


def unregister_adapter(name: str) -> None:
    _ADAPTERS.pop(name, None)


@dataclass(frozen=True)
class FrontendConfig:
    kind: str = "logmel"  # logmel | external-adapter
    n_mels: int = 40
    window: float = 0.04
    hop: float = 0.04
    d_model: int = 256
    sample_rate: int = 16000
    f_max: float = 8000.0
    adapter: str = ""
    adapter_dim: int = 768

    def __post_init__(self):
        if self.kind not in ("logmel", "external-adapter"):
            raise ValidationError(f"frontend.kind inválido: {self.kind}", code="invalid_config")
        if round(1.0 / self.hop, 6) != FRAME_RATE:
            raise ValidationError(f"hop={self.hop} no da {FRAME_RATE} frames/s.", code="invalid_config")
        if self.kind == "external-adapter" and not self.adapter:
            raise ValidationError("external-adapter requiere frontend.adapter.", code="invalid_config")

    @property
    def raw_dim(self) -> int:
        return self.n_mels if self.kind == "logmel" else self.adapter_dim

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop * self.sample_rate))

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureSequence:
    """F_a: T×D a 25 frames/s."""
    frames: torch.Tensor
    clip_id: str = ""
    frame_rate: int = FRAME_RATE

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


class FrameClock:
    """Conversión tiempo <-> frame en la rejilla de 0.04 s."""

    @staticmethod
    def time_to_frame(t: float, duration: float | None = None) -> int:
        if t < 0:
            raise ValidationError(f"Tiempo negativo: {t}", code="time_out_of_range")
        if duration is not None and t >= duration:
            raise ValidationError(f"t={t} s fuera del clip de {duration} s.", code="time_out_of_range")
        return int(math.floor(t * FRAME_RATE + 1e-9))

    @staticmethod
    def frame_to_time(i: int) -> float:
        return (i + 0.5) / FRAME_RATE


class Frontend(nn.Module):
    """
    Speech encoder: features crudos (log-mel o adaptador externo congelado)
    seguidos de una proyección lineal entrenable a D.
    """

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        self.cfg = cfg
        self.mel = None
        if cfg.kind == "logmel":
            self.mel = torchaudio.transforms.MelSpectrogram(
                sample_rate=cfg.sample_rate,
                n_fft=int(round(cfg.window * cfg.sample_rate)),
                win_length=int(round(cfg.window * cfg.sample_rate)),
                hop_length=cfg.hop_samples,
                f_min=0.0,
                f_max=cfg.f_max,
                n_mels=cfg.n_mels,
                power=2.0,
                center=False,
            )
        self.projection = nn.Linear(cfg.raw_dim, cfg.d_model)

    def raw(self, audio: AudioClip) -> np.ndarray:
        """Features pre-proyección, T×raw_dim (float32)."""
        if audio.sample_rate != self.cfg.sample_rate or np.asarray(audio.samples).ndim != 1:
            raise ValidationError(
                f"Se requiere audio mono a {self.cfg.sample_rate} Hz (se recibió {audio.sample_rate} Hz).",
                code="bad_audio",
            )
        n_frames = n_frames_for(audio.duration)

        if self.cfg.kind == "logmel":
            need = n_frames * self.cfg.hop_samples
            samples = np.zeros(need, dtype=np.float32)
            take = min(need, len(audio.samples))
            samples[:take] = audio.samples[:take]
            with torch.no_grad():
                dtype = next(self.mel.buffers()).dtype
                mel = self.mel(torch.from_numpy(samples).to(dtype))  # (n_mels, T)
            feats = torch.log(torch.clamp(mel, min=LOG_FLOOR)).T.contiguous().float().numpy()
        else:
            fn = _ADAPTERS.get(self.cfg.adapter)
            if fn is None:
                raise ValidationError(f"Adaptador no registrado: {self.cfg.adapter}", code="unknown_adapter")
            feats = np.asarray(fn(np.asarray(audio.samples), audio.sample_rate), dtype=np.float32)

        expected = (n_frames, self.cfg.raw_dim)
        if feats.shape != expected:
            raise ValidationError(
                f"Forma de features inesperada: esperado {expected} (T a {FRAME_RATE}/s × ancho), "
                f"recibido {tuple(feats.shape)}.",
                code="shape_mismatch",
            )
        if not np.isfinite(feats).all():
            raise ValidationError("Features con valores no finitos.", code="non_finite")
        return feats

    def project(self, raw: torch.Tensor) -> torch.Tensor:
        return self.projection(raw)


class FeatureService:

    @staticmethod
    def _cache_path(clip_id: str, cfg: FrontendConfig) -> Path | None:
        cache_dir = getattr(settings, "PTSD_FEATURE_CACHE_DIR", "")
        if not cache_dir or not clip_id:
            return None
        return Path(cache_dir) / f"{clip_id}-{cfg.config_hash()}.npy"

    @staticmethod
    def raw_features(audio: AudioClip, frontend: Frontend) -> np.ndarray:
        path = FeatureService._cache_path(audio.clip_id, frontend.cfg)
        if path is not None and path.exists():
            return np.load(path)

        feats = frontend.raw(audio)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, feats)
            logger.debug("cache de features escrita: %s", path)
        return feats

    @staticmethod
    def extract_features(audio: AudioClip, frontend: Frontend) -> FeatureSequence:
        raw = torch.from_numpy(FeatureService.raw_features(audio, frontend))
        raw = raw.to(dtype=frontend.projection.weight.dtype, device=frontend.projection.weight.device)
        return FeatureSequence(frames=frontend.project(raw), clip_id=audio.clip_id)
