# simulation/services/dataset_service.py
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import soundfile as sf
from django.core.exceptions import ValidationError

from labels.services.rttm import read_rttm, write_rttm
from labels.types import AudioClip, Gender, SegmentAnnotation, SpeakerProfile
from simulation.services.conversation_service import ConversationService, ConversationStats, UtterancePool
from simulation.services.speaker_synth import SpeakerSynth

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
PROFILES_NAME = "profiles.jsonl"
VALID_N_SPEAKERS = (2, 3, 4)


class DatasetWriteError(RuntimeError):
    def __init__(self, path: Path, reason: str):
        super().__init__(f"No se pudo escribir {path}: {reason}")
        self.path = path


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: str
    wav_path: Path
    rttm_path: Path
    n_speakers: int
    profiles: tuple[SpeakerProfile, ...]

    @property
    def profile_map(self) -> dict[str, SpeakerProfile]:
        return {p.speaker_id: p for p in self.profiles}

    def to_line(self, root: Path) -> str:
        pairs = [f"{p.speaker_id}:{p.gender}" for p in self.profiles]
        fields = [
            self.clip_id,
            self.wav_path.relative_to(root).as_posix(),
            self.rttm_path.relative_to(root).as_posix(),
            str(self.n_speakers),
            *pairs,
        ]
        return "\t".join(fields)


@dataclass(frozen=True)
class DatasetManifest:
    path: Path
    records: tuple[ManifestRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _clip_rng_seeds(seed: int, index: int, n: int) -> list[int]:
    """Stream independiente por (seed, índice de clip): serial y paralelo coinciden."""
    ss = np.random.SeedSequence([seed, index])
    return [int(x) for x in ss.generate_state(n)]


def _generate_clip(args) -> tuple[int, AudioClip, SegmentAnnotation, tuple[SpeakerProfile, ...]]:
    stats, n_speakers, index, clip_duration, seed, sample_rate, pool = args
    clip_id = f"sim{n_speakers}spk_{index:05d}"
    gender_seed, conv_seed, *speaker_seeds = _clip_rng_seeds(seed, index, 2 + n_speakers)

    if pool is not None:
        chooser = np.random.default_rng(gender_seed)
        names = sorted(pool.profiles)
        if len(names) < n_speakers:
            raise ValidationError(f"El pool tiene {len(names)} hablantes, se piden {n_speakers}.", code="invalid_speakers")
        picked = chooser.choice(len(names), size=n_speakers, replace=False)
        profiles = tuple(pool.profiles[names[int(i)]] for i in sorted(picked))
    else:
        genders = np.random.default_rng(gender_seed).integers(0, 2, size=n_speakers)
        profiles = tuple(
            SpeakerSynth.synth_speaker(
                speaker_seeds[k],
                Gender.FEMALE if genders[k] == 0 else Gender.MALE,
                speaker_id=f"{clip_id}_s{k + 1}",
            )
            for k in range(n_speakers)
        )

    audio, ann = ConversationService.sample_conversation(
        stats, profiles, clip_duration, conv_seed, clip_id=clip_id, sample_rate=sample_rate, pool=pool,
    )
    return index, audio, ann, profiles


class DatasetService:

    @staticmethod
    def build_dataset(
        *,
        stats: ConversationStats,
        n_speakers: int,
        n_clips: int,
        clip_duration: float,
        out_dir: str | Path,
        seed: int,
        sample_rate: int = 16000,
        workers: int = 0,
        pool: UtterancePool | None = None,
    ) -> DatasetManifest:
        if n_speakers not in VALID_N_SPEAKERS:
            raise ValidationError(f"n_speakers debe estar en {VALID_N_SPEAKERS}, se recibió {n_speakers}.", code="invalid_speakers")
        if n_clips <= 0:
            raise ValidationError("n_clips debe ser > 0.", code="invalid_clips")

        root = Path(out_dir).resolve()
        wav_dir, rttm_dir = root / "wav", root / "rttm"
        for d in (root, wav_dir, rttm_dir):
            try:
                d.mkdir(parents=True, exist_ok=True)
            except OSError as ex:
                raise DatasetWriteError(d, str(ex)) from ex

        jobs = [(stats, n_speakers, i, clip_duration, seed, sample_rate, pool) for i in range(n_clips)]
        if workers > 0:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(_generate_clip, jobs))
        else:
            results = [_generate_clip(job) for job in jobs]

        records: list[ManifestRecord] = []
        profile_lines: list[str] = []
        for index, audio, ann, profiles in sorted(results, key=lambda r: r[0]):
            wav_path = wav_dir / f"{ann.clip_id}.wav"
            rttm_path = rttm_dir / f"{ann.clip_id}.rttm"
            try:
                sf.write(str(wav_path), audio.samples, audio.sample_rate, subtype="PCM_16", format="WAV")
            except (OSError, RuntimeError) as ex:
                raise DatasetWriteError(wav_path, str(ex)) from ex
            try:
                write_rttm(ann, rttm_path)
            except OSError as ex:
                raise DatasetWriteError(rttm_path, str(ex)) from ex

            records.append(ManifestRecord(ann.clip_id, wav_path, rttm_path, n_speakers, profiles))
            for p in profiles:
                profile_lines.append(json.dumps({"clip_id": ann.clip_id, **asdict(p)}, sort_keys=True))
            logger.info("clip=%s speakers=%d segments=%d escrito", ann.clip_id, n_speakers, len(ann.segments))

        manifest_path = root / MANIFEST_NAME
        try:
            manifest_path.write_text("".join(f"{r.to_line(root)}\n" for r in records), encoding="utf-8")
            (root / PROFILES_NAME).write_text("".join(f"{line}\n" for line in profile_lines), encoding="utf-8")
        except OSError as ex:
            raise DatasetWriteError(manifest_path, str(ex)) from ex

        return DatasetManifest(path=manifest_path, records=tuple(records))

    @staticmethod
    def read_manifest(path: str | Path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as ex:
            raise ValidationError(f"No se pudo leer el manifest {path}: {ex}", code="missing_file")

        root = path.parent.resolve()
        records = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            fields = raw.split("\t")
            if len(fields) < 4:
                raise ValidationError(f"{path}:{lineno}: faltan campos.", code="bad_manifest_line")
            clip_id, wav_rel, rttm_rel, n_spk = fields[:4]
            try:
                n_speakers = int(n_spk)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: n_speakers no numérico.", code="bad_manifest_line")
            if n_speakers not in VALID_N_SPEAKERS:
                raise ValidationError(f"{path}:{lineno}: n_speakers={n_speakers} fuera de {VALID_N_SPEAKERS}.", code="bad_manifest_line")

            profiles = []
            for pair in fields[4:]:
                speaker_id, _, gender = pair.rpartition(":")
                profiles.append(SpeakerProfile(speaker_id=speaker_id, gender=gender))

            wav_path, rttm_path = (root / wav_rel).resolve(), (root / rttm_rel).resolve()
            for p in (wav_path, rttm_path):
                if not p.exists():
                    raise ValidationError(f"{path}:{lineno}: no existe {p}", code="missing_file")
            records.append(ManifestRecord(clip_id, wav_path, rttm_path, n_speakers, tuple(profiles)))

        return DatasetManifest(path=path, records=tuple(records))

    @staticmethod
    def load_clip(record: ManifestRecord) -> tuple[AudioClip, SegmentAnnotation]:
        audio, sr = sf.read(str(record.wav_path), dtype="float32", always_2d=False)
        clip = AudioClip(samples=audio, sample_rate=sr, clip_id=record.clip_id)
        ann = read_rttm(record.rttm_path, durations={record.clip_id: clip.duration})[record.clip_id]
        return clip, ann
