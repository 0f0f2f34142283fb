from __future__ import annotations

import io
import tempfile
from itertools import combinations
from pathlib import Path

import numpy as np
import soundfile as sf
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from labels.services.label_service import LabelService
from labels.services.rttm import read_rttm
from labels.types import SpeakerProfile
from runs.models import RunRecord, RunStatus
from simulation.services.conversation_service import ConversationService, ConversationStats, load_utterance_pool
from simulation.services.dataset_service import DatasetService, _generate_clip
from simulation.services.speaker_synth import SpeakerSynth, SynthConfig


def _profiles(n: int) -> list[SpeakerProfile]:
    return [SpeakerSynth.synth_speaker(100 + i, "female" if i % 2 else "male", speaker_id=f"s{i + 1}") for i in range(n)]


class SpeakerSynthTests(SimpleTestCase):
    def test_same_seed_same_profile(self):
        self.assertEqual(SpeakerSynth.synth_speaker(7, "female"), SpeakerSynth.synth_speaker(7, "female"))

    def test_female_f0_range(self):
        for seed in range(20):
            profile = SpeakerSynth.synth_speaker(seed, "female")
            self.assertTrue(165.0 <= profile.f0_base <= 255.0)

    def test_profiles_are_distinct(self):
        params = {
            (p.f0_base, p.formants)
            for p in (SpeakerSynth.synth_speaker(seed, "male") for seed in range(100))
        }
        self.assertGreaterEqual(len(params), 99)

    def test_utterance_length(self):
        clip = SpeakerSynth.synth_utterance(SpeakerSynth.synth_speaker(1, "male"), 1.0, seed=3)
        self.assertEqual(len(clip.samples), 16000)
        self.assertEqual(clip.sample_rate, 16000)

    def test_rms_matches_configured_level(self):
        for seed in range(12):
            profile = SpeakerSynth.synth_speaker(seed, "female" if seed % 2 else "male")
            for duration, level in ((0.7, 0.05), (2.3, 0.1)):
                samples = SpeakerSynth.synth_utterance(profile, duration, seed=seed, cfg=SynthConfig(rms_level=level)).samples
                rms = float(np.sqrt(np.mean(samples.astype(np.float64) ** 2)))
                self.assertLessEqual(abs(rms - level) / level, 0.05, (seed, duration))

    def test_non_positive_duration(self):
        with self.assertRaises(ValidationError) as ctx:
            SpeakerSynth.synth_utterance(SpeakerSynth.synth_speaker(1, "male"), 0.0)
        self.assertEqual(ctx.exception.code, "bad_duration")

    def test_distinct_profiles_have_distinct_spectral_peaks(self):
        cfg = SynthConfig(jitter_depth=0.0, noise_level=0.0)
        low = SpeakerProfile("a", "male", f0_base=125.0, formants=(1.0, 1.0, 1.0))
        high = SpeakerProfile("b", "female", f0_base=230.0, formants=(1.0, 1.0, 1.0))
        peaks = []
        for profile in (low, high):
            samples = SpeakerSynth.synth_utterance(profile, 1.0, seed=5, cfg=cfg).samples
            spectrum = np.abs(np.fft.rfft(samples))
            peaks.append(float(np.fft.rfftfreq(len(samples), 1 / 16000)[int(np.argmax(spectrum))]))
        self.assertGreater(abs(peaks[0] - peaks[1]), 10.0)


class ConversationTests(SimpleTestCase):
    def test_no_overlap_probability_gives_empty_overlap_row(self):
        stats = ConversationStats(overlap_probability=0.0)
        _, ann = ConversationService.sample_conversation(stats, _profiles(3), 20.0, seed=1, clip_id="c")
        act = LabelService.segments_to_activity(ann)
        counter = LabelService.derive_counter_labels(act.matrix)
        self.assertEqual(int(counter[2].sum()), 0)

    def test_fixed_seed_is_bit_identical(self):
        stats = ConversationStats()
        a_audio, a_ann = ConversationService.sample_conversation(stats, _profiles(2), 10.0, seed=9, clip_id="c")
        b_audio, b_ann = ConversationService.sample_conversation(stats, _profiles(2), 10.0, seed=9, clip_id="c")
        self.assertEqual(a_ann, b_ann)
        self.assertEqual(a_audio.samples.tobytes(), b_audio.samples.tobytes())

    def test_every_speaker_appears(self):
        _, ann = ConversationService.sample_conversation(ConversationStats(), _profiles(4), 30.0, seed=2, clip_id="c")
        self.assertEqual(set(ann.speakers), {"s1", "s2", "s3", "s4"})

    def test_non_speech_frames_carry_no_speech_energy(self):
        n_silent = 0
        for seed in range(5):
            audio, ann = ConversationService.sample_conversation(
                ConversationStats(), _profiles(3), 20.0, seed=seed, clip_id="c",
            )
            activity = LabelService.segments_to_activity(ann)
            frames = audio.samples[: activity.n_frames * 640].astype(np.float64).reshape(activity.n_frames, 640)
            energy = np.sqrt(np.mean(frames ** 2, axis=1))
            active = activity.counts() > 0
            # Frames sin habla lejos de cualquier borde de segmento
            silent = ~(active | np.r_[False, active[:-1]] | np.r_[active[1:], False])
            n_silent += int(silent.sum())
            if silent.any():
                self.assertLess(energy[silent].max(), 0.1 * np.median(energy[active]), seed)
        self.assertGreater(n_silent, 0)

    def test_too_short_target(self):
        with self.assertRaises(ValidationError) as ctx:
            ConversationService.sample_conversation(ConversationStats(), _profiles(2), 2.0, seed=0)
        self.assertEqual(ctx.exception.code, "too_short")

    def test_overlap_fraction_matches_probability(self):
        stats = ConversationStats(overlap_probability=0.3)
        overlapped = transitions = 0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            turns = ConversationService._sample_turns(stats, ["a", "b"], 30.0, rng)
            for prev, nxt in zip(turns, turns[1:]):
                transitions += 1
                overlapped += int(nxt.onset < prev.offset)
        self.assertTrue(0.25 <= overlapped / transitions <= 0.35, overlapped / transitions)

    def test_turn_ends_are_monotone_per_speaker(self):
        rng = np.random.default_rng(11)
        turns = ConversationService._sample_turns(ConversationStats(overlap_probability=0.9), ["a", "b", "c"], 60.0, rng)
        for speaker in "abc":
            own = [t for t in turns if t.speaker_id == speaker]
            for prev, nxt in zip(own, own[1:]):
                self.assertGreaterEqual(nxt.onset, prev.offset)

    def test_invalid_stats(self):
        with self.assertRaises(ValidationError):
            ConversationStats(overlap_probability=1.5)


class UtterancePoolTests(SimpleTestCase):
    def test_pool_drives_conversation(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            lines = []
            for idx, gender in enumerate(("female", "male")):
                wav = root / f"p{idx}.wav"
                tone = 0.1 * np.sin(2 * np.pi * (200 + 100 * idx) * np.arange(16000) / 16000)
                sf.write(str(wav), tone.astype(np.float32), 16000)
                lines.append(f"p{idx}\t{gender}\t{wav.name}")
            (root / "pool.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

            pool = load_utterance_pool(root / "pool.tsv")
            self.assertEqual(sorted(pool.profiles), ["p0", "p1"])
            audio, ann = ConversationService.sample_conversation(
                ConversationStats(), list(pool.profiles.values()), 10.0, seed=3, clip_id="c", pool=pool,
            )
            self.assertEqual(len(audio.samples), 160000)
            self.assertEqual(set(ann.speakers), {"p0", "p1"})


class BuildDatasetTests(SimpleTestCase):
    def test_manifest_and_audio(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = DatasetService.build_dataset(
                stats=ConversationStats(), n_speakers=4, n_clips=2, clip_duration=20.0, out_dir=tmp, seed=5,
            )
            self.assertEqual(len(manifest), 2)
            for record in manifest:
                info = sf.info(str(record.wav_path))
                self.assertEqual(info.frames, 20 * 16000)
                ann = read_rttm(record.rttm_path)[record.clip_id]
                self.assertEqual(len(ann.speakers), 4)

            again = DatasetService.read_manifest(manifest.path)
            self.assertEqual([r.clip_id for r in again], [r.clip_id for r in manifest])
            self.assertEqual(
                [(p.speaker_id, p.gender) for p in again.records[0].profiles],
                [(p.speaker_id, p.gender) for p in manifest.records[0].profiles],
            )

    def test_rttm_round_trips_to_the_same_frame_labels(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = DatasetService.build_dataset(
                stats=ConversationStats(), n_speakers=3, n_clips=4, clip_duration=15.0, out_dir=tmp, seed=8,
            )
            for index, record in enumerate(manifest):
                _, _, generated, _ = _generate_clip((ConversationStats(), 3, index, 15.0, 8, 16000, None))
                _, loaded = DatasetService.load_clip(record)
                speakers = list(record.profile_map)
                np.testing.assert_array_equal(
                    LabelService.segments_to_activity(loaded, speaker_ids=speakers).matrix,
                    LabelService.segments_to_activity(generated, speaker_ids=speakers).matrix,
                )

    def test_speaker_ids_unique_within_clip(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = DatasetService.build_dataset(
                stats=ConversationStats(), n_speakers=3, n_clips=1, clip_duration=10.0, out_dir=tmp, seed=1,
            )
            ids = [p.speaker_id for p in manifest.records[0].profiles]
            for a, b in combinations(ids, 2):
                self.assertNotEqual(a, b)

    def test_invalid_speaker_count(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ValidationError) as ctx:
                DatasetService.build_dataset(
                    stats=ConversationStats(), n_speakers=5, n_clips=1, clip_duration=10.0, out_dir=tmp, seed=1,
                )
        self.assertEqual(ctx.exception.code, "invalid_speakers")

    def test_read_manifest_missing(self):
        with self.assertRaises(ValidationError) as ctx:
            DatasetService.read_manifest("/nonexistent/manifest.tsv")
        self.assertEqual(ctx.exception.code, "missing_file")


class SimulateCommandTests(TestCase):
    def _run(self, out: Path, **extra):
        call_command(
            "simulate",
            "--n-speakers", str(extra.get("n_speakers", 2)),
            "--clips", "2",
            "--duration", "10",
            "--seed", "7",
            "--out", str(out),
            "--workers", "0",
            stdout=io.StringIO(),
        )

    def test_same_flags_give_identical_output(self):
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "a", Path(tmp) / "b"
            self._run(a)
            self._run(b)
            for rel in ("manifest.tsv", "profiles.jsonl", "run_config.json"):
                self.assertEqual((a / rel).read_bytes(), (b / rel).read_bytes())
            for wav in sorted((a / "wav").iterdir()):
                self.assertEqual(wav.read_bytes(), (b / "wav" / wav.name).read_bytes())
            self.assertEqual(len((a / "manifest.tsv").read_text().splitlines()), 2)

        run = RunRecord.objects.filter(command="simulate").first()
        self.assertEqual(run.status, RunStatus.SUCCEEDED)
        self.assertEqual(len(run.config_hash), 64)

    def test_default_output_under_data_dir(self):
        with tempfile.TemporaryDirectory() as tmp, override_settings(PTSD_DATA_DIR=tmp):
            call_command(
                "simulate", "--n-speakers", "3", "--clips", "1", "--duration", "10", "--seed", "7",
                "--workers", "0", stdout=io.StringIO(),
            )
            self.assertTrue((Path(tmp) / "sim3spk" / "manifest.tsv").exists())
            run = RunRecord.objects.get(command="simulate")
            self.assertEqual(run.output_path, str(Path(tmp) / "sim3spk"))

    def test_five_speakers_exits_with_validation_code(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError) as ctx:
                self._run(Path(tmp) / "x", n_speakers=5)
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(RunRecord.objects.get(command="simulate").status, RunStatus.FAILED)
