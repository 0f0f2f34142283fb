from __future__ import annotations

import io
import json
import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from frontend.services.feature_service import Frontend, FrontendConfig
from labels.services.label_service import LabelService
from labels.types import Segment, SegmentAnnotation, SpeakerProfile
from ptsd.network import ModelConfig
from ptsd.services.checkpoint_service import CheckpointService
from ptsd.systems import SystemKind, build_system
from runs.models import MetricRecord, RunRecord, RunStatus
from runs.services.run_config import RunConfig
from simulation.services.conversation_service import ConversationStats
from simulation.services.dataset_service import DatasetService
from training.services.sampler_service import (
    ClipData,
    ClipStore,
    collate,
    example_rng,
    sample_training_example,
)
from training.services.schedule import TrainConfig, lr_at_epoch
from training.services.train_service import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    METRICS_FILE,
    TrainingAborted,
    TrainService,
    checkpoint_name,
)

FOUR_SPEAKERS = (("s1", 0.0, 2.2), ("s2", 1.8, 4.2), ("s3", 4.0, 6.2), ("s4", 6.0, 8.0))


def toy_clip(clip_id: str = "c1", segments=FOUR_SPEAKERS, duration: float = 8.0, seed: int = 0) -> ClipData:
    ann = SegmentAnnotation(clip_id, duration, tuple(Segment(s, on, off) for s, on, off in segments))
    speakers = sorted({s for s, _, _ in segments})
    profiles = {s: SpeakerProfile(s, "female" if i % 2 else "male") for i, s in enumerate(speakers)}
    activity = LabelService.segments_to_activity(ann, speaker_ids=speakers)
    raw = np.random.default_rng(seed).standard_normal((activity.n_frames, 40)).astype(np.float32)
    return ClipData(clip_id, raw, ann, activity, profiles)


def toy_store() -> ClipStore:
    return ClipStore((toy_clip("c1", seed=1), toy_clip("c2", seed=2)))


def toy_run_config(**train) -> RunConfig:
    defaults = dict(
        batch_size=2, epochs=1, steps_per_epoch=2, chunk_min=2.0, chunk_max=4.0, eval_chunk=4.0,
    )
    defaults.update(train)
    return RunConfig(
        frontend=FrontendConfig(d_model=16),
        model=ModelConfig(d_model=16, n_heads=2, encoder_layers=1, decoder_layers=1),
        train=TrainConfig(**defaults),
        seed=3,
    )


class LearningRateTests(SimpleTestCase):
    def test_decay_per_epoch(self):
        cfg = TrainConfig()
        self.assertAlmostEqual(lr_at_epoch(cfg, 0), 1e-4)
        self.assertAlmostEqual(lr_at_epoch(cfg, 1), 9.5e-5)
        self.assertAlmostEqual(lr_at_epoch(cfg, 14), 4.877e-5, delta=1e-8)

    def test_negative_epoch(self):
        with self.assertRaises(ValidationError) as ctx:
            lr_at_epoch(TrainConfig(), -1)
        self.assertEqual(ctx.exception.code, "invalid_config")

    def test_invalid_chunk_range(self):
        with self.assertRaises(ValidationError):
            TrainConfig(chunk_min=30.0, chunk_max=20.0)


class SamplerTests(SimpleTestCase):
    def setUp(self):
        self.store = ClipStore((toy_clip(),))
        self.whole_clip = TrainConfig(chunk_min=10.0, chunk_max=10.0)

    def test_four_speakers_give_ten_prompts(self):
        example = sample_training_example(self.store, self.whole_clip, example_rng(0, 0, 0, 0))
        self.assertEqual(example.raw.shape, (200, 40))
        self.assertEqual(len(example.specs), 10)
        self.assertEqual([s.attribute for s in example.specs], ["T"] * 4 + ["G"] * 2 + ["N"] * 3 + ["K"])

    def test_anchor_rows_follow_their_speaker(self):
        example = sample_training_example(self.store, self.whole_clip, example_rng(0, 0, 0, 1))
        clip = self.store.clips[0]
        for desc, row in example.labels.rows:
            if desc.attribute == "T":
                np.testing.assert_array_equal(row, clip.activity.row(desc.speaker_id))
                self.assertEqual(int(clip.activity.counts()[int(desc.value)]), 1)

    def test_same_stream_same_example(self):
        cfg = TrainConfig(chunk_min=2.0, chunk_max=4.0)
        a = sample_training_example(self.store, cfg, example_rng(5, 1, 2, 3))
        b = sample_training_example(self.store, cfg, example_rng(5, 1, 2, 3))
        self.assertEqual(a.start_frame, b.start_frame)
        self.assertEqual(a.specs, b.specs)
        np.testing.assert_array_equal(a.labels.matrix(), b.labels.matrix())

    def test_lengths_beyond_the_clip_are_resampled(self):
        cfg = TrainConfig(chunk_min=5.0, chunk_max=20.0)
        lengths = [
            sample_training_example(self.store, cfg, example_rng(1, 0, step, 0)).raw.shape[0]
            for step in range(40)
        ]
        self.assertTrue(all(125 <= n <= 200 for n in lengths), lengths)
        self.assertGreater(len(set(lengths)), 10)

    def test_single_speaker_chunk(self):
        store = ClipStore((toy_clip(segments=(("a", 0.5, 7.5),)),))
        example = sample_training_example(store, self.whole_clip, example_rng(0, 0, 0, 0))
        self.assertEqual(sum(s.attribute == "T" for s in example.specs), 1)
        overlap = [row for desc, row in example.labels.rows if desc.attribute == "N" and desc.value == "overlap"]
        self.assertEqual(int(overlap[0].sum()), 0)

    def test_max_prompts(self):
        cfg = TrainConfig(chunk_min=10.0, chunk_max=10.0, max_prompts=3)
        example = sample_training_example(self.store, cfg, example_rng(0, 0, 0, 0))
        self.assertEqual(len(example.specs), 3)

    def test_gender_system_has_only_gender_rows(self):
        example = sample_training_example(
            self.store, self.whole_clip, example_rng(0, 0, 0, 0), SystemKind.GENDER_BASELINE1,
        )
        self.assertEqual([d.attribute for d in example.labels.descriptors], ["G", "G"])

    def test_tsvad_rows_per_enrolled_speaker(self):
        example = sample_training_example(self.store, self.whole_clip, example_rng(0, 0, 0, 0), SystemKind.TSVAD)
        self.assertEqual(len(example.enrollments), 4)
        self.assertEqual(example.pooled.shape, (4, 40))

    def test_empty_store(self):
        with self.assertRaises(ValidationError) as ctx:
            sample_training_example(ClipStore(()), self.whole_clip, example_rng(0, 0, 0, 0))
        self.assertEqual(ctx.exception.code, "empty_manifest")

    def test_collate_pads_and_masks(self):
        short = ClipStore((toy_clip(segments=(("a", 0.0, 1.0), ("b", 1.0, 2.0)), duration=2.0),))
        a = sample_training_example(self.store, self.whole_clip, example_rng(0, 0, 0, 0))
        b = sample_training_example(short, self.whole_clip, example_rng(0, 0, 0, 1))
        batch = collate([a, b], SystemKind.PTSD)
        self.assertEqual(tuple(batch.raw.shape), (2, 200, 40))
        self.assertEqual(batch.frame_mask.sum(dim=1).tolist(), [200, 50])
        self.assertEqual(batch.query_mask.sum(dim=1).tolist(), [10, len(b.specs)])
        self.assertEqual(float(batch.targets[1, :, 50:].abs().sum()), 0.0)
        self.assertEqual(batch.prompts.n_queries, 10)

    def test_workers_do_not_change_batches(self):
        cfg = TrainConfig(chunk_min=2.0, chunk_max=4.0, batch_size=3)
        serial = TrainService.sample_batch(self.store, cfg, 1, 0, 0, SystemKind.PTSD)
        threaded = TrainService.sample_batch(
            self.store, TrainConfig(chunk_min=2.0, chunk_max=4.0, batch_size=3, workers=2), 1, 0, 0, SystemKind.PTSD,
        )
        self.assertTrue(bool((serial.raw == threaded.raw).all()))
        self.assertTrue(bool((serial.targets == threaded.targets).all()))


class RunStepTests(SimpleTestCase):
    def test_non_finite_loss_names_clips_and_step(self):
        clip = toy_clip()
        clip = ClipData(clip.clip_id, np.full_like(clip.raw, np.nan), clip.annotation, clip.activity, clip.profiles)
        cfg = TrainConfig(chunk_min=2.0, chunk_max=2.0, batch_size=1)
        example = sample_training_example(ClipStore((clip,)), cfg, example_rng(0, 0, 0, 0))
        model = build_system(SystemKind.PTSD, FrontendConfig(d_model=16), ModelConfig(d_model=16, n_heads=2))
        optimizer = TrainService.build_optimizer(model, cfg)
        with self.assertRaises(TrainingAborted) as ctx:
            TrainService.run_step(model, optimizer, collate([example], SystemKind.PTSD), cfg, step=7)
        self.assertEqual(ctx.exception.clip_ids, ("c1",))
        self.assertEqual(ctx.exception.step, 7)


class TrainLoopTests(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.store = toy_store()

    def tearDown(self):
        self.tmp.cleanup()

    def test_one_epoch_writes_checkpoints_and_metrics(self):
        result = TrainService.train_loop(self.store, self.store, toy_run_config(), self.root / "run")
        out = self.root / "run"
        for name in (checkpoint_name(1), LAST_CHECKPOINT, BEST_CHECKPOINT, "run_config.json"):
            self.assertTrue((out / name).exists(), name)
        lines = (out / METRICS_FILE).read_text().splitlines()
        self.assertEqual(len(lines), 1)
        record = json.loads(lines[0])
        self.assertEqual(record["epoch"], 1)
        self.assertAlmostEqual(record["lr"], 1e-4)
        self.assertIn("T", record["metrics"]["attributes"])
        self.assertEqual(result.best_epoch, 1)
        self.assertEqual(len(result.step_losses), 2)

    def test_resume_without_pending_epochs_keeps_parameters(self):
        first = TrainService.train_loop(self.store, None, toy_run_config(), self.root / "a")
        again = TrainService.train_loop(
            self.store, None, toy_run_config(), self.root / "b", resume=first.last_checkpoint,
        )
        self.assertEqual(again.history, ())
        self.assertEqual(first.last_checkpoint.read_bytes(), again.last_checkpoint.read_bytes())

    def test_resume_matches_uninterrupted_run(self):
        straight = TrainService.train_loop(self.store, None, toy_run_config(epochs=2), self.root / "straight")
        half = TrainService.train_loop(self.store, None, toy_run_config(epochs=1), self.root / "half")
        resumed = TrainService.train_loop(
            self.store, None, toy_run_config(epochs=2), self.root / "resumed", resume=half.last_checkpoint,
        )
        self.assertEqual(len(resumed.history), 1)
        self.assertEqual(resumed.step_losses, straight.step_losses[2:])
        a = CheckpointService.read(straight.out_dir / checkpoint_name(2)).parameters
        b = CheckpointService.read(resumed.out_dir / checkpoint_name(2)).parameters
        for name, value in a.items():
            np.testing.assert_array_equal(value, b[name], err_msg=name)

    def test_same_seed_same_bytes(self):
        a = TrainService.train_loop(self.store, None, toy_run_config(), self.root / "a")
        b = TrainService.train_loop(self.store, None, toy_run_config(), self.root / "b")
        self.assertEqual(a.last_checkpoint.read_bytes(), b.last_checkpoint.read_bytes())

    def test_fine_tune_starts_from_parameters(self):
        base = TrainService.train_loop(self.store, None, toy_run_config(), self.root / "base")
        tuned = TrainService.train_loop(
            self.store, None, toy_run_config(), self.root / "tuned", init_from=base.last_checkpoint,
        )
        self.assertEqual(tuned.history[0].epoch, 1)
        self.assertNotEqual(base.step_losses, tuned.step_losses)

    def test_resume_and_init_from_are_exclusive(self):
        with self.assertRaises(ValidationError) as ctx:
            TrainService.train_loop(self.store, None, toy_run_config(), self.root, resume="a", init_from="b")
        self.assertEqual(ctx.exception.code, "invalid_config")

    def test_resume_with_other_architecture(self):
        first = TrainService.train_loop(self.store, None, toy_run_config(), self.root / "a")
        other = RunConfig(
            frontend=FrontendConfig(d_model=32),
            model=ModelConfig(d_model=32, n_heads=2, encoder_layers=1, decoder_layers=1),
            train=toy_run_config().train,
        )
        with self.assertRaises(ValidationError) as ctx:
            TrainService.train_loop(self.store, None, other, self.root / "b", resume=first.last_checkpoint)
        self.assertEqual(ctx.exception.code, "config_mismatch")


class SmokeTrainingTests(TestCase):
    def test_loss_goes_down_on_simulated_clips(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = DatasetService.build_dataset(
                stats=ConversationStats(), n_speakers=2, n_clips=3, clip_duration=20.0, out_dir=Path(tmp) / "data", seed=5,
            )
            run_config = toy_run_config(lr0=3e-3, steps_per_epoch=40, chunk_min=4.0, chunk_max=8.0, eval_chunk=8.0)
            store = ClipStore.from_manifest(manifest, Frontend(run_config.frontend))
            result = TrainService.train_loop(store, None, run_config, Path(tmp) / "run")

        losses = np.asarray(result.step_losses)
        self.assertEqual(losses.size, 40)
        self.assertTrue(np.isfinite(losses).all())
        self.assertLess(float(np.median(losses[-4:])), float(np.median(losses[:4])))


class TrainCommandTests(TestCase):
    TINY = (
        "model.d_model=16",
        "model.n_heads=2",
        "model.encoder_layers=1",
        "model.decoder_layers=1",
        "train.epochs=1",
        "train.steps_per_epoch=1",
        "train.batch_size=1",
        "train.chunk_min=4",
        "train.chunk_max=6",
        "train.eval_chunk=10",
    )

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.manifest = DatasetService.build_dataset(
            stats=ConversationStats(), n_speakers=2, n_clips=1, clip_duration=10.0, out_dir=self.root / "data", seed=1,
        )

    def tearDown(self):
        self.tmp.cleanup()

    def _train(self, *overrides: str):
        args = ["--train-manifest", str(self.manifest.path), "--val-manifest", str(self.manifest.path),
                "--out", str(self.root / "ckpt"), "--seed", "4"]
        for item in (*self.TINY, *overrides):
            args += ["--set", item]
        call_command("train", *args, stdout=io.StringIO())

    def test_train_writes_run_and_metrics(self):
        self._train()
        out = self.root / "ckpt"
        self.assertTrue((out / LAST_CHECKPOINT).exists())
        saved = json.loads((out / "run_config.json").read_text())
        self.assertEqual(saved["seed"], 4)
        self.assertEqual(saved["frontend"]["d_model"], 16)

        run = RunRecord.objects.get(command="train")
        self.assertEqual(run.status, RunStatus.SUCCEEDED)
        self.assertEqual(run.seed, 4)
        self.assertEqual(MetricRecord.objects.filter(run=run).count(), 1)

    def test_unknown_override_is_a_validation_error(self):
        with self.assertRaises(CommandError) as ctx:
            self._train("model.bogus=1")
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(RunRecord.objects.get(command="train").status, RunStatus.FAILED)

    def test_default_output_under_runs_dir(self):
        args = ["--train-manifest", str(self.manifest.path), "--val-manifest", str(self.manifest.path), "--seed", "4"]
        for item in self.TINY:
            args += ["--set", item]
        with override_settings(PTSD_RUNS_DIR=str(self.root / "runs")):
            call_command("train", *args, stdout=io.StringIO())
        self.assertTrue((self.root / "runs" / SystemKind.PTSD.value / LAST_CHECKPOINT).exists())
        run = RunRecord.objects.get(command="train")
        self.assertEqual(run.output_path, str(self.root / "runs" / SystemKind.PTSD.value))
