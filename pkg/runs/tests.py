from __future__ import annotations

import json
import tempfile
from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from runs.models import MetricRecord, RunRecord, RunStatus
from runs.services.command_guard import EXIT_RUNTIME, EXIT_VALIDATION, guarded_run, validation_message
from runs.services.run_config import RunConfig
from runs.services.run_log_service import RunLogService


class RunConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = RunConfig()
        self.assertEqual(cfg.model.d_model, 256)
        self.assertEqual(cfg.train.lr0, 1e-4)
        self.assertEqual(cfg.eval.chunk, 40.0)

    def test_file_then_overrides(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "cfg.json"
            path.write_text(json.dumps({"train": {"epochs": 3, "lr0": 0.001}, "seed": 9}), encoding="utf-8")
            cfg = RunConfig.from_sources(path, ["train.epochs=5", "eval.per_clip=true", "model.d_model=64"])
        self.assertEqual(cfg.train.epochs, 5)
        self.assertEqual(cfg.train.lr0, 0.001)
        self.assertTrue(cfg.eval.per_clip)
        self.assertEqual(cfg.seed, 9)
        self.assertEqual(cfg.frontend.d_model, 64)

    def test_seed_flag_wins(self):
        self.assertEqual(RunConfig.from_sources(None, ["seed=3"], seed=7).seed, 7)

    def test_tuple_override(self):
        cfg = RunConfig.from_sources(None, ["eval.enrollment_lengths=0.5,1.5"])
        self.assertEqual(cfg.eval.enrollment_lengths, (0.5, 1.5))

    def test_unknown_key(self):
        with self.assertRaises(ValidationError) as ctx:
            RunConfig.from_sources(None, ["train.speed=2"])
        self.assertEqual(ctx.exception.code, "unknown_key")

    def test_unknown_section(self):
        with self.assertRaises(ValidationError) as ctx:
            RunConfig.from_dict({"optimizer": {}})
        self.assertEqual(ctx.exception.code, "unknown_key")

    def test_bad_value(self):
        with self.assertRaises(ValidationError) as ctx:
            RunConfig.from_sources(None, ["train.epochs=many"])
        self.assertEqual(ctx.exception.code, "invalid_config")

    def test_missing_file(self):
        with self.assertRaises(ValidationError) as ctx:
            RunConfig.from_sources("/nonexistent/cfg.json")
        self.assertEqual(ctx.exception.code, "missing_file")

    def test_explicit_width_mismatch(self):
        with self.assertRaises(ValidationError) as ctx:
            RunConfig.from_dict({"frontend": {"d_model": 32}, "model": {"d_model": 64}})
        self.assertEqual(ctx.exception.code, "invalid_config")

    def test_hash_is_stable_and_sensitive(self):
        a = RunConfig.from_sources(None, ["train.epochs=2"])
        b = RunConfig.from_sources(None, ["train.epochs=2"])
        c = RunConfig.from_sources(None, ["train.epochs=3"])
        self.assertEqual(a.config_hash(), b.config_hash())
        self.assertNotEqual(a.config_hash(), c.config_hash())
        self.assertEqual(len(a.config_hash()), 64)

    def test_written_config_reloads(self):
        cfg = RunConfig.from_sources(None, ["train.epochs=2", "seed=5"])
        with tempfile.TemporaryDirectory() as tmp:
            path = cfg.write(Path(tmp) / "run_config.json")
            again = RunConfig.from_sources(path)
        self.assertEqual(again, cfg)


class RunLogServiceTests(TestCase):
    def test_lifecycle(self):
        run = RunLogService.start(command="train", config_hash="a" * 64, seed=1)
        self.assertEqual(run.status, RunStatus.PENDING)

        RunLogService.annotate(run, output_path="/tmp/out", metadata={"epochs_run": 2})
        RunLogService.record_metric(run, epoch=1, lr=1e-4, loss=0.7, metrics={"mean_ap": 0.5})
        RunLogService.record_metric(run, epoch=1, lr=1e-4, loss=0.6, metrics={"mean_ap": 0.6})
        RunLogService.finish(run)

        run.refresh_from_db()
        self.assertEqual(run.status, RunStatus.SUCCEEDED)
        self.assertIsNotNone(run.finished_at)
        self.assertEqual(run.output_path, "/tmp/out")
        self.assertEqual(run.metadata["epochs_run"], 2)
        self.assertEqual(MetricRecord.objects.get(run=run, epoch=1).loss, 0.6)

    def test_fail_keeps_error(self):
        run = RunLogService.start(command="score")
        RunLogService.fail(run, "[bad_dump_line] x")
        run.refresh_from_db()
        self.assertEqual(run.status, RunStatus.FAILED)
        self.assertEqual(run.error, "[bad_dump_line] x")

    def test_no_run_is_a_no_op(self):
        self.assertIsNone(RunLogService.finish(None))
        self.assertIsNone(RunLogService.record_metric(None, epoch=1, lr=0.1, loss=None, metrics={}))


class GuardedRunTests(TestCase):
    def test_success(self):
        with guarded_run("simulate", config_hash="h") as run:
            pass
        run.refresh_from_db()
        self.assertEqual(run.status, RunStatus.SUCCEEDED)

    def test_validation_error_exits_two(self):
        with self.assertRaises(CommandError) as ctx:
            with guarded_run("infer"):
                raise ValidationError("sin prompts", code="missing_input")
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)
        run = RunRecord.objects.get(command="infer")
        self.assertEqual(run.status, RunStatus.FAILED)
        self.assertEqual(run.error, "[missing_input] sin prompts")

    def test_runtime_error_exits_one(self):
        with self.assertRaises(CommandError) as ctx:
            with guarded_run("train"):
                raise RuntimeError("boom")
        self.assertEqual(ctx.exception.returncode, EXIT_RUNTIME)
        self.assertIn("RuntimeError", RunRecord.objects.get(command="train").error)

    def test_message_without_code(self):
        self.assertEqual(validation_message(ValidationError("plain")), "plain")
