from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from frontend.services.feature_service import FrontendConfig
from labels.types import AudioClip, EventDescriptor, FrameLabelSet
from ptsd.network import ModelConfig, PosteriorSet, PTSDModel, SinusoidalPositionalEncoding, sinusoid_table
from ptsd.prompts import PromptBatch, PromptSpec, parse_prompt_lines
from ptsd.services.checkpoint_service import CheckpointService
from ptsd.services.loss import bce_loss, masked_bce
from ptsd.services.model_service import ModelService
from ptsd.systems import SystemKind, build_system, system_config

FEMALE = PromptSpec.categorical("G", "female")
OVERLAP = PromptSpec.categorical("N", "overlap")
KEYNOTE = PromptSpec.categorical("K", "keynote")


def _tiny(d_model: int = 16, seed: int = 0) -> tuple[PTSDModel, FrontendConfig, ModelConfig]:
    torch.manual_seed(seed)
    fcfg = FrontendConfig(d_model=d_model)
    mcfg = ModelConfig(d_model=d_model, n_heads=2, encoder_layers=1, decoder_layers=1, dropout=0.0)
    return PTSDModel(fcfg, mcfg), fcfg, mcfg


class ResolvePromptTests(SimpleTestCase):
    def setUp(self):
        self.model, _, _ = _tiny()
        self.f_a = torch.randn(50, 16)

    def test_timestamp_prompt_is_feature_row(self):
        vec = ModelService.resolve_prompt(PromptSpec.timestamp(10), self.f_a, self.model)
        self.assertTrue(torch.equal(vec, self.f_a[10]))

    def test_categorical_prompt_is_stable(self):
        a = ModelService.resolve_prompt(FEMALE, self.f_a, self.model)
        b = ModelService.resolve_prompt(FEMALE, torch.randn(30, 16), self.model)
        self.assertTrue(torch.equal(a, b))

    def test_timestamp_past_the_end(self):
        with self.assertRaises(ValidationError) as ctx:
            ModelService.resolve_prompt(PromptSpec.timestamp(50), self.f_a, self.model)
        self.assertEqual(ctx.exception.code, "prompt_out_of_range")


class EncodeDecodeTests(SimpleTestCase):
    def setUp(self):
        self.model, _, _ = _tiny()
        self.model.eval()
        self.f_a = torch.randn(1, 20, 16)

    def test_encode_keeps_shape_and_is_deterministic(self):
        with torch.no_grad():
            a = self.model.encode(self.f_a)
            b = self.model.encode(self.f_a)
        self.assertEqual(tuple(a.shape), (1, 20, 16))
        self.assertTrue(torch.equal(a, b))

    def test_decode_one_and_ten_queries(self):
        with torch.no_grad():
            f_enc = self.model.encode(self.f_a)
            self.assertEqual(tuple(self.model.decode(torch.randn(1, 1, 16), f_enc).shape), (1, 1, 16))
            self.assertEqual(tuple(self.model.decode(torch.randn(1, 10, 16), f_enc).shape), (1, 10, 16))

    def test_decode_without_queries(self):
        with self.assertRaises(ValidationError) as ctx:
            self.model.decode(torch.zeros(1, 0, 16), self.model.encode(self.f_a))
        self.assertEqual(ctx.exception.code, "empty_prompts")


class ScoreTests(SimpleTestCase):
    def test_zero_vectors_give_one_half(self):
        out = PTSDModel.score(torch.zeros(1, 3, 4), torch.zeros(1, 5, 4))
        torch.testing.assert_close(out, torch.full((1, 3, 5), 0.5))

    def test_hand_example(self):
        f_enc = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
        f_dec = torch.tensor([[[1.0, 1.0]]])
        out = PTSDModel.score(f_dec, f_enc)
        expected = 1.0 / (1.0 + math.exp(-1.0))
        torch.testing.assert_close(out, torch.full((1, 1, 2), expected))
        self.assertAlmostEqual(float(out[0, 0, 0]), 0.7311, places=4)

    def test_width_mismatch(self):
        with self.assertRaises(ValidationError) as ctx:
            PTSDModel.score(torch.zeros(1, 1, 3), torch.zeros(1, 2, 4))
        self.assertEqual(ctx.exception.code, "shape_mismatch")


class ForwardTests(SimpleTestCase):
    def setUp(self):
        self.model, _, _ = _tiny()

    def test_forty_seconds_give_thousand_frames(self):
        clip = AudioClip(np.zeros(40 * 16000, dtype=np.float32), 16000, "long")
        out = ModelService.forward(self.model, clip, [FEMALE, OVERLAP, PromptSpec.timestamp(500)])
        self.assertEqual(out.values.shape, (3, 1000))
        self.assertEqual(out.clip_id, "long")
        self.assertTrue(((out.values > 0) & (out.values < 1)).all())

    def test_duplicate_prompts_give_identical_rows(self):
        raw = torch.randn(30, 40)
        out = ModelService.forward(self.model, raw, [FEMALE, KEYNOTE, FEMALE])
        np.testing.assert_array_equal(out.values[0], out.values[2])

    def test_forward_restores_training_mode(self):
        self.model.train()
        ModelService.forward(self.model, torch.randn(10, 40), [FEMALE])
        self.assertTrue(self.model.training)

    def test_empty_prompt_list(self):
        with self.assertRaises(ValidationError) as ctx:
            ModelService.forward(self.model, torch.randn(10, 40), [])
        self.assertEqual(ctx.exception.code, "empty_prompts")

    def test_query_permutation_is_exact(self):
        raw = torch.randn(40, 40)
        specs = [FEMALE, OVERLAP, PromptSpec.timestamp(5), KEYNOTE, PromptSpec.timestamp(31)]
        perm = [3, 0, 4, 2, 1]
        base = ModelService.forward(self.model, raw, specs)
        permuted = ModelService.forward(self.model, raw, [specs[i] for i in perm])
        np.testing.assert_array_equal(permuted.values, base.values[perm])

    def test_independent_queries_ignore_neighbours(self):
        torch.manual_seed(3)
        fcfg = FrontendConfig(d_model=16)
        mcfg = ModelConfig(
            d_model=16, n_heads=2, encoder_layers=1, decoder_layers=1, dropout=0.0, query_interaction="independent",
        )
        model = PTSDModel(fcfg, mcfg)
        raw = torch.randn(20, 40)
        alone = ModelService.forward(model, raw, [FEMALE])
        together = ModelService.forward(model, raw, [FEMALE, OVERLAP, KEYNOTE])
        np.testing.assert_allclose(together.values[0], alone.values[0], rtol=1e-5, atol=1e-6)

    def test_sequence_longer_than_positional_table(self):
        torch.manual_seed(0)
        mcfg = ModelConfig(d_model=16, n_heads=2, encoder_layers=1, decoder_layers=1, dropout=0.0, max_len=8)
        model = PTSDModel(FrontendConfig(d_model=16), mcfg)
        out = ModelService.forward(model, torch.randn(20, 40), [FEMALE, PromptSpec.timestamp(15)])
        self.assertEqual(out.values.shape, (2, 20))

        short = SinusoidalPositionalEncoding(16, 8)
        encoded = short(torch.zeros(1, 20, 16))
        torch.testing.assert_close(encoded[0], sinusoid_table(20, 16))
        torch.testing.assert_close(encoded[0, :8], short.table)


class BceLossTests(SimpleTestCase):
    def _labels(self, desc: EventDescriptor, row) -> FrameLabelSet:
        row = np.asarray(row, dtype=np.uint8)
        return FrameLabelSet(len(row), ((desc, row),))

    def test_one_half_gives_ln2(self):
        desc = FEMALE.descriptor
        post = PosteriorSet((desc,), np.array([[0.5, 0.5]]))
        self.assertAlmostEqual(bce_loss(post, self._labels(desc, [1, 0])), math.log(2), places=4)

    def test_quarter_on_positive(self):
        desc = KEYNOTE.descriptor
        post = PosteriorSet((desc,), np.array([[0.25]]))
        self.assertAlmostEqual(bce_loss(post, self._labels(desc, [1])), 1.3863, places=4)

    def test_rows_are_matched_by_descriptor(self):
        a, b = FEMALE.descriptor, OVERLAP.descriptor
        post = PosteriorSet((b, a), np.array([[0.25], [0.5]]))
        labels = FrameLabelSet(1, ((a, np.array([1], dtype=np.uint8)), (b, np.array([1], dtype=np.uint8))))
        self.assertAlmostEqual(bce_loss(post, labels), (math.log(2) + math.log(4)) / 2, places=6)

    def test_row_count_mismatch(self):
        desc = FEMALE.descriptor
        post = PosteriorSet((desc, OVERLAP.descriptor), np.full((2, 2), 0.5))
        with self.assertRaises(ValidationError) as ctx:
            bce_loss(post, self._labels(desc, [1, 0]))
        self.assertEqual(ctx.exception.code, "descriptor_mismatch")

    def test_masked_bce_ignores_padding(self):
        probs = torch.tensor([[[0.5, 0.01], [0.9, 0.9]]])
        targets = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]])
        loss = masked_bce(probs, targets, torch.tensor([[True, False]]), torch.tensor([[True, False]]))
        self.assertAlmostEqual(float(loss), math.log(2), places=5)


class GradientCheckTests(SimpleTestCase):
    """Gradiente analítico contra diferencias centrales, T=8, D=16, en doble precisión."""

    def test_every_parameter_block(self):
        model, _, _ = _tiny(seed=1)
        model.double().eval()
        raw = torch.randn(1, 8, 40, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        batch = PromptBatch.from_specs([[FEMALE, OVERLAP, PromptSpec.timestamp(3)]], n_frames=[8])
        targets = torch.from_numpy(np.random.default_rng(0).integers(0, 2, (1, 3, 8))).double()
        frames = torch.ones(1, 8, dtype=torch.bool)

        def loss_fn() -> torch.Tensor:
            return masked_bce(model(raw, batch, frames), targets, frames, batch.valid)

        model.zero_grad()
        loss_fn().backward()
        step = 1e-4
        checked = 0
        for name, param in model.named_parameters():
            if param.grad is None:
                continue
            flat_grad = param.grad.reshape(-1)
            idx = int(flat_grad.abs().argmax())
            analytic = float(flat_grad[idx])
            flat = param.data.reshape(-1)
            original = float(flat[idx])
            flat[idx] = original + step
            up = float(loss_fn())
            flat[idx] = original - step
            down = float(loss_fn())
            flat[idx] = original
            numeric = (up - down) / (2 * step)
            scale = max(abs(analytic), abs(numeric))
            if scale > 1e-7:
                self.assertLess(abs(analytic - numeric) / scale, 1e-3, name)
            checked += 1
        self.assertGreater(checked, 10)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.model, self.fcfg, self.mcfg = _tiny()
        self.config = system_config(SystemKind.PTSD, self.fcfg, self.mcfg)
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _optimizer_after_one_step(self) -> torch.optim.Optimizer:
        optimizer = torch.optim.Adam(self.model.parameters(), lr=1e-3)
        probs = self.model(torch.randn(1, 6, 40), PromptBatch.from_specs([[FEMALE]]))
        probs.mean().backward()
        optimizer.step()
        return optimizer

    def test_save_load_save_is_byte_identical(self):
        optimizer = self._optimizer_after_one_step()
        first = CheckpointService.save(
            self.root / "a.ckpt", self.model, self.config, optimizer, meta={"epoch": 1}, include_rng=True,
        )

        checkpoint = CheckpointService.read(first)
        fresh = build_system(SystemKind.PTSD, self.fcfg, self.mcfg)
        CheckpointService.load_parameters(fresh, checkpoint)
        fresh_optimizer = torch.optim.Adam(fresh.parameters(), lr=1e-3)
        CheckpointService.restore_optimizer(fresh_optimizer, checkpoint)
        CheckpointService.restore_torch_rng(checkpoint)
        second = CheckpointService.save(
            self.root / "b.ckpt", fresh, checkpoint.config, fresh_optimizer, meta={"epoch": 1}, include_rng=True,
        )
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_loaded_model_reproduces_outputs(self):
        path = CheckpointService.save(self.root / "m.ckpt", self.model, self.config)
        loaded, checkpoint = CheckpointService.load_model(path, expected_config=self.config)
        self.assertEqual(checkpoint.system, "ptsd")
        raw = torch.randn(12, 40)
        np.testing.assert_array_equal(
            ModelService.forward(loaded, raw, [FEMALE, KEYNOTE]).values,
            ModelService.forward(self.model, raw, [FEMALE, KEYNOTE]).values,
        )

    def test_config_mismatch_lists_differences(self):
        path = CheckpointService.save(self.root / "m.ckpt", self.model, self.config)
        other = system_config(SystemKind.PTSD, FrontendConfig(d_model=32), ModelConfig(d_model=32, n_heads=2))
        with self.assertRaises(ValidationError) as ctx:
            CheckpointService.load_model(path, expected_config=other)
        self.assertEqual(ctx.exception.code, "config_mismatch")
        self.assertIn("model.d_model: checkpoint=16 expected=32", ctx.exception.messages[0])

    def test_not_a_checkpoint(self):
        path = self.root / "junk.ckpt"
        path.write_bytes(b"definitely not a checkpoint file")
        with self.assertRaises(ValidationError) as ctx:
            CheckpointService.read(path)
        self.assertEqual(ctx.exception.code, "bad_checkpoint")

    def test_missing_checkpoint(self):
        with self.assertRaises(ValidationError) as ctx:
            CheckpointService.read(self.root / "none.ckpt")
        self.assertEqual(ctx.exception.code, "missing_file")


class PromptFileTests(SimpleTestCase):
    def test_parse_all_kinds(self):
        queries = parse_prompt_lines(["# comentario", "T clip1 3.5", "G female", "N overlap", "K", ""])
        self.assertEqual([q.text for q in queries], ["T:3.500", "G:female", "N:overlap", "K:keynote"])
        self.assertEqual(queries[0].clip_id, "clip1")

    def test_bad_line_reports_line_number(self):
        with self.assertRaises(ValidationError) as ctx:
            parse_prompt_lines(["G female", "G robot"], source="p.txt")
        self.assertEqual(ctx.exception.code, "bad_spec_line")
        self.assertIn("p.txt:2", ctx.exception.messages[0])

    def test_negative_time(self):
        with self.assertRaises(ValidationError):
            parse_prompt_lines(["T clip1 -1"])
