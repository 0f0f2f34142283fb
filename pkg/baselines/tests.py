from __future__ import annotations

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from baselines.network import GenderBaseline1, GenderBaseline2
from baselines.services.enrollment_service import (
    EnrollmentService,
    EnrollmentSpec,
    pick_enrollment,
    solo_runs,
)
from frontend.services.feature_service import FrontendConfig
from labels.types import SpeakerActivity
from ptsd.network import ModelConfig
from ptsd.systems import SystemKind, build_system

TINY = ModelConfig(d_model=16, n_heads=2, encoder_layers=1, decoder_layers=1, dropout=0.0)


def _activity() -> SpeakerActivity:
    matrix = np.zeros((2, 200), dtype=np.uint8)
    matrix[0, 0:60] = 1      # a solo 0..50, traslape 50..60
    matrix[1, 50:120] = 1    # b solo 60..120
    matrix[0, 150:170] = 1   # a solo corto
    return SpeakerActivity(("a", "b"), matrix)


class EnrollmentPickTests(SimpleTestCase):
    def test_solo_runs(self):
        self.assertEqual(solo_runs(_activity(), "a"), [(0, 50), (150, 170)])

    def test_protocol_pick_is_centered_on_longest_run(self):
        spec = pick_enrollment(_activity(), "b", 1.0, clip_id="c")
        self.assertEqual(spec.frames, (77, 102))
        spec.check_solo(_activity())

    def test_short_runs_fall_back_to_longest(self):
        spec = pick_enrollment(_activity(), "a", 3.0)
        self.assertEqual(spec.frames, (0, 50))

    def test_random_pick_stays_solo(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            spec = pick_enrollment(_activity(), "a", 0.5, rng=rng)
            spec.check_solo(_activity())
            self.assertEqual(spec.frames[1] - spec.frames[0], 12)

    def test_silent_speaker(self):
        activity = SpeakerActivity(("a", "b"), np.vstack([np.ones(10), np.zeros(10)]).astype(np.uint8))
        self.assertIsNone(pick_enrollment(activity, "b", 1.0))


class EnrollmentSpecTests(SimpleTestCase):
    def test_shorter_than_a_frame(self):
        with self.assertRaises(ValidationError) as ctx:
            EnrollmentSpec("c", 1.0, 1.01, "a")
        self.assertEqual(ctx.exception.code, "too_short")

    def test_overlapped_segment_is_rejected(self):
        with self.assertRaises(ValidationError) as ctx:
            EnrollmentSpec("c", 1.8, 2.4, "a").check_solo(_activity())
        self.assertEqual(ctx.exception.code, "invalid_enrollment")

    def test_descriptor_is_anchor_at_onset(self):
        spec = EnrollmentSpec("c", 2.4, 3.0, "b")
        self.assertEqual((spec.descriptor.attribute, spec.descriptor.value, spec.descriptor.speaker_id), ("T", 60, "b"))


class TsvadTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = build_system(SystemKind.TSVAD, FrontendConfig(d_model=16), TINY)
        self.raw = np.random.default_rng(0).standard_normal((200, 40)).astype(np.float32)
        self.enrollments = [EnrollmentSpec("c", 0.0, 1.0, "a"), EnrollmentSpec("c", 2.4, 4.8, "b")]

    def test_one_row_per_enrolled_speaker(self):
        out = EnrollmentService.tsvad_forward(self.model, self.raw, self.enrollments, clip_id="c")
        self.assertEqual(out.values.shape, (2, 200))
        self.assertEqual([d.speaker_id for d in out.descriptors], ["a", "b"])

    def test_permuting_enrollments_permutes_rows(self):
        out = EnrollmentService.tsvad_forward(self.model, self.raw, self.enrollments)
        swapped = EnrollmentService.tsvad_forward(self.model, self.raw, self.enrollments[::-1])
        np.testing.assert_array_equal(swapped.values, out.values[::-1])

    def test_embedding_width(self):
        vec = EnrollmentService.enrollment_embedding(self.model, self.raw, self.enrollments[0])
        self.assertEqual(tuple(vec.shape), (16,))

    def test_enrollment_past_the_end(self):
        with self.assertRaises(ValidationError) as ctx:
            EnrollmentService.tsvad_forward(self.model, self.raw[:50], self.enrollments)
        self.assertEqual(ctx.exception.code, "time_out_of_range")

    def test_no_enrollments(self):
        with self.assertRaises(ValidationError) as ctx:
            EnrollmentService.tsvad_forward(self.model, self.raw, [])
        self.assertEqual(ctx.exception.code, "empty_prompts")


class GenderBaselineTests(SimpleTestCase):
    def test_both_baselines_emit_two_rows(self):
        raw = np.random.default_rng(1).standard_normal((75, 40)).astype(np.float32)
        for cls in (GenderBaseline1, GenderBaseline2):
            torch.manual_seed(0)
            model = cls(FrontendConfig(d_model=16), TINY)
            out = EnrollmentService.gender_baseline_forward(model, raw, clip_id="c")
            self.assertEqual(out.values.shape, (2, 75), cls.__name__)
            self.assertEqual([d.value for d in out.descriptors], ["female", "male"])

    def test_padding_does_not_leak_into_conv_baseline(self):
        torch.manual_seed(0)
        model = GenderBaseline1(FrontendConfig(d_model=16), TINY).eval()
        raw = torch.randn(1, 30, 40)
        padded = torch.cat([raw, torch.full((1, 10, 40), 50.0)], dim=1)
        mask = torch.tensor([[True] * 30 + [False] * 10])
        with torch.no_grad():
            # El campo receptivo alcanza 7 frames a cada lado; los primeros no ven el relleno
            a = model(raw)[..., :20]
            b = model(padded, mask)[..., :20]
        torch.testing.assert_close(a, b)

    def test_mismatched_width(self):
        with self.assertRaises(ValidationError):
            GenderBaseline1(FrontendConfig(d_model=32), TINY)
