from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from frontend.services.feature_service import (
    LOG_FLOOR,
    FeatureService,
    FrameClock,
    Frontend,
    FrontendConfig,
    register_adapter,
    unregister_adapter,
)
from labels.types import AudioClip


def _tone(freq: float, seconds: float = 1.0, sr: int = 16000) -> AudioClip:
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip((0.3 * np.sin(2 * np.pi * freq * t)).astype(np.float32), sr, f"tone{int(freq)}")


class FrameClockTests(SimpleTestCase):
    def test_time_to_frame(self):
        self.assertEqual(FrameClock.time_to_frame(0.0), 0)
        self.assertEqual(FrameClock.time_to_frame(1.0), 25)
        self.assertEqual(FrameClock.time_to_frame(0.079), 1)

    def test_frame_center(self):
        self.assertAlmostEqual(FrameClock.frame_to_time(10), 0.42)

    def test_time_beyond_clip(self):
        with self.assertRaises(ValidationError) as ctx:
            FrameClock.time_to_frame(2.0, duration=2.0)
        self.assertEqual(ctx.exception.code, "time_out_of_range")


class LogMelFrontendTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.frontend = Frontend(FrontendConfig(d_model=16))

    def test_two_seconds_give_fifty_frames(self):
        seq = FeatureService.extract_features(AudioClip(np.zeros(32000, dtype=np.float32), 16000, "z"), self.frontend)
        self.assertEqual(tuple(seq.frames.shape), (50, 16))
        self.assertEqual(seq.n_frames, 50)

    def test_silence_is_constant_log_floor(self):
        raw = self.frontend.raw(AudioClip(np.zeros(16000, dtype=np.float32), 16000))
        np.testing.assert_allclose(raw, np.full_like(raw, np.log(LOG_FLOOR)), rtol=1e-6)

    def test_tone_pitch_moves_the_peak_mel_bin(self):
        low = self.frontend.raw(_tone(220.0)).mean(axis=0).argmax()
        high = self.frontend.raw(_tone(880.0)).mean(axis=0).argmax()
        self.assertLess(low, high)

    def test_partial_last_frame_is_zero_padded(self):
        raw = self.frontend.raw(AudioClip(np.zeros(16010, dtype=np.float32), 16000))
        self.assertEqual(raw.shape, (26, 40))

    def test_wrong_sample_rate(self):
        with self.assertRaises(ValidationError) as ctx:
            self.frontend.raw(AudioClip(np.zeros(8000, dtype=np.float32), 8000))
        self.assertEqual(ctx.exception.code, "bad_audio")

    def test_hop_must_match_frame_rate(self):
        with self.assertRaises(ValidationError):
            FrontendConfig(hop=0.01)


class ExternalAdapterTests(SimpleTestCase):
    def tearDown(self):
        unregister_adapter("fixed")

    def test_adapter_output_is_projected(self):
        register_adapter("fixed", lambda samples, sr: np.ones((int(np.ceil(len(samples) / sr * 25)), 8)))
        frontend = Frontend(FrontendConfig(kind="external-adapter", adapter="fixed", adapter_dim=8, d_model=4))
        seq = FeatureService.extract_features(AudioClip(np.zeros(16000, dtype=np.float32)), frontend)
        self.assertEqual(tuple(seq.frames.shape), (25, 4))

    def test_wrong_frame_rate_names_expected_shape(self):
        register_adapter("fixed", lambda samples, sr: np.ones((50, 8)))
        frontend = Frontend(FrontendConfig(kind="external-adapter", adapter="fixed", adapter_dim=8, d_model=4))
        with self.assertRaises(ValidationError) as ctx:
            frontend.raw(AudioClip(np.zeros(16000, dtype=np.float32)))
        self.assertEqual(ctx.exception.code, "shape_mismatch")
        self.assertIn("(25, 8)", ctx.exception.messages[0])

    def test_unregistered_adapter(self):
        frontend = Frontend(FrontendConfig(kind="external-adapter", adapter="missing", adapter_dim=8, d_model=4))
        with self.assertRaises(ValidationError) as ctx:
            frontend.raw(AudioClip(np.zeros(16000, dtype=np.float32)))
        self.assertEqual(ctx.exception.code, "unknown_adapter")


class FeatureCacheTests(SimpleTestCase):
    def test_cache_round_trip(self):
        frontend = Frontend(FrontendConfig(d_model=8))
        clip = _tone(440.0)
        with tempfile.TemporaryDirectory() as tmp, override_settings(PTSD_FEATURE_CACHE_DIR=tmp):
            first = FeatureService.raw_features(clip, frontend)
            cached = list(Path(tmp).glob("tone440-*.npy"))
            self.assertEqual(len(cached), 1)
            np.testing.assert_array_equal(FeatureService.raw_features(clip, frontend), first)
