from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from labels.services.label_service import (
    COUNTER_DESCRIPTORS,
    GENDER_DESCRIPTORS,
    KEYNOTE_DESCRIPTOR,
    LabelService,
)
from labels.services.rttm import parse_rttm, read_rttm, to_rttm_lines, write_rttm
from labels.types import (
    Attribute,
    EventDescriptor,
    FrameLabelSet,
    Segment,
    SegmentAnnotation,
    SpeakerActivity,
    SpeakerProfile,
    n_frames_for,
)


def _activity(rows, ids=None) -> SpeakerActivity:
    matrix = np.asarray(rows, dtype=np.uint8)
    ids = ids or tuple(f"s{i + 1}" for i in range(matrix.shape[0]))
    return SpeakerActivity(tuple(ids), matrix)


def _random_annotation(rng: np.random.Generator, clip_id: str = "c") -> SegmentAnnotation:
    duration = round(float(rng.uniform(0.5, 6.0)), 2)
    segments = []
    for s in range(int(rng.integers(1, 5))):
        t = 0.0
        while True:
            t += round(float(rng.uniform(0.0, 1.0)), 2)
            length = round(float(rng.uniform(0.04, 1.5)), 2)
            if t + length > duration:
                break
            segments.append(Segment(f"spk{s}", t, round(t + length, 2)))
            t = round(t + length, 2)
    return SegmentAnnotation(clip_id, duration, tuple(segments))


class FrameGridTests(SimpleTestCase):
    def test_frame_count_is_ceil_of_duration(self):
        self.assertEqual(n_frames_for(100.0), 2500)
        self.assertEqual(n_frames_for(0.6), 15)
        self.assertEqual(n_frames_for(0.61), 16)


class SegmentsToActivityTests(SimpleTestCase):
    def test_center_rule(self):
        ann = SegmentAnnotation("c", 0.2, (Segment("a", 0.0, 0.12),))
        act = LabelService.segments_to_activity(ann)
        assert_array_equal(act.row("a"), [1, 1, 1, 0, 0])

    def test_empty_segments(self):
        act = LabelService.segments_to_activity(SegmentAnnotation("c", 1.0))
        self.assertEqual(act.matrix.shape, (0, 25))
        self.assertEqual(act.n_frames, 25)

    def test_overlap_region(self):
        ann = SegmentAnnotation("c", 0.6, (Segment("a", 0.0, 0.4), Segment("b", 0.2, 0.6)))
        act = LabelService.segments_to_activity(ann)
        counts = act.counts()
        assert_array_equal(np.flatnonzero(counts >= 2), [5, 6, 7, 8, 9])

    def test_known_speakers_without_segments_get_zero_rows(self):
        ann = SegmentAnnotation("c", 0.4, (Segment("b", 0.0, 0.2),))
        act = LabelService.segments_to_activity(ann, speaker_ids=["a", "b"])
        self.assertEqual(act.speaker_ids, ("a", "b"))
        self.assertEqual(int(act.row("a").sum()), 0)

    def test_segment_outside_clip_is_rejected(self):
        ann = SegmentAnnotation("c", 1.0, (Segment("a", 0.5, 1.5),))
        with self.assertRaises(ValidationError) as ctx:
            LabelService.segments_to_activity(ann)
        self.assertEqual(ctx.exception.code, "invalid_segment")

    def test_same_speaker_overlapping_segments_are_rejected(self):
        ann = SegmentAnnotation("c", 2.0, (Segment("a", 0.0, 1.0), Segment("a", 0.5, 1.5)))
        with self.assertRaises(ValidationError):
            LabelService.segments_to_activity(ann)


class CounterLabelTests(SimpleTestCase):
    def test_two_speaker_example(self):
        counter = LabelService.derive_counter_labels(np.array([[1, 1, 0], [0, 1, 0]]))
        assert_array_equal(counter[0], [0, 0, 1])
        assert_array_equal(counter[1], [1, 0, 0])
        assert_array_equal(counter[2], [0, 1, 0])

    def test_silence_is_non_speech(self):
        counter = LabelService.derive_counter_labels(np.zeros((2, 4), dtype=np.uint8))
        assert_array_equal(counter[0], [1, 1, 1, 1])

    def test_four_active_is_overlap(self):
        counter = LabelService.derive_counter_labels(np.ones((4, 1), dtype=np.uint8))
        assert_array_equal(counter[:, 0], [0, 0, 1])


class GenderLabelTests(SimpleTestCase):
    def setUp(self):
        self.profiles = {
            "s1": SpeakerProfile("s1", "female"),
            "s2": SpeakerProfile("s2", "male"),
        }

    def test_female_active_male_silent(self):
        out = LabelService.derive_gender_labels(_activity([[1, 1], [0, 0]]), self.profiles)
        assert_array_equal(out, [[1, 1], [0, 0]])

    def test_overlapping_genders(self):
        out = LabelService.derive_gender_labels(_activity([[1, 0], [1, 1]]), self.profiles)
        assert_array_equal(out, [[1, 0], [1, 1]])

    def test_unknown_speaker(self):
        with self.assertRaises(ValidationError) as ctx:
            LabelService.derive_gender_labels(_activity([[1]], ids=("ghost",)), self.profiles)
        self.assertEqual(ctx.exception.code, "unknown_speaker")


class KeynoteLabelTests(SimpleTestCase):
    def test_longest_speaker_wins(self):
        row, speaker = LabelService.derive_keynote_labels(_activity([[1, 1, 1, 0], [0, 0, 0, 1]]))
        self.assertEqual(speaker, "s1")
        assert_array_equal(row, [1, 1, 1, 0])

    def test_tie_goes_to_smallest_id(self):
        _, speaker = LabelService.derive_keynote_labels(_activity([[0, 0, 1, 1], [1, 1, 0, 0]], ids=("s1", "s2")))
        self.assertEqual(speaker, "s1")

    def test_silent_window(self):
        with self.assertRaises(ValidationError) as ctx:
            LabelService.derive_keynote_labels(_activity([[0, 0]]))
        self.assertEqual(ctx.exception.code, "no_keynote")


class FramesToSegmentsTests(SimpleTestCase):
    def test_single_run(self):
        self.assertEqual(LabelService.frames_to_segments([0, 1, 1, 0]), [(0.04, 0.12)])

    def test_all_zero(self):
        self.assertEqual(LabelService.frames_to_segments([0, 0, 0]), [])

    def test_min_duration_drops_short_runs(self):
        self.assertEqual(LabelService.frames_to_segments([1, 0, 1], min_duration=0.05), [])


class DescriptorTests(SimpleTestCase):
    def test_timestamp_requires_frame_index(self):
        with self.assertRaises(ValidationError):
            EventDescriptor(Attribute.TIMESTAMP, "female")
        with self.assertRaises(ValidationError):
            EventDescriptor(Attribute.TIMESTAMP, -1)

    def test_illegal_categorical_value(self):
        with self.assertRaises(ValidationError):
            EventDescriptor(Attribute.GENDER, "overlap")

    def test_key_ignores_speaker(self):
        a = EventDescriptor(Attribute.TIMESTAMP, 10, "s1")
        b = EventDescriptor(Attribute.TIMESTAMP, 10)
        self.assertEqual(a.key, b.key)

    def test_label_set_rejects_wrong_length(self):
        with self.assertRaises(ValidationError):
            FrameLabelSet(3, ((COUNTER_DESCRIPTORS[0], np.zeros(4, dtype=np.uint8)),))


class AssembleLabelSetTests(SimpleTestCase):
    def test_four_speakers_give_ten_rows(self):
        rows = np.zeros((4, 8), dtype=np.uint8)
        for i in range(4):
            rows[i, 2 * i:2 * i + 2] = 1
        act = _activity(rows)
        profiles = {s: SpeakerProfile(s, "female" if i % 2 else "male") for i, s in enumerate(act.speaker_ids)}
        anchors = {s: int(LabelService.solo_frames(act)[s][0]) for s in act.speaker_ids}
        labels = LabelService.assemble_label_set(act, profiles, anchors)
        self.assertEqual(len(labels.rows), 10)
        self.assertEqual([d.attribute for d in labels.descriptors], ["T"] * 4 + ["G"] * 2 + ["N"] * 3 + ["K"])

    def test_single_speaker_window_has_no_overlap(self):
        act = _activity([[1, 1, 0, 1]], ids=("a",))
        labels = LabelService.assemble_label_set(act, {"a": SpeakerProfile("a", "male")}, {"a": 0})
        self.assertEqual(sum(d.attribute == "T" for d in labels.descriptors), 1)
        self.assertEqual(int(labels.row(COUNTER_DESCRIPTORS[2]).sum()), 0)

    def test_silent_window_omits_keynote(self):
        act = _activity([[0, 0, 0]], ids=("a",))
        labels = LabelService.assemble_label_set(act, {"a": SpeakerProfile("a", "male")})
        self.assertNotIn(KEYNOTE_DESCRIPTOR.key, [d.key for d in labels.descriptors])


class RandomizedLabelAlgebraTests(SimpleTestCase):
    """Invariantes sobre 1000 anotaciones aleatorias."""

    def test_invariants(self):
        rng = np.random.default_rng(1234)
        for i in range(1000):
            ann = _random_annotation(rng, clip_id=f"c{i}")
            act = LabelService.segments_to_activity(ann)
            profiles = {s: SpeakerProfile(s, "female" if j % 2 else "male") for j, s in enumerate(act.speaker_ids)}
            counts = act.counts()

            counter = LabelService.derive_counter_labels(act.matrix)
            assert_array_equal(counter.sum(axis=0), np.ones(act.n_frames))
            assert_array_equal(counter[2], (counts >= 2).astype(np.uint8))

            gender = LabelService.derive_gender_labels(act, profiles)
            assert_array_equal(np.maximum(gender[0], gender[1]), (counts >= 1).astype(np.uint8))

            if counts.sum() > 0:
                keynote, speaker = LabelService.derive_keynote_labels(act)
                self.assertTrue(np.all(keynote <= (counts >= 1)))
                assert_array_equal(keynote, act.row(speaker))

            for speaker in act.speaker_ids:
                rebuilt = [
                    Segment(speaker, on, min(off, ann.duration))
                    for on, off in LabelService.frames_to_segments(act.row(speaker))
                ]
                again = LabelService.segments_to_activity(
                    SegmentAnnotation(ann.clip_id, ann.duration, tuple(rebuilt)), speaker_ids=[speaker]
                )
                assert_array_equal(again.row(speaker), act.row(speaker))


class RttmTests(SimpleTestCase):
    def test_round_trip_preserves_activity(self):
        ann = SegmentAnnotation(
            "clip1",
            3.0,
            (Segment("a", 0.0, 1.2), Segment("b", 1.0, 2.44), Segment("a", 2.5, 3.0)),
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = write_rttm(ann, Path(tmp) / "clip1.rttm")
            back = read_rttm(path, durations={"clip1": 3.0})["clip1"]
        assert_array_equal(
            LabelService.segments_to_activity(back).matrix,
            LabelService.segments_to_activity(ann).matrix,
        )

    def test_lines_are_sorted_by_onset(self):
        ann = SegmentAnnotation("c", 2.0, (Segment("b", 1.0, 2.0), Segment("a", 0.0, 0.5)))
        lines = to_rttm_lines(ann)
        self.assertTrue(lines[0].startswith("SPEAKER c 1 0.000 0.500"))

    def test_bad_line_reports_line_number(self):
        with self.assertRaises(ValidationError) as ctx:
            parse_rttm("SPEAKER c 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nGARBAGE\n", source="x.rttm")
        self.assertEqual(ctx.exception.code, "bad_rttm_line")
        self.assertIn("x.rttm:2", ctx.exception.messages[0])

    def test_missing_file(self):
        with self.assertRaises(ValidationError) as ctx:
            read_rttm("/nonexistent/none.rttm")
        self.assertEqual(ctx.exception.code, "missing_file")
