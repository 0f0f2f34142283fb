from __future__ import annotations

import io
import itertools
import json
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from evaluation.services.der_service import DerService
from evaluation.services.inference_service import (
    MISSING_ANCHOR_FLOOR,
    InferenceService,
    chunk_bounds,
    read_score_dump,
    write_score_dump,
)
from evaluation.services.metrics import (
    ScoredFrames,
    average_precision,
    binarize,
    binarize_segments,
    eer,
    osd_precision_recall,
    roc_auc,
)
from evaluation.services.protocol_service import (
    EvalConfig,
    ProtocolService,
    hypothesis_from_posteriors,
    protocol_specs,
    reference_labels,
)
from evaluation.services.report_service import ReportService
from frontend.services.feature_service import FrontendConfig
from labels.services.label_service import LabelService
from labels.types import EventDescriptor, FrameLabelSet, Segment, SegmentAnnotation, SpeakerActivity, SpeakerProfile
from ptsd.network import PROB_EPS, ModelConfig, PosteriorSet, PTSDModel
from ptsd.prompts import PromptSpec
from ptsd.services.checkpoint_service import CheckpointService
from ptsd.services.model_service import ModelService
from ptsd.systems import SystemKind, system_config
from runs.models import RunRecord, RunStatus
from simulation.services.conversation_service import ConversationStats
from simulation.services.dataset_service import DatasetService
from training.services.sampler_service import ClipData, ClipStore

FEMALE = PromptSpec.categorical("G", "female")
KEYNOTE = PromptSpec.categorical("K", "keynote")


def _tiny_model(seed: int = 0) -> PTSDModel:
    torch.manual_seed(seed)
    return PTSDModel(
        FrontendConfig(d_model=16),
        ModelConfig(d_model=16, n_heads=2, encoder_layers=1, decoder_layers=1, dropout=0.0),
    )


def _sf(scores, labels) -> ScoredFrames:
    return ScoredFrames(np.asarray(scores, dtype=np.float64), np.asarray(labels))


def _pair_count_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _sweep_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        tp = int(np.sum(predicted & (labels == 1)))
        fp = int(np.sum(predicted & (labels == 0)))
        recall = tp / n_pos
        total += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return total


def _sweep_eer(scores: np.ndarray, labels: np.ndarray) -> float:
    pos, neg = labels == 1, labels == 0
    points = [(0.0, 1.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        points.append((np.sum(predicted & neg) / neg.sum(), 1.0 - np.sum(predicted & pos) / pos.sum()))
    for (f0, m0), (f1, m1) in zip(points, points[1:]):
        if f1 >= m1:
            t = (m0 - f0) / ((f1 - m1) - (f0 - m0))
            return float(f0 + t * (f1 - f0))
    raise AssertionError("la curva no cruza FPR = FNR")


def _random_instance(rng: np.random.Generator, index: int) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(2, 41))
    scores = rng.random(n)
    if index % 2:
        scores = np.round(scores, 1)  # muchos empates
    if index % 5 == 0:
        labels = np.zeros(n, dtype=np.int64)
        labels[int(rng.integers(n))] = 1
    else:
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, size=2, replace=False)] = (0, 1)
    return scores, labels


class AveragePrecisionTests(SimpleTestCase):
    def test_perfect_ranking(self):
        self.assertEqual(average_precision(_sf([0.9, 0.1], [1, 0])), 1.0)

    def test_inverted_pair(self):
        self.assertAlmostEqual(average_precision(_sf([0.1, 0.9], [1, 0])), 0.5)

    def test_all_positive(self):
        self.assertEqual(average_precision(_sf([0.3, 0.2, 0.7], [1, 1, 1])), 1.0)

    def test_ties_are_grouped(self):
        self.assertAlmostEqual(average_precision(_sf([0.5, 0.5], [1, 0])), 0.5)

    def test_no_positives(self):
        with self.assertRaises(ValidationError) as ctx:
            average_precision(_sf([0.5, 0.2], [0, 0]))
        self.assertEqual(ctx.exception.code, "undefined_metric")

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(4)
        scores, labels = rng.random(60), rng.integers(0, 2, 60)
        labels[0] = 1
        self.assertAlmostEqual(
            average_precision(_sf(scores, labels)), average_precision(_sf(np.exp(3 * scores), labels)), places=12,
        )


class RocTests(SimpleTestCase):
    def test_separated_scores(self):
        sf = _sf([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        self.assertEqual(roc_auc(sf), 1.0)
        self.assertEqual(eer(sf), 0.0)

    def test_constant_scores(self):
        self.assertAlmostEqual(roc_auc(_sf([0.5] * 6, [1, 0, 1, 0, 0, 1])), 0.5)

    def test_auc_matches_pair_counting(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            scores = np.round(rng.random(50), 1)
            labels = rng.integers(0, 2, 50)
            labels[:2] = (0, 1)
            self.assertAlmostEqual(roc_auc(_sf(scores, labels)), _pair_count_auc(scores, labels), delta=1e-12)

    def test_flipped_labels(self):
        rng = np.random.default_rng(8)
        scores = rng.permutation(40) / 40.0
        labels = rng.integers(0, 2, 40)
        labels[:2] = (0, 1)
        self.assertAlmostEqual(roc_auc(_sf(scores, labels)), 1.0 - roc_auc(_sf(scores, 1 - labels)), places=12)

    def test_eer_interpolates_across_a_tie(self):
        self.assertAlmostEqual(eer(_sf([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0])), 0.25)

    def test_single_class(self):
        with self.assertRaises(ValidationError) as ctx:
            roc_auc(_sf([0.1, 0.2], [1, 1]))
        self.assertEqual(ctx.exception.code, "undefined_metric")


class MetricOracleTests(SimpleTestCase):
    def test_random_instances_match_exhaustive_oracles(self):
        rng = np.random.default_rng(2024)
        for index in range(500):
            scores, labels = _random_instance(rng, index)
            sf = _sf(scores, labels)
            self.assertAlmostEqual(average_precision(sf), _sweep_ap(scores, labels), delta=1e-12, msg=index)
            self.assertAlmostEqual(roc_auc(sf), _pair_count_auc(scores, labels), delta=1e-12, msg=index)
            self.assertAlmostEqual(eer(sf), _sweep_eer(scores, labels), delta=1e-12, msg=index)

    def test_single_positive_at_the_top(self):
        sf = _sf([0.9, 0.4, 0.3, 0.2], [1, 0, 0, 0])
        self.assertEqual(average_precision(sf), 1.0)
        self.assertEqual(roc_auc(sf), 1.0)
        self.assertEqual(eer(sf), 0.0)


class DerTests(SimpleTestCase):
    def test_shortened_hypothesis(self):
        ref = SegmentAnnotation("c", 10.0, (Segment("A", 0.0, 10.0),))
        hyp = SegmentAnnotation("c", 10.0, (Segment("A", 0.0, 8.0),))
        result = DerService.der(ref, hyp, collar=0.0)
        self.assertAlmostEqual(result.miss, 0.2)
        self.assertEqual(result.false_alarm, 0.0)
        self.assertEqual(result.speaker_confusion, 0.0)
        self.assertAlmostEqual(result.der, 0.2)
        self.assertAlmostEqual(result.total_seconds, 10.0)

    def test_swapped_names(self):
        ref = SegmentAnnotation("c", 4.0, (Segment("A", 0.0, 2.0), Segment("B", 1.5, 4.0)))
        hyp = SegmentAnnotation("c", 4.0, (Segment("x", 0.0, 2.0), Segment("y", 1.5, 4.0)))
        for collar in (0.0, 0.25):
            self.assertEqual(DerService.der(ref, hyp, collar=collar).der, 0.0)
        self.assertEqual(dict(DerService.der(ref, hyp, collar=0.0).mapping), {"A": "x", "B": "y"})

    def test_overlap_excluded(self):
        ref = SegmentAnnotation("c", 4.0, (Segment("A", 0.0, 2.0), Segment("B", 1.0, 4.0)))
        hyp = SegmentAnnotation("c", 4.0, (Segment("A", 0.0, 2.0),))
        with_overlap = DerService.der(ref, hyp, collar=0.0)
        without = DerService.der(ref, hyp, collar=0.0, score_overlap=False)
        self.assertAlmostEqual(with_overlap.total_seconds, 5.0)
        self.assertAlmostEqual(without.total_seconds, 3.0)

    def test_empty_reference(self):
        ann = SegmentAnnotation("c", 2.0)
        with self.assertRaises(ValidationError) as ctx:
            DerService.der(ann, ann)
        self.assertEqual(ctx.exception.code, "empty_reference")

    def test_duration_mismatch(self):
        ref = SegmentAnnotation("c", 2.0, (Segment("A", 0.0, 1.0),))
        with self.assertRaises(ValidationError) as ctx:
            DerService.der(ref, SegmentAnnotation("c", 3.0))
        self.assertEqual(ctx.exception.code, "duration_mismatch")

    def test_matches_brute_force_mapping(self):
        rng = np.random.default_rng(23)
        for trial in range(200):
            n_frames = int(rng.integers(10, 101))
            ref_rows = self._random_rows(rng, int(rng.integers(1, 4)), n_frames, require_speech=True)
            hyp_rows = self._random_rows(rng, int(rng.integers(0, 4)), n_frames)
            ref = self._annotation(ref_rows, n_frames, "r")
            hyp = self._annotation(hyp_rows, n_frames, "h")

            result = DerService.der(ref, hyp, collar=0.0)
            expected = self._oracle(ref_rows, hyp_rows)
            self.assertAlmostEqual(result.der, expected, places=12, msg=f"trial {trial}")
            self.assertAlmostEqual(
                result.der, result.miss + result.false_alarm + result.speaker_confusion, delta=1e-9,
            )

    @staticmethod
    def _random_rows(rng, n_speakers: int, n_frames: int, require_speech: bool = False) -> np.ndarray:
        rows = np.zeros((n_speakers, n_frames), dtype=bool)
        for s in range(n_speakers):
            on = int(rng.integers(0, n_frames - 1))
            off = int(rng.integers(on + 1, n_frames + 1))
            rows[s, on:off] = True
        if require_speech and not rows.any():
            rows[0, 0] = True
        return rows

    @staticmethod
    def _annotation(rows: np.ndarray, n_frames: int, prefix: str) -> SegmentAnnotation:
        segments = []
        for s, row in enumerate(rows):
            active = np.flatnonzero(row)
            if active.size:
                segments.append(Segment(f"{prefix}{s}", active[0] / 100, (active[-1] + 1) / 100))
        return SegmentAnnotation("c", n_frames / 100, tuple(segments))

    @staticmethod
    def _oracle(ref: np.ndarray, hyp: np.ndarray) -> float:
        n_ref, n_hyp = ref.sum(axis=0), hyp.sum(axis=0)
        size = max(len(ref), len(hyp))
        best = 0
        for perm in itertools.permutations(range(size)):
            correct = np.zeros(ref.shape[1], dtype=int)
            for r, h in enumerate(perm):
                if r < len(ref) and h < len(hyp):
                    correct += ref[r] & hyp[h]
            best = max(best, int(correct.sum()))
        errors = np.maximum(n_ref, n_hyp).sum() - best
        return errors / n_ref.sum()


class OverlapDetectionTests(SimpleTestCase):
    def test_hand_counts(self):
        precision, recall = osd_precision_recall([1, 1, 1, 0, 0], [1, 1, 0, 1, 1])
        self.assertAlmostEqual(precision, 0.6667, places=4)
        self.assertAlmostEqual(recall, 0.5)

    def test_perfect(self):
        self.assertEqual(osd_precision_recall([0, 1, 1], [0, 1, 1]), (1.0, 1.0))

    def test_zero_denominator_is_undefined(self):
        self.assertEqual(osd_precision_recall([0, 0, 0], [0, 1, 1]), (None, 0.0))


class BinarizeTests(SimpleTestCase):
    def test_constant(self):
        np.testing.assert_array_equal(binarize(np.full(20, 0.9)), np.ones(20))

    def test_spike_is_removed(self):
        values = np.full(30, 0.1)
        values[15] = 0.9
        self.assertEqual(int(binarize(values, median_window=11).sum()), 0)

    def test_window_one_is_plain_threshold(self):
        values = np.array([0.1, 0.9, 0.4, 0.6])
        np.testing.assert_array_equal(binarize(values, median_window=1), [0, 1, 0, 1])

    def test_segments_follow_the_filtered_runs(self):
        values = np.full(60, 0.1)
        values[10:35] = 0.9
        values[50] = 0.9
        segments = binarize_segments(values, median_window=3)
        self.assertEqual(len(segments), 1)
        np.testing.assert_allclose(segments[0], (0.4, 1.4))

    def test_hypothesis_uses_anchor_rows_only(self):
        anchor = EventDescriptor("T", 12, "a")
        values = np.full((2, 60), 0.1)
        values[0, 10:35] = 0.9
        values[1, :] = 0.9
        labels = FrameLabelSet(60, ((anchor, np.zeros(60, dtype=np.uint8)), (FEMALE.descriptor, np.ones(60, dtype=np.uint8))))
        posteriors = PosteriorSet((anchor, FEMALE.descriptor), values, "c")
        hyp = hypothesis_from_posteriors(posteriors, labels, 2.4, 0.5, 3)
        self.assertEqual([s.speaker_id for s in hyp.segments], ["hyp_a"])
        self.assertAlmostEqual(hyp.segments[0].onset, 0.4)
        self.assertAlmostEqual(hyp.segments[0].offset, 1.4)

    def test_even_window(self):
        with self.assertRaises(ValidationError) as ctx:
            binarize(np.zeros(5), median_window=4)
        self.assertEqual(ctx.exception.code, "even_window")

    def test_even_window_in_config(self):
        with self.assertRaises(ValidationError) as ctx:
            EvalConfig(median_window=10)
        self.assertEqual(ctx.exception.code, "even_window")


class ChunkedInferenceTests(SimpleTestCase):
    def setUp(self):
        self.model = _tiny_model()
        self.raw = np.random.default_rng(0).standard_normal((2000, 40)).astype(np.float32)

    def test_chunk_bounds(self):
        self.assertEqual(chunk_bounds(2500, 40.0), [(0, 1000), (1000, 2000), (2000, 2500)])
        self.assertEqual(chunk_bounds(2500, 0.0), [(0, 2500)])

    def test_hundred_seconds(self):
        raw = np.random.default_rng(1).standard_normal((2500, 40)).astype(np.float32)
        out = InferenceService.chunked_infer(self.model, raw, [FEMALE], chunk=40.0)
        self.assertEqual(out.values.shape, (1, 2500))

    def test_single_chunk_equals_direct_forward(self):
        raw = self.raw[:1000]
        chunked = InferenceService.chunked_infer(self.model, raw, [FEMALE, KEYNOTE], chunk=40.0)
        direct = ModelService.forward(self.model, raw, [FEMALE, KEYNOTE])
        np.testing.assert_array_equal(chunked.values, direct.values)

    def test_split_equals_two_forwards(self):
        chunked = InferenceService.chunked_infer(self.model, self.raw, [FEMALE, KEYNOTE], chunk=40.0)
        first = ModelService.forward(self.model, self.raw[:1000], [FEMALE, KEYNOTE])
        second = ModelService.forward(self.model, self.raw[1000:], [FEMALE, KEYNOTE])
        np.testing.assert_array_equal(chunked.values, np.concatenate([first.values, second.values], axis=1))

    def _reference(self) -> SpeakerActivity:
        matrix = np.zeros((2, 2000), dtype=np.uint8)
        matrix[0, 0:100] = 1
        matrix[0, 1200:1300] = 1
        matrix[1, 500:700] = 1
        return SpeakerActivity(("a", "b"), matrix)

    def test_anchor_is_remapped_in_later_chunk(self):
        spec = PromptSpec.timestamp(50, "a")
        out = InferenceService.chunked_infer(self.model, self.raw, [spec], chunk=40.0, reference=self._reference())
        local = ModelService.forward(self.model, self.raw[1000:], [PromptSpec.timestamp(200, "a")])
        np.testing.assert_array_equal(out.values[0, 1000:], local.values[0])

    def test_unresolvable_anchor(self):
        with self.assertRaises(ValidationError) as ctx:
            InferenceService.chunked_infer(
                self.model, self.raw, [PromptSpec.timestamp(600, "b")], chunk=40.0, reference=self._reference(),
            )
        self.assertEqual(ctx.exception.code, "anchor_unresolvable")

    def test_floor_fills_unresolvable_chunk(self):
        out = InferenceService.chunked_infer(
            self.model,
            self.raw,
            [PromptSpec.timestamp(600, "b"), FEMALE],
            chunk=40.0,
            reference=self._reference(),
            missing_anchor=MISSING_ANCHOR_FLOOR,
        )
        np.testing.assert_array_equal(out.values[0, 1000:], np.full(1000, PROB_EPS))
        self.assertTrue((out.values[0, :1000] > PROB_EPS).any())


class ScoreDumpTests(SimpleTestCase):
    def test_round_trip(self):
        post = PosteriorSet(
            (PromptSpec.timestamp(10).descriptor, FEMALE.descriptor),
            np.array([[0.25, 0.5, 0.125], [0.9, 0.1, 0.3]]),
            clip_id="c1",
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = write_score_dump(Path(tmp) / "d.tsv", [post], config_hash="abc", chunk=40.0, system="ptsd")
            header = path.read_text().splitlines()[0]
            dump = read_score_dump(path)
        self.assertEqual(header, "# frame_rate=25 config_hash=abc chunk=40 system=ptsd")
        self.assertEqual((dump.frame_rate, dump.config_hash, dump.chunk, dump.system), (25, "abc", 40.0, "ptsd"))
        back = dump.posteriors[0]
        self.assertEqual([d.key for d in back.descriptors], [d.key for d in post.descriptors])
        np.testing.assert_allclose(back.values, post.values, atol=1e-6)

    def test_bad_row(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "d.tsv"
            path.write_text("# frame_rate=25\nc1\tG:female\n", encoding="utf-8")
            with self.assertRaises(ValidationError) as ctx:
                read_score_dump(path)
        self.assertEqual(ctx.exception.code, "bad_dump_line")


class ProtocolTests(SimpleTestCase):
    def setUp(self):
        ann = SegmentAnnotation("c1", 6.0, (Segment("a", 0.0, 3.2), Segment("b", 2.8, 6.0)))
        self.profiles = {"a": SpeakerProfile("a", "female"), "b": SpeakerProfile("b", "male")}
        self.activity = LabelService.segments_to_activity(ann, speaker_ids=["a", "b"])
        self.ann = ann

    def test_protocol_specs_anchor_each_speaker(self):
        specs = protocol_specs(self.activity)
        anchors = [s for s in specs if s.attribute == "T"]
        self.assertEqual([s.speaker_id for s in anchors], ["a", "b"])
        for spec in anchors:
            self.assertEqual(int(self.activity.counts()[int(spec.value)]), 1)
        self.assertEqual(len(specs), 2 + 2 + 3 + 1)

    def test_perfect_posteriors_score_perfectly(self):
        clip = ClipData("c1", np.zeros((self.activity.n_frames, 0), np.float32), self.ann, self.activity, self.profiles)
        descriptors = [s.descriptor for s in protocol_specs(self.activity)]
        labels = reference_labels(self.activity, self.profiles, descriptors, 40.0)
        post = PosteriorSet(labels.descriptors, labels.matrix().astype(np.float64), "c1")
        result = ProtocolService.from_dump([post], ClipStore((clip,)), 40.0)
        cfg = EvalConfig(median_window=1)
        self.assertEqual(result.der(cfg)["der"], 0.0)
        self.assertEqual(result.attribute_metrics()["G"]["ap"], 1.0)
        self.assertEqual(result.overlap_precision_recall(cfg), (1.0, 1.0))
        self.assertEqual(result.speaker_count_accuracy(), 1.0)

        records = ReportService.build_records(result, cfg, dataset="toy")
        metrics = {(r.attribute, r.metric) for r in records}
        self.assertIn(("T", "der"), metrics)
        self.assertIn(("N", "overlap_precision"), metrics)

    def test_dump_for_unknown_clip(self):
        post = PosteriorSet((FEMALE.descriptor,), np.full((1, 150), 0.5), "ghost")
        with self.assertRaises(ValidationError) as ctx:
            ProtocolService.from_dump([post], ClipStore(()), 40.0)
        self.assertEqual(ctx.exception.code, "unknown_clip")


class InferScoreCommandTests(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.manifest = DatasetService.build_dataset(
            stats=ConversationStats(), n_speakers=2, n_clips=1, clip_duration=10.0, out_dir=self.root / "data", seed=2,
        )
        fcfg = FrontendConfig(d_model=16)
        mcfg = ModelConfig(d_model=16, n_heads=2, encoder_layers=1, decoder_layers=1)
        torch.manual_seed(0)
        model = PTSDModel(fcfg, mcfg)
        self.checkpoint = CheckpointService.save(
            self.root / "ptsd.ckpt", model, system_config(SystemKind.PTSD, fcfg, mcfg), meta={"config_hash": "f" * 64},
        )
        self.store = ClipStore.references(self.manifest)
        self.clip = self.store.clips[0]

    def tearDown(self):
        self.tmp.cleanup()

    def _prompts(self, *lines: str) -> Path:
        path = self.root / "prompts.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def _solo_time(self) -> float:
        frames = LabelService.solo_frames(self.clip.activity)[self.clip.activity.speaker_ids[0]]
        return float(frames[frames.size // 2]) / 25 + 0.02

    def test_infer_then_score(self):
        prompts = self._prompts(f"T {self.clip.clip_id} {self._solo_time():.2f}", "G female", "N overlap", "K")
        dump = self.root / "out" / "dump.tsv"
        call_command(
            "infer", "--checkpoint", str(self.checkpoint), "--prompts", str(prompts),
            "--manifest", str(self.manifest.path), "--chunk", "4", "--missing-anchor", "floor", "--out", str(dump), stdout=io.StringIO(),
        )
        lines = dump.read_text().splitlines()
        self.assertTrue(lines[0].startswith(f"# frame_rate=25 config_hash={'f' * 64} chunk=4"))
        self.assertEqual(len(lines), 5)
        self.assertEqual(len(lines[1].split("\t")[2].split()), 250)
        self.assertTrue((self.root / "out" / "dump.run_config.json").exists())

        report = self.root / "out" / "report.jsonl"
        call_command(
            "score", "--dump", str(dump), "--manifest", str(self.manifest.path),
            "--out", str(report), stdout=io.StringIO(),
        )
        records = ReportService.read_report(report)
        self.assertIn(("T", "der"), {(r.attribute, r.metric) for r in records})
        self.assertEqual(RunRecord.objects.filter(status=RunStatus.SUCCEEDED).count(), 2)

    def test_perfect_dump_scores_zero_der(self):
        descriptors = [s.descriptor for s in protocol_specs(self.clip.activity)]
        labels = reference_labels(self.clip.activity, self.clip.profiles, descriptors, 40.0)
        post = PosteriorSet(labels.descriptors, labels.matrix().astype(np.float64), self.clip.clip_id)
        dump = write_score_dump(self.root / "perfect.tsv", [post], config_hash="x", chunk=40.0, system="oracle")

        report = self.root / "perfect.jsonl"
        call_command(
            "score", "--dump", str(dump), "--manifest", str(self.manifest.path), "--median-window", "1",
            "--metric", "der", "--out", str(report), stdout=io.StringIO(),
        )
        values = {(r.attribute, r.metric): r.value for r in ReportService.read_report(report)}
        self.assertEqual(values[("T", "der")], 0.0)
        self.assertEqual(values[("T", "ap")], 1.0)
        saved = json.loads((self.root / "perfect.run_config.json").read_text())
        self.assertEqual(saved["eval"]["median_window"], 1)

    def test_prompt_for_missing_clip(self):
        prompts = self._prompts("T nowhere 1.0")
        with self.assertRaises(CommandError) as ctx:
            call_command(
                "infer", "--checkpoint", str(self.checkpoint), "--prompts", str(prompts),
                "--manifest", str(self.manifest.path), "--out", str(self.root / "d.tsv"), stdout=io.StringIO(),
            )
        self.assertEqual(ctx.exception.returncode, 2)

    def test_missing_checkpoint(self):
        with self.assertRaises(CommandError) as ctx:
            call_command(
                "infer", "--checkpoint", str(self.root / "none.ckpt"), "--manifest", str(self.manifest.path),
                "--out", str(self.root / "d.tsv"), stdout=io.StringIO(),
            )
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(RunRecord.objects.get(command="infer").status, RunStatus.FAILED)

    def test_benchmark_writes_report(self):
        out = self.root / "bench.jsonl"
        stdout = io.StringIO()
        call_command(
            "benchmark", "--ptsd", str(self.checkpoint), "--manifest", str(self.manifest.path),
            "--chunk", "4", "--out", str(out), stdout=stdout,
        )
        records = ReportService.read_report(out)
        self.assertTrue(all(r.system == "ptsd" for r in records))
        self.assertIn(("G", "ap"), {(r.attribute, r.metric) for r in records})
        self.assertIn("system", stdout.getvalue())
