import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, EmptyEvaluationError, ParseError
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    aggregate_runs,
    format_report,
    miou,
    pixel_accuracy,
    read_metrics_file,
    write_metrics_file,
)


def _brute_force(pred, label, k, ignore=255):
    """Per-pixel reference: (per-class IoU, accuracy) with plain Python loops."""
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    correct = scored = 0
    for p, t in zip(pred.reshape(-1).tolist(), label.reshape(-1).tolist()):
        if t == ignore:
            continue
        scored += 1
        if p == t:
            tp[t] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[t] += 1
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) if tp[c] + fp[c] + fn[c] else None for c in range(k)]
    return ious, correct / scored


class TestConfusionMatrix(unittest.TestCase):
    def test_worked_example(self):
        cm = ConfusionMatrix(2, np.array([[3, 1], [1, 3]]))
        value, per_class = miou(cm)
        self.assertAlmostEqual(value, 0.6, places=12)
        self.assertEqual(per_class, [0.6, 0.6])
        self.assertEqual(pixel_accuracy(cm), 0.75)

    def test_perfect_prediction(self):
        label = np.array([[0, 1], [2, 2]])
        cm = ConfusionMatrix(3).accumulate(label, label)
        self.assertEqual(miou(cm)[0], 1.0)
        self.assertEqual(pixel_accuracy(cm), 1.0)

    def test_absent_class_is_excluded(self):
        cm = ConfusionMatrix(3).accumulate(np.array([0, 1, 1]), np.array([0, 1, 1]))
        value, per_class = miou(cm)
        self.assertIsNone(per_class[2])
        self.assertEqual(value, 1.0)

    def test_ignored_pixels_are_not_scored(self):
        cm = ConfusionMatrix(2).accumulate(np.array([1, 0, 1]), np.array([255, 0, 1]))
        self.assertEqual(cm.total, 2)
        with self.assertRaises(EmptyEvaluationError):
            pixel_accuracy(ConfusionMatrix(2).accumulate(np.array([0]), np.array([255])))
        with self.assertRaises(EmptyEvaluationError):
            miou(ConfusionMatrix(2))

    def test_contract_errors(self):
        with self.assertRaises(ContractError):
            ConfusionMatrix(2).accumulate(np.array([2]), np.array([0]))
        with self.assertRaises(ContractError):
            ConfusionMatrix(2).accumulate(np.array([0]), np.array([5]))
        with self.assertRaises(DimensionError):
            ConfusionMatrix(2).accumulate(np.array([0, 1]), np.array([0]))

    def test_merge_matches_single_pass(self):
        rng = np.random.default_rng(0)
        pred, label = rng.integers(0, 3, size=(2, 5, 5)), rng.integers(0, 3, size=(2, 5, 5))
        merged = ConfusionMatrix(3).accumulate(pred[0], label[0]).merge(
            ConfusionMatrix(3).accumulate(pred[1], label[1])
        )
        np.testing.assert_array_equal(merged.counts, ConfusionMatrix(3).accumulate(pred, label).counts)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            pred = rng.integers(0, k, size=(6, 7))
            label = rng.integers(0, k, size=(6, 7))
            label[rng.random((6, 7)) < 0.1] = 255
            if (label == 255).all():
                continue
            cm = ConfusionMatrix(k).accumulate(pred, label)
            ious, accuracy = _brute_force(pred, label, k)
            self.assertEqual(miou(cm)[1], ious)
            self.assertEqual(pixel_accuracy(cm), accuracy)


class TestMetricsFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_then_read(self):
        report = MetricsReport(miou=0.6, accuracy=0.75, per_class=[0.5, None, 0.7])
        path = self.dir / "metrics.txt"
        write_metrics_file(path, report)
        self.assertIn("per_class_iou.1=nan", path.read_text().splitlines())
        self.assertEqual(read_metrics_file(path), report)

    def test_malformed_line_reports_offset(self):
        path = self.dir / "metrics.txt"
        path.write_text("miou=0.5\nbroken\n")
        with self.assertRaises(ParseError) as ctx:
            read_metrics_file(path)
        self.assertEqual(ctx.exception.offset, 9)

    def test_missing_key(self):
        path = self.dir / "metrics.txt"
        path.write_text("accuracy=0.5\n")
        with self.assertRaises(ParseError):
            read_metrics_file(path)


class TestAggregation(unittest.TestCase):
    def test_mean_and_sample_std(self):
        reports = [
            MetricsReport(miou=0.5, accuracy=0.8, per_class=[0.4, None]),
            MetricsReport(miou=0.7, accuracy=0.9, per_class=[0.6, None]),
        ]
        agg = aggregate_runs(reports)
        self.assertAlmostEqual(agg.miou, 0.6)
        self.assertAlmostEqual(agg.std, math.sqrt(0.02))
        self.assertAlmostEqual(agg.accuracy, 0.85)
        self.assertAlmostEqual(agg.per_class[0], 0.5)
        self.assertIsNone(agg.per_class[1])
        self.assertEqual(agg.seeds, 2)
        self.assertIn("(2 seeds)", format_report(agg))

    def test_single_run_has_zero_std(self):
        agg = aggregate_runs([MetricsReport(miou=0.5, accuracy=0.8, per_class=[0.5])])
        self.assertEqual(agg.std, 0.0)

    def test_nothing_to_aggregate(self):
        with self.assertRaises(EmptyEvaluationError):
            aggregate_runs([])


class TestFormatReport(unittest.TestCase):
    def test_layout(self):
        text = format_report(MetricsReport(miou=0.6, accuracy=0.75, per_class=[0.6, None]), ["bg", "disc"])
        lines = text.splitlines()
        self.assertEqual(lines[0], "mIoU       60.00")
        self.assertEqual(lines[1], "accuracy   75.00")
        self.assertEqual(lines[-1], "disc         -")


if __name__ == "__main__":
    unittest.main()
