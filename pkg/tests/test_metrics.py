import numpy as np
import pytest

from src.metrics import Z_95, MetricTracker, accuracy, covers, summarize


def test_metric_tracker_summary():
    tracker = MetricTracker()
    for value in (0.5, 0.75, 1.0):
        tracker.record_accuracy(value)
    tracker.record_estimate("zeta_icde", 0.1, 0.1, 0.0)
    tracker.record_estimate("zeta_icde", -0.3, 0.1, 0.0)

    summary = {row["metric"]: row for row in tracker.get_summary()}

    assert tracker.iterations == 3
    assert summary["accuracy"]["median"] == pytest.approx(0.75)
    assert summary["bias_zeta_icde"]["mean"] == pytest.approx(-0.1)
    assert summary["coverage_zeta_icde"]["mean"] == pytest.approx(0.5)


def test_metric_tracker_rejects_invalid_input():
    tracker = MetricTracker()

    with pytest.raises(ValueError):
        tracker.get_summary()

    with pytest.raises(ValueError):
        tracker.record_accuracy(1.5)


def test_summarize_quartiles():
    row = summarize("bias", [1, 2, 3, 4, 5])

    assert (row["q25"], row["median"], row["q75"], row["mean"], row["count"]) == (2.0, 3.0, 4.0, 3.0, 5)


def test_accuracy_and_coverage():
    assert accuracy(np.array([1, 0, 1, 1]), np.array([1, 1, 1, 0])) == 0.5
    assert covers(1.0, 0.5, 1.9)
    assert covers(1.0, 0.5, 1.0 - 0.99 * Z_95 * 0.5)
    assert not covers(1.0, 0.5, 2.0)
