import numpy as np

Z_95 = 1.959963984540054


class MetricTracker:
    """Tracks the metrics of one cell of a simulation study.

    The MetricTracker collects, per iteration, the accuracy of an estimated optimal rule and the bias and
    confidence interval coverage of every decomposition estimand, and summarizes them over the iterations.

    Attributes:
        accuracies: The rule accuracy recorded per iteration.
        biases: Per estimand, the bias recorded per iteration.
        coverages: Per estimand, whether the 95% confidence interval covered the truth, per iteration.
        failures: The number of iterations whose analysis failed.
    """

    def __init__(self) -> None:
        self.accuracies = []
        self.biases = {}
        self.coverages = {}
        self.failures = 0

    def record_accuracy(self, value: float) -> None:
        """Records the accuracy of the rule(s) estimated in a single iteration."""

        if not 0 <= value <= 1:
            raise ValueError(f"An accuracy must lie in [0, 1], found {value}.")

        self.accuracies.append(float(value))

    def record_estimate(self, name: str, estimate: float, se: float, truth: float) -> tuple[float, bool]:
        """Calculates and records the bias and coverage of an estimand for a single iteration.

        Args:
            name (str): The estimand, e.g. "zeta_icde".
            estimate (float): The point estimate.
            se (float): Its standard error.
            truth (float): The true value.

        Returns:
            tuple[float, bool]: The bias and whether the normal-approximation 95% interval covered the truth.
        """

        current_bias = bias(estimate, truth)
        current_coverage = covers(estimate, se, truth)
        self.biases.setdefault(name, []).append(current_bias)
        self.coverages.setdefault(name, []).append(current_coverage)

        return current_bias, current_coverage

    @property
    def iterations(self) -> int:
        return len(self.accuracies)

    def get_summary(self) -> list[dict]:
        """Returns the median, quartiles and mean of every recorded metric.

        Raises:
            ValueError: When no metrics have been recorded yet.

        Returns:
            list[dict]: One row per metric.
        """

        if self.iterations == 0:
            raise ValueError("No metrics have been recorded yet, so a summary cannot be calculated.")

        series = {"accuracy": self.accuracies}
        series.update({f"bias_{name}": values for name, values in self.biases.items()})
        series.update({f"coverage_{name}": np.asarray(values, dtype=float) for name, values in self.coverages.items()})

        return [summarize(metric, values) for metric, values in series.items()]


def summarize(metric: str, values) -> dict:
    """Summarizes the values of a metric by median, quartiles and mean."""

    values = np.asarray(values, dtype=float)
    q25, median, q75 = np.percentile(values, [25, 50, 75])

    return {"metric": metric, "median": median, "q25": q25, "q75": q75, "mean": values.mean(), "count": len(values)}


def accuracy(recommended: np.ndarray, optimal: np.ndarray) -> float:
    """Returns the fraction of units whose recommendation matches the true optimal value."""

    return float(np.mean(np.asarray(recommended) == np.asarray(optimal)))


def bias(estimate: float, truth: float) -> float:
    return estimate - truth


def covers(estimate: float, se: float, truth: float, z: float = Z_95) -> bool:
    """Returns whether the normal-approximation interval estimate +- z se contains the truth."""

    return bool(abs(estimate - truth) <= z * se)
