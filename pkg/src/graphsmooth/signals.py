"""Class-indicator signals on batch graphs and their smoothness bookkeeping.

Each class present in a batch gets a binary indicator vector over the batch.
Treated as signals on the per-layer similarity graphs, their summed smoothness
per layer and the gaps between consecutive monitored layers are the raw
material of the training regularizer and of the depth diagnostics.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphs import smoothness

__all__ = [
    "LabelSignalSet",
    "SmoothnessProfile",
    "make_label_signals",
    "layer_smoothness_sum",
    "smoothness_gap",
    "delta_total",
    "write_profile_csv",
]


@dataclass
class LabelSignalSet:
    """Binary indicator vectors s_c over a batch, one per class present."""

    signals: dict[int, np.ndarray]
    batch_size: int
    classes_present: list[int]

    def stacked(self) -> np.ndarray:
        """(num_classes_present, b) matrix of indicators, class order."""
        return np.stack([self.signals[c] for c in self.classes_present])


@dataclass
class SmoothnessProfile:
    """Per-layer smoothness of the label signals at one snapshot.

    per_layer: list of (layer_index, {class_id: smoothness}, summed) ordered
    by depth, one entry per monitored ReLU.
    """

    per_layer: list[tuple[int, dict[int, float], float]]
    power: int

    def summed(self) -> list[float]:
        return [total for _, _, total in self.per_layer]


def make_label_signals(labels, num_classes: int) -> LabelSignalSet:
    """Indicator signals for the classes present in a batch.

    Absent classes are omitted; their indicator would be the zero vector and
    contributes nothing anywhere.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D vector of class ids")
    b = labels.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"class id {bad} outside [0, {num_classes})")
    present = sorted(int(c) for c in np.unique(labels))
    signals = {c: (labels == c).astype(np.float64) for c in present}
    return LabelSignalSet(signals=signals, batch_size=b, classes_present=present)


def layer_smoothness_sum(graph_power: np.ndarray, signals: LabelSignalSet) -> float:
    """Sum over classes of the indicator smoothness on one (powered) Laplacian."""
    return float(sum(smoothness(graph_power, s) for s in signals.signals.values()))


def smoothness_gap(sum_pre: float, sum_post: float) -> float:
    """Absolute change of summed label-signal smoothness across a layer."""
    return abs(sum_post - sum_pre)


def delta_total(gaps) -> float:
    """Mean absolute smoothness gap over consecutive monitored layers.

    With d monitored points there are d - 1 consecutive gaps and the mean is
    taken over those; fewer than two monitored points is a configuration
    error because no gap exists.
    """
    gaps = list(gaps)
    if not gaps:
        raise ConfigError("need at least two monitored layers (one gap)")
    return float(np.mean(np.abs(gaps)))


def write_profile_csv(path, rows) -> None:
    """Smoothness profile export, one row per (epoch, layer, class).

    rows: iterables of (epoch, layer_index, power_m, class_id, smoothness).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "layer_index", "power_m", "class_id", "smoothness"])
        for row in rows:
            epoch, layer_index, power_m, class_id, value = row
            writer.writerow([epoch, layer_index, power_m, class_id, f"{value:.17g}"])
