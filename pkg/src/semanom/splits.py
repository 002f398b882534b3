"""Hold-one-class-out splits.

For a K-class dataset there are K splits. Split k trains on the other K-1
classes (labels remapped in order) and tests on the full test set, where
class k examples are the anomalies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset


@dataclass
class HoldOutSplit:
    held_out_class: int
    held_out_name: str
    train: LabeledDataset
    test_images: np.ndarray
    test_labels: np.ndarray  # remapped to the train label space, -1 for anomalies
    is_anomaly: np.ndarray
    trials: int = 1

    def __post_init__(self):
        if len(self.test_images) != len(self.is_anomaly) or len(self.test_labels) != len(self.is_anomaly):
            raise ValueError("test images, labels and anomaly flags differ in length")
        if not np.array_equal(self.test_labels < 0, self.is_anomaly):
            raise ValueError("anomaly flags must mark exactly the held-out test examples")

    @property
    def skew(self) -> float:
        return float(np.count_nonzero(self.is_anomaly)) / len(self.is_anomaly)

    @property
    def class_map(self) -> list[int]:
        """Original class id for each remapped train label."""
        return [c for c in range(self.train.n_classes + 1) if c != self.held_out_class]

    def __len__(self) -> int:
        return len(self.is_anomaly)


def make_holdout_splits(train: LabeledDataset, test: LabeledDataset,
                        trials_per_class: int = 3) -> list[HoldOutSplit]:
    if train.class_names != test.class_names:
        raise ValueError("train and test datasets must share one class list")
    k = train.n_classes
    if k < 2:
        raise ValueError("need at least two classes to hold one out")
    for c in range(k):
        if not np.any(test.labels == c):
            raise ValueError(f"class {c} ({train.class_names[c]!r}) absent from test set")
        if not np.any(train.labels == c):
            raise ValueError(f"class {c} ({train.class_names[c]!r}) absent from train set")
    if trials_per_class < 1:
        raise ValueError("trials_per_class must be >= 1")

    splits = []
    for held in range(k):
        # order-preserving remap of the remaining classes
        remap = np.full(k, -1, dtype=np.int64)
        kept = [c for c in range(k) if c != held]
        remap[kept] = np.arange(k - 1)
        keep = train.labels != held
        sub = LabeledDataset(train.images[keep], remap[train.labels[keep]],
                             [train.class_names[c] for c in kept])
        test_labels = remap[test.labels]
        splits.append(HoldOutSplit(
            held_out_class=held,
            held_out_name=train.class_names[held],
            train=sub,
            test_images=test.images,
            test_labels=test_labels,
            is_anomaly=test.labels == held,
            trials=trials_per_class,
        ))
    return splits
