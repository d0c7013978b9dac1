"""Budgeted exemplar store with greedy herding selection.

Exemplars are kept in herding rank order, so cutting a class down to a
smaller quota is a prefix truncation and never reshuffles survivors.  Raw
inputs are stored (not features): the backbone drifts across tasks and
replay re-encodes exemplars with the current network.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def herding_select(features: np.ndarray, quota: int) -> list[int]:
    """Greedy pick of ``quota`` row indices whose running feature mean best
    tracks the class mean.

    Pick k minimizes || mean - (f(x) + sum of already picked) / k ||; ties go
    to the lowest index.  A quota beyond N is clipped to N (keep everything).
    """
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if quota < 1:
        raise ValueError("quota must be >= 1")
    quota = min(quota, n)
    mean = feats.mean(axis=0)
    chosen: list[int] = []
    picked_sum = np.zeros_like(mean)
    available = np.ones(n, dtype=bool)
    for k in range(1, quota + 1):
        candidates = (picked_sum[None, :] + feats) / k
        dists = np.linalg.norm(mean[None, :] - candidates, axis=1)
        dists[~available] = np.inf
        idx = int(np.argmin(dists))  # argmin takes the lowest index on ties
        chosen.append(idx)
        picked_sum += feats[idx]
        available[idx] = False
    return chosen


@dataclass
class ClassStore:
    class_id: int
    inputs: np.ndarray            # (n, ...) raw inputs in herding rank order
    labels: np.ndarray            # (n,) all equal to class_id
    source_indices: np.ndarray    # (n,) indices into the task dataset
    task_index: int


@dataclass
class ExemplarMemory:
    """Per-class exemplar lists under a shared total budget."""

    budget: int
    per_class: dict[int, ClassStore] = field(default_factory=dict)

    def __len__(self):
        return sum(len(s.labels) for s in self.per_class.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def add_class(self, class_id: int, inputs: np.ndarray, source_indices: np.ndarray,
                  task_index: int):
        if class_id in self.per_class:
            raise ValueError(f"class {class_id} already stored")
        labels = np.full(len(inputs), class_id, dtype=np.int64)
        self.per_class[class_id] = ClassStore(
            class_id, np.asarray(inputs), labels,
            np.asarray(source_indices, dtype=np.int64), task_index,
        )

    def rebalance(self, seen_classes: int):
        """Truncate every class to floor(budget / seen_classes) exemplars by
        dropping the highest herding ranks; short classes keep everything."""
        if seen_classes < 1:
            raise ValueError("seen_classes must be >= 1")
        quota = self.budget // seen_classes
        for store in self.per_class.values():
            if len(store.labels) > quota:
                store.inputs = store.inputs[:quota]
                store.labels = store.labels[:quota]
                store.source_indices = store.source_indices[:quota]

    def all_exemplars(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (inputs, labels) in class order, rank order within class."""
        if not self.per_class:
            raise ValueError("memory is empty")
        inputs = np.concatenate([self.per_class[c].inputs for c in self.classes])
        labels = np.concatenate([self.per_class[c].labels for c in self.classes])
        return inputs, labels

    def exemplars_of(self, class_id: int) -> ClassStore:
        return self.per_class[class_id]

    def manifest(self) -> list[dict]:
        """Reproducibility audit: class id, count, and source indices."""
        return [
            {
                "class_id": c,
                "count": int(len(self.per_class[c].labels)),
                "task_index": self.per_class[c].task_index,
                "source_indices": self.per_class[c].source_indices.tolist(),
            }
            for c in self.classes
        ]


def add_task_exemplars(memory: ExemplarMemory, task_index: int, task_classes,
                       task_inputs: np.ndarray, task_labels: np.ndarray,
                       feature_fn, seen_classes: int):
    """Select exemplars for each new class with the current backbone features,
    then rebalance all stored classes to the new quota.

    ``feature_fn`` maps an input batch to a feature matrix; it is called once
    per class here and the ranking is never refreshed in later tasks.
    """
    quota = max(1, memory.budget // seen_classes)
    for c in sorted(task_classes):
        mask = task_labels == c
        if not mask.any():
            warnings.warn(f"class {c} has no samples; skipping exemplar selection")
            continue
        class_indices = np.flatnonzero(mask)
        feats = feature_fn(task_inputs[class_indices])
        picked = herding_select(feats, quota)
        source = class_indices[picked]
        memory.add_class(c, task_inputs[source], source, task_index)
    memory.rebalance(seen_classes)
