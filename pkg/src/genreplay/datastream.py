"""Task streams for incremental training, plus the synthetic desk benchmark.

The synthetic benchmark makes the content/statistics split explicit: every
class is an oriented sinusoidal grating with a class-specific (frequency,
orientation) pair, while phase and pixel noise vary freely per sample.  The
unlabeled pool draws its frequencies and orientations strictly between the
class values, so it shares low-level statistics with the labeled data but
never a class identity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError


def split_protocol(total_classes: int, steps: int) -> list[int]:
    """Class counts per task: half the classes first, the rest in equal steps."""
    if total_classes % 2 != 0:
        raise ConfigError(f"total_classes must be even, got {total_classes}")
    half = total_classes // 2
    if steps < 1 or half % steps != 0:
        raise ConfigError(f"steps ({steps}) must divide half the classes ({half})")
    return [half] + [half // steps] * steps


@dataclass
class Task:
    index: int
    class_ids: list[int]
    images: np.ndarray   # (N, C, S, S)
    labels: np.ndarray   # (N,)


@dataclass
class TaskStream:
    tasks: list[Task]
    test_per_class: dict[int, np.ndarray]
    image_size: int
    channels: int
    class_params: dict[int, tuple[float, float]] = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def classes_up_to(self, task_index: int) -> list[int]:
        seen: list[int] = []
        for t in self.tasks[: task_index + 1]:
            seen.extend(t.class_ids)
        return seen

    def test_set(self, classes) -> tuple[np.ndarray, np.ndarray]:
        classes = sorted(classes)
        images = np.concatenate([self.test_per_class[c] for c in classes])
        labels = np.concatenate(
            [np.full(len(self.test_per_class[c]), c, dtype=np.int64) for c in classes]
        )
        return images, labels


class UnlabeledPool:
    """Unlabeled images with a seeded sampler; never contributes labels."""

    def __init__(self, images: np.ndarray, params: np.ndarray | None = None, seed=0):
        self.images = images
        self.params = params  # per-image construction record, for audits
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.images)

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def sample(self, n: int) -> np.ndarray:
        """n images uniform with replacement; n=0 gives an empty batch."""
        if len(self.images) == 0:
            raise ContractError("unlabeled pool is empty")
        if n == 0:
            return self.images[:0]
        idx = self.rng.integers(0, len(self.images), size=n)
        return self.images[idx]


@dataclass
class SyntheticSpec:
    classes: int = 6
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 16
    noise_sigma: float = 0.1
    pool_size: int = 2000
    amplitude: float = 0.25
    freq_range: tuple[float, float] = (1.5, 4.5)


def _grating(size, freq, orient, phase, rng, sigma, amplitude, dtype):
    coords = np.arange(size, dtype=np.float64) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = xx * np.cos(orient) + yy * np.sin(orient)
    img = 0.5 + amplitude * np.sin(2.0 * np.pi * freq * proj + phase)
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(dtype)[None, :, :]


def _class_parameter_grid(spec: SyntheticSpec):
    nf = int(np.ceil(np.sqrt(spec.classes)))
    no = int(np.ceil(spec.classes / nf))
    lo, hi = spec.freq_range
    freqs = np.linspace(lo, hi, nf) if nf > 1 else np.array([(lo + hi) / 2.0])
    orients = np.array([i * np.pi / no for i in range(no)])
    params = {}
    for c in range(spec.classes):
        params[c] = (float(freqs[c % nf]), float(orients[c // nf]))
    return params, freqs, orients


def make_synthetic_stream(spec: SyntheticSpec, steps: int, seed: int,
                          dtype=np.float32) -> tuple[TaskStream, UnlabeledPool]:
    """Deterministic grating stream plus a parameter-disjoint unlabeled pool.

    Pool frequencies are drawn uniformly between adjacent class frequencies
    (margin 15% of the gap) and orientations between adjacent class
    orientations, so no pool image shares a class parameter pair.
    """
    counts = split_protocol(spec.classes, steps)
    class_params, freqs, orients = _class_parameter_grid(spec)
    root = np.random.SeedSequence(seed)
    data_seq, pool_seq, sampler_seq = root.spawn(3)
    rng = np.random.default_rng(data_seq)

    train: dict[int, np.ndarray] = {}
    test: dict[int, np.ndarray] = {}
    for c in range(spec.classes):
        freq, orient = class_params[c]
        stack = []
        for _ in range(spec.train_per_class + spec.test_per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            stack.append(_grating(spec.image_size, freq, orient, phase, rng,
                                  spec.noise_sigma, spec.amplitude, dtype))
        stack = np.stack(stack)
        train[c] = stack[: spec.train_per_class]
        test[c] = stack[spec.train_per_class:]

    tasks = []
    next_class = 0
    for i, count in enumerate(counts):
        ids = list(range(next_class, next_class + count))
        next_class += count
        images = np.concatenate([train[c] for c in ids])
        labels = np.concatenate([np.full(spec.train_per_class, c, dtype=np.int64) for c in ids])
        tasks.append(Task(index=i, class_ids=ids, images=images, labels=labels))

    pool_rng = np.random.default_rng(pool_seq)
    pool_images = []
    pool_params = []
    f_sorted = np.sort(freqs)
    o_sorted = np.sort(orients)
    no = len(o_sorted)
    for _ in range(spec.pool_size):
        if len(f_sorted) > 1:
            j = pool_rng.integers(0, len(f_sorted) - 1)
            gap = f_sorted[j + 1] - f_sorted[j]
            freq = pool_rng.uniform(f_sorted[j] + 0.15 * gap, f_sorted[j + 1] - 0.15 * gap)
        else:
            freq = f_sorted[0] + 0.5
        # orientation segments wrap at pi (gratings have pi symmetry)
        j = pool_rng.integers(0, no)
        lo = o_sorted[j]
        hi = o_sorted[j + 1] if j + 1 < no else o_sorted[0] + np.pi
        gap = hi - lo
        orient = pool_rng.uniform(lo + 0.15 * gap, hi - 0.15 * gap) % np.pi
        phase = pool_rng.uniform(0.0, 2.0 * np.pi)
        pool_images.append(_grating(spec.image_size, freq, orient, phase, pool_rng,
                                    spec.noise_sigma, spec.amplitude, dtype))
        pool_params.append((freq, orient))

    stream = TaskStream(tasks=tasks, test_per_class=test, image_size=spec.image_size,
                        channels=1, class_params=class_params)
    pool = UnlabeledPool(np.stack(pool_images) if pool_images else
                         np.zeros((0, 1, spec.image_size, spec.image_size), dtype=dtype),
                         params=np.array(pool_params) if pool_params else None,
                         seed=sampler_seq)
    return stream, pool


@dataclass
class TripletBatch:
    """Aligned exemplar / unlabeled / same-class-reference arrays."""

    exemplar_images: np.ndarray
    exemplar_labels: np.ndarray
    unlabeled_images: np.ndarray
    reference_images: np.ndarray


def make_triplet_batches(class_exemplars: dict[int, np.ndarray], task_images: np.ndarray,
                         task_labels: np.ndarray, pool: UnlabeledPool,
                         batch_size: int, rng: np.random.Generator):
    """One epoch of triplet batches: a shuffled pass over the task's exemplars,
    each paired with a fresh same-class reference from the task dataset and a
    fresh unlabeled image."""
    class_to_positions = {}
    for c in class_exemplars:
        positions = np.flatnonzero(task_labels == c)
        if positions.size == 0:
            raise ContractError(f"class {c} has exemplars but no task samples")
        class_to_positions[c] = positions

    flat_images = np.concatenate([class_exemplars[c] for c in sorted(class_exemplars)])
    flat_labels = np.concatenate(
        [np.full(len(class_exemplars[c]), c, dtype=np.int64) for c in sorted(class_exemplars)]
    )
    order = rng.permutation(len(flat_labels))
    for start in range(0, len(order), batch_size):
        take = order[start: start + batch_size]
        labels = flat_labels[take]
        refs = np.stack([
            task_images[class_to_positions[c][rng.integers(0, len(class_to_positions[c]))]]
            for c in labels
        ])
        yield TripletBatch(
            exemplar_images=flat_images[take],
            exemplar_labels=labels,
            unlabeled_images=pool.sample(len(take)),
            reference_images=refs,
        )


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering range(n) once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


def ingest_image_folder(path, image_size: int, labeled: bool | None = None):
    """Load a directory of images as a labeled dataset (class subfolders) or
    an unlabeled pool (flat folder of images).

    Images are converted to grayscale, resized to ``image_size`` and scaled
    to [0, 1].  Files are visited in lexicographic path order so re-ingestion
    reproduces the same arrays; unreadable files are skipped with a warning.
    """
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ImportError("folder ingestion needs pillow (pip install pillow)") from exc

    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {root}")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    if labeled is None:
        labeled = bool(subdirs)

    def load_one(p):
        try:
            with Image.open(p) as im:
                im = im.convert("L").resize((image_size, image_size), Image.BILINEAR)
                return np.asarray(im, dtype=np.float32)[None, :, :] / 255.0
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {p}: {exc}")
            return None

    if labeled:
        images, labels = [], []
        class_names = []
        for class_id, sub in enumerate(subdirs):
            class_names.append(sub.name)
            loaded = [a for a in (load_one(p) for p in sorted(sub.iterdir()) if p.is_file())
                      if a is not None]
            if not loaded:
                raise ConfigError(f"class folder {sub} contains no readable images")
            images.extend(loaded)
            labels.extend([class_id] * len(loaded))
        return np.stack(images), np.asarray(labels, dtype=np.int64), class_names

    files = sorted(p for p in root.iterdir() if p.is_file())
    loaded = [a for a in (load_one(p) for p in files) if a is not None]
    if not loaded:
        raise ConfigError(f"folder {root} contains no readable images")
    return np.stack(loaded)
