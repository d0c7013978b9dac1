"""Two-phase incremental training loop.

Phase A (per task): train backbone + classifier on the new task's data, with
stored exemplars, generator-diversified replays of those exemplars, and
cosine feature distillation against the previous backbone.  Phase B (before
the task's dataset is dropped): freeze backbone + classifier and train one
feature generator per new class on (exemplar, unlabeled, same-class
reference) triplets.  Generators are frozen ever after and act as static
mapping functions during replay: generated maps enter the graph as
constants, so no gradient flows through a generator outside its own phase.

All randomness is drawn from purpose-split child streams of one seed, which
is what makes strategy-equality contracts (e.g. replay_generator with n=0
and alpha2=0 equals plain replay bit-for-bit) hold exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .datastream import TaskStream, UnlabeledPool, epoch_batches, make_triplet_batches
from .errors import ContractError, ProtocolOrderError
from .memory import ExemplarMemory, add_task_exemplars
from .nets import GeneratorBank, GrowableClassifier, SplitBackbone, check_unique_names
from .tensor import SGD, Tensor, no_grad

STRATEGIES = ("finetune", "replay", "replay_mixup", "replay_generator")

# fixed spawn order of the per-purpose RNG streams under one run seed
_STREAM_NAMES = ("model_init", "head_init", "gen_init", "data_order",
                 "exemplar_draw", "gen_train", "mixup", "pool")


@dataclass
class ModelSpec:
    in_channels: int = 1
    stage_widths: tuple = (16, 32, 64)
    plug_index: int = 2
    generator_depth: int = 2


@dataclass
class TrainConfig:
    task_epochs: int = 30
    generator_epochs: int = 20
    lr: float = 0.1
    generator_lr: float = 0.003
    momentum: float = 0.9
    batch_size: int = 32
    exemplar_batch_size: int = 16
    generated_per_exemplar: int = 2
    generator_weights: L.GeneratorLossWeights = field(default_factory=L.GeneratorLossWeights)
    task_weights: L.TaskLossWeights = field(default_factory=L.TaskLossWeights)
    gram_normalize: bool = True
    distill_reduction: str = "mean"
    mixup_alpha: float = 0.2
    strategy: str = "replay_generator"
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        if self.generated_per_exemplar < 0:
            raise ValueError("generated_per_exemplar must be >= 0")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass
class RunMetrics:
    """Per-task top-1 accuracy on all seen classes, their mean, and the
    task-by-task accuracy matrix (row i = accuracy per earlier task's classes
    after task i)."""

    seed: int
    per_task_accuracy: list[float] = field(default_factory=list)
    accuracy_matrix: list[list[float]] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(self.per_task_accuracy)) if self.per_task_accuracy else 0.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "per_task_accuracy": self.per_task_accuracy,
            "average_accuracy": self.average_accuracy,
            "accuracy_matrix": self.accuracy_matrix,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


def mixup_images(exemplars: np.ndarray, unlabeled: np.ndarray, alpha: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-level convex combination beta*x_m + (1-beta)*x_u with per-sample
    beta ~ Beta(alpha, alpha); labels stay with the exemplar."""
    if exemplars.shape != unlabeled.shape:
        raise ValueError(f"batch shapes differ: {exemplars.shape} vs {unlabeled.shape}")
    betas = rng.beta(alpha, alpha, size=len(exemplars)).astype(exemplars.dtype)
    b = betas.reshape(-1, 1, 1, 1)
    return b * exemplars + (1.0 - b) * unlabeled, betas


def replay_generate(backbone: SplitBackbone, bank: GeneratorBank,
                    exemplar_images: np.ndarray, exemplar_labels: np.ndarray,
                    pool: UnlabeledPool, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n generated mid-level maps per exemplar, labels inherited.

    Runs entirely without gradients; the trainer feeds the returned maps back
    into the upper network as constants.
    """
    if n == 0:
        c, h, w = backbone.mid_shape()
        return (np.zeros((0, c, h, w), dtype=backbone.dtype),
                np.zeros(0, dtype=np.int64))
    for c in np.unique(exemplar_labels):
        if int(c) not in bank:
            raise KeyError(f"no generator for class {int(c)}")
    with no_grad():
        mids = backbone.forward_lower(Tensor(exemplar_images)).data
        mids_rep = np.repeat(mids, n, axis=0)
        labels_rep = np.repeat(exemplar_labels, n)
        styles = backbone.forward_lower(Tensor(pool.sample(len(mids_rep)))).data
        out = np.empty_like(mids_rep)
        for c in np.unique(labels_rep):
            grp = np.flatnonzero(labels_rep == c)
            gen = bank.get(int(c))
            out[grp] = gen(Tensor(mids_rep[grp]), Tensor(styles[grp])).data
    return out, labels_rep


def evaluate(backbone: SplitBackbone, head: GrowableClassifier,
             images: np.ndarray, labels: np.ndarray, chunk: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(images) == 0:
        raise ValueError("empty test set")
    correct = 0
    with no_grad():
        for start in range(0, len(images), chunk):
            x = Tensor(images[start:start + chunk])
            logits = head(backbone.features(x)).data
            correct += int((logits.argmax(axis=1) == labels[start:start + chunk]).sum())
    return correct / len(images)


class IncrementalTrainer:
    """Owns the model, generator bank, exemplar memory and RNG streams for
    one incremental run over a task stream."""

    def __init__(self, stream: TaskStream, pool: UnlabeledPool,
                 model: ModelSpec, cfg: TrainConfig, memory_budget: int):
        self.stream = stream
        self.pool = pool
        self.model_spec = model
        self.cfg = cfg
        dtype = cfg.dtype

        seqs = np.random.SeedSequence(cfg.seed).spawn(len(_STREAM_NAMES))
        self.rngs = {name: np.random.default_rng(seq)
                     for name, seq in zip(_STREAM_NAMES, seqs)}
        pool.reseed(seqs[_STREAM_NAMES.index("pool")])

        self.backbone = SplitBackbone(model.in_channels, model.stage_widths,
                                      model.plug_index, stream.image_size,
                                      dtype, self.rngs["model_init"])
        self.head = GrowableClassifier(self.backbone.feature_dim, dtype)
        mid_channels = self.backbone.mid_shape()[0]
        self.bank = GeneratorBank(mid_channels, model.generator_depth, dtype)
        self.memory = ExemplarMemory(budget=memory_budget)
        self.snapshot: SplitBackbone | None = None
        self.metrics = RunMetrics(seed=cfg.seed)
        self.next_task = 0
        self._dropped: set[int] = set()
        self.generator_loss_curves: dict[int, list[float]] = {}

    # -- phase A ---------------------------------------------------------

    def grow_for_task(self, task_index: int):
        self.head.grow(len(self.stream.tasks[task_index].class_ids), self.rngs["head_init"])

    def train_task(self, task_index: int):
        cfg = self.cfg
        task = self.stream.tasks[task_index]
        seen = self.stream.classes_up_to(task_index)
        if self.head.num_classes != len(seen):
            raise ContractError(
                f"head has {self.head.num_classes} classes, task {task_index} needs {len(seen)}"
            )
        if cfg.strategy == "replay_generator":
            for c in self.memory.classes:
                if c not in self.bank:
                    raise ContractError(f"memory class {c} has no generator")

        self.bank.set_trainable(False)
        self.backbone.set_trainable(True)
        self.head.set_trainable(True)
        params = self.backbone.parameters() + self.head.parameters()
        check_unique_names(params)
        opt = SGD(params, cfg.lr, cfg.momentum)
        decay_epoch = (2 * cfg.task_epochs) // 3

        alpha1 = cfg.task_weights.alpha1
        alpha2 = cfg.task_weights.alpha2
        replay_on = cfg.strategy != "finetune" and len(self.memory) > 0
        use_memory_ce = replay_on and alpha1 > 0
        use_generated = (cfg.strategy == "replay_generator" and replay_on
                         and alpha1 > 0 and cfg.generated_per_exemplar > 0)
        use_mixup = cfg.strategy == "replay_mixup" and replay_on and alpha1 > 0
        use_distill = replay_on and alpha2 > 0 and self.snapshot is not None
        need_exemplars = use_memory_ce or use_distill
        if need_exemplars:
            mem_inputs, mem_labels = self.memory.all_exemplars()

        data_rng = self.rngs["data_order"]
        mem_rng = self.rngs["exemplar_draw"]
        for epoch in range(cfg.task_epochs):
            opt.lr = cfg.lr * (0.1 if epoch >= decay_epoch else 1.0)
            for idx in epoch_batches(len(task.labels), cfg.batch_size, data_rng):
                logits = self.head(self.backbone.features(Tensor(task.images[idx])))
                total = T.softmax_cross_entropy(logits, task.labels[idx])

                if need_exemplars:
                    pick = mem_rng.integers(0, len(mem_labels), size=cfg.exemplar_batch_size)
                    xm, ym = mem_inputs[pick], mem_labels[pick]
                    feats_mem = self.backbone.features(Tensor(xm))
                    if use_memory_ce:
                        replay_ce = T.softmax_cross_entropy(self.head(feats_mem), ym)
                        if use_generated:
                            gen_maps, gen_labels = replay_generate(
                                self.backbone, self.bank, xm, ym, self.pool,
                                cfg.generated_per_exemplar)
                            gen_feats = self.backbone.forward_upper(Tensor(gen_maps))
                            gen_ce = T.softmax_cross_entropy(self.head(gen_feats), gen_labels)
                            replay_ce = replay_ce + gen_ce
                        elif use_mixup:
                            mixed, _ = mixup_images(xm, self.pool.sample(len(xm)),
                                                    cfg.mixup_alpha, self.rngs["mixup"])
                            mix_feats = self.backbone.features(Tensor(mixed))
                            replay_ce = replay_ce + T.softmax_cross_entropy(
                                self.head(mix_feats), ym)
                        total = total + alpha1 * replay_ce
                    if use_distill:
                        with no_grad():
                            old_feats = self.snapshot.features(Tensor(xm)).data
                        dist = L.distillation_loss(Tensor(old_feats), feats_mem,
                                                   cfg.distill_reduction)
                        total = total + alpha2 * dist

                if not np.isfinite(total.data):
                    raise ContractError(
                        f"non-finite loss at task {task_index}, epoch {epoch}"
                    )
                T.backward(total)
                opt.step()

    # -- phase B ---------------------------------------------------------

    def train_generators(self, task_index: int):
        if task_index in self._dropped:
            raise ProtocolOrderError(
                f"task {task_index} dataset already dropped; generators must be "
                "trained before the drop"
            )
        cfg = self.cfg
        task = self.stream.tasks[task_index]
        new_classes = [c for c in task.class_ids if c in self.memory.per_class]
        if not new_classes:
            raise ContractError("no exemplars selected for the current task")
        self.bank.create(new_classes, task_index, self.rngs["gen_init"])

        self.backbone.set_trainable(False)
        self.head.set_trainable(False)
        gens = {c: self.bank.get(c) for c in new_classes}
        for g in gens.values():
            g.set_trainable(True)
        # one optimizer per class: a batch only steps the generators whose
        # classes actually appear in it, and momentum persists per generator
        opts = {c: SGD(gens[c].parameters(), cfg.generator_lr, cfg.momentum)
                for c in new_classes}

        class_exemplars = {c: self.memory.exemplars_of(c).inputs for c in new_classes}
        w = cfg.generator_weights
        rng = self.rngs["gen_train"]
        curve = []
        for _ in range(cfg.generator_epochs):
            epoch_losses = []
            for tb in make_triplet_batches(class_exemplars, task.images, task.labels,
                                           self.pool, cfg.exemplar_batch_size, rng):
                with no_grad():
                    h_m = self.backbone.forward_lower(Tensor(tb.exemplar_images)).data
                    h_u = self.backbone.forward_lower(Tensor(tb.unlabeled_images)).data
                    h_k = self.backbone.forward_lower(Tensor(tb.reference_images)).data
                    v_k = h_k.mean(axis=(2, 3))
                batch_total = None
                batch_size = len(tb.exemplar_labels)
                for c in np.unique(tb.exemplar_labels):
                    grp = np.flatnonzero(tb.exemplar_labels == c)
                    gen = gens[int(c)]
                    sem_t = Tensor(h_m[grp])
                    sty_t = Tensor(h_u[grp])
                    h_mix = gen(sem_t, sty_t)
                    v_mix = T.global_avg_pool(h_mix)
                    feats = self.backbone.forward_upper(h_mix)
                    ce = T.softmax_cross_entropy(self.head(feats),
                                                 np.full(len(grp), c, dtype=np.int64))
                    sem = T.tsum(T.frobenius_norm(Tensor(v_k[grp]) - v_mix, axis=1))
                    g_mix = L.batched_gram(h_mix, cfg.gram_normalize)
                    g_u = L.batched_gram(sty_t, cfg.gram_normalize)
                    sty = T.tsum(T.frobenius_norm(g_u - g_mix, axis=(1, 2)))

                    h_cyc = gen(h_mix, sem_t)  # generated map now supplies content
                    v_cyc = T.global_avg_pool(h_cyc)
                    sem_cyc = T.tsum(T.frobenius_norm(v_cyc - v_mix, axis=1))
                    g_cyc = L.batched_gram(h_cyc, cfg.gram_normalize)
                    g_m = L.batched_gram(sem_t, cfg.gram_normalize)
                    sty_cyc = T.tsum(T.frobenius_norm(g_cyc - g_m, axis=(1, 2)))

                    group_total = (ce * float(len(grp)) + sem + w.lam * sty
                                   + w.lam_cyc * (sem_cyc + w.lam * sty_cyc))
                    batch_total = group_total if batch_total is None else batch_total + group_total
                loss = batch_total * (1.0 / batch_size)
                if not np.isfinite(loss.data):
                    raise ContractError(f"non-finite generator loss at task {task_index}")
                T.backward(loss)
                for c in np.unique(tb.exemplar_labels):
                    opts[int(c)].step()
                epoch_losses.append(loss.item())
            curve.append(float(np.mean(epoch_losses)))
        self.generator_loss_curves[task_index] = curve

        for g in gens.values():
            g.set_trainable(False)
        self.backbone.set_trainable(True)
        self.head.set_trainable(True)

    # -- evaluation and the outer loop ------------------------------------

    def select_exemplars(self, task_index: int):
        task = self.stream.tasks[task_index]
        seen = len(self.stream.classes_up_to(task_index))

        def feature_fn(images):
            with no_grad():
                return self.backbone.features(Tensor(images)).data

        add_task_exemplars(self.memory, task_index, task.class_ids,
                           task.images, task.labels, feature_fn, seen)

    def evaluate_task(self, task_index: int) -> float:
        seen = self.stream.classes_up_to(task_index)
        images, labels = self.stream.test_set(seen)
        acc = evaluate(self.backbone, self.head, images, labels)
        row = []
        for j in range(task_index + 1):
            t_imgs, t_labels = self.stream.test_set(self.stream.tasks[j].class_ids)
            row.append(evaluate(self.backbone, self.head, t_imgs, t_labels))
        self.metrics.per_task_accuracy.append(acc)
        self.metrics.accuracy_matrix.append(row)
        return acc

    def run_one_task(self, task_index: int):
        self.grow_for_task(task_index)
        self.train_task(task_index)
        self.select_exemplars(task_index)
        if self.cfg.strategy == "replay_generator":
            self.train_generators(task_index)
        self._dropped.add(task_index)
        self.snapshot = self.backbone.clone()
        self.evaluate_task(task_index)
        self.next_task = task_index + 1

    def run(self, checkpoint_fn=None, stop_after: int | None = None) -> RunMetrics:
        start = time.perf_counter()
        for i in range(self.next_task, self.stream.num_tasks):
            self.run_one_task(i)
            if checkpoint_fn is not None:
                checkpoint_fn(self, i)
            if stop_after is not None and i >= stop_after:
                break
        self.metrics.wall_clock_seconds += time.perf_counter() - start
        return self.metrics


def run_incremental(stream: TaskStream, pool: UnlabeledPool, model: ModelSpec,
                    cfg: TrainConfig, memory_budget: int,
                    checkpoint_fn=None, stop_after: int | None = None) -> RunMetrics:
    trainer = IncrementalTrainer(stream, pool, model, cfg, memory_budget)
    return trainer.run(checkpoint_fn=checkpoint_fn, stop_after=stop_after)
