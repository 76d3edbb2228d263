"""Sequential class-incremental training for the three methods."""

from __future__ import annotations

import csv
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import HeadConfig
from .augment import PerspectiveConfig, random_perspective
from .datamodel import Dataset, DataError, Task, TaskSequence, Triplet, sample_triplets
from .encoder import EncoderConfig, ema_update, init_teacher, to_tensor
from .losses import Hyperparams, distill_mse, info_nce, total_loss, triplet_loss
from .model import METHODS, SHARED_HEAD, RetrievalModel, save_checkpoint

# how the original-view and distorted-view InfoNCE terms combine into L_ins
INS_VIEW_WEIGHT = 1.0  # 1.0 sums the two views; 0.5 would average them


@dataclass
class MethodConfig:
    method: str = "mclfir"
    hyper: Hyperparams = field(default_factory=Hyperparams)
    epochs: int = 3
    lr: float = 1e-4
    head_lr: float | None = None  # None: same as lr
    replay_capacity: int = 2000
    replay_fraction: float = 0.5
    distill: bool = True
    perspective: PerspectiveConfig = field(default_factory=PerspectiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig | None = None

    def __post_init__(self):
        if self.method == "multihead":
            self.method = "multihead_triplet"
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.method == "er" and self.replay_capacity <= 0:
            raise ValueError("replay_capacity must be positive for er")
        if not 0.0 <= self.replay_fraction < 1.0:
            raise ValueError("replay_fraction must lie in [0, 1)")

    @property
    def uses_doublets(self) -> bool:
        return self.method == "mclfir"

    def as_flat_dict(self) -> dict:
        return {
            "method": self.method, "epochs": self.epochs, "lr": self.lr, "head_lr": self.head_lr,
            "tau": self.hyper.tau, "lambda_kd": self.hyper.lambda_kd,
            "margin": self.hyper.margin, "beta": self.hyper.beta, "batch": self.hyper.batch,
            "replay_capacity": self.replay_capacity, "replay_fraction": self.replay_fraction,
            "distill": self.distill, "perspective_strength": self.perspective.strength,
            "image_size": self.encoder.image_size,
        }


def count_images_per_step(config: MethodConfig) -> int:
    """Student-encoder images per optimizer step for a full batch."""
    b = config.hyper.batch
    return 2 * b if config.uses_doublets else 3 * b


class ReservoirBuffer:
    """Fixed-capacity uniform sample of every item ever offered."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: list = []
        self.seen = 0
        self._rng = rng

    def __len__(self):
        return len(self.items)

    def add(self, item):
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            j = int(self._rng.integers(self.seen))
            if j < self.capacity:
                self.items[j] = item

    def sample(self, k: int) -> list:
        idx = self._rng.choice(len(self.items), size=min(k, len(self.items)), replace=False)
        return [self.items[i] for i in idx]


@dataclass
class StepRecord:
    step: int
    task: int
    attribute: str
    epoch: int
    l_ins: float
    l_kd: float
    total: float


@dataclass
class TrainHistory:
    method: str
    order: list[str] = field(default_factory=list)
    records: list[StepRecord] = field(default_factory=list)
    snapshots: dict[int, RetrievalModel] = field(default_factory=dict)
    final: RetrievalModel | None = None
    report: object = None

    def epoch_means(self, task: int) -> list[float]:
        """Mean L_ins per epoch for one task."""
        by_epoch: dict[int, list[float]] = {}
        for r in self.records:
            if r.task == task:
                by_epoch.setdefault(r.epoch, []).append(r.l_ins)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def write_loss_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "task", "attribute", "epoch", "l_ins", "l_kd", "total"])
            for r in self.records:
                w.writerow([r.step, r.task, r.attribute, r.epoch,
                            repr(r.l_ins), repr(r.l_kd), repr(r.total)])


@dataclass
class TrainState:
    model: RetrievalModel
    rng: np.random.Generator
    task_cursor: int = 0
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None
    buffer: ReservoirBuffer | None = None
    trained: list[str] = field(default_factory=list)


def init_state(config: MethodConfig, seed: int) -> TrainState:
    torch.manual_seed(seed)
    head_cfg = config.head or HeadConfig(c_img=config.encoder.out_channels)
    model = RetrievalModel(config.method, config.encoder, head_cfg)
    rng = np.random.default_rng(seed)
    if config.method == "mclfir":
        model.teacher = init_teacher(model.encoder, config.hyper.beta)
    state = TrainState(model, rng)
    if config.method == "er":
        state.buffer = ReservoirBuffer(config.replay_capacity, np.random.default_rng([seed, 1]))
    return state


@contextmanager
def frozen_norm_stats(module: torch.nn.Module):
    """Batch-stat normalization without touching running statistics.

    Evaluation only embeds student features, so the teacher-view pass must not
    leak its statistics into the head's running estimates.
    """
    norms = [m for m in module.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _distort(images: np.ndarray, config: PerspectiveConfig, rng) -> np.ndarray:
    seeds = rng.integers(0, 2**63 - 1, size=len(images))
    return np.stack([random_perspective(img, config, int(s)) for img, s in zip(images, seeds)])


def _mclfir_step(state: TrainState, dataset: Dataset, attribute: str, batch, config: MethodConfig):
    model = state.model
    x_ids = [d.first for d in batch]
    z_ids = [d.second for d in batch]
    originals = dataset.images_for(x_ids + z_ids)
    distorted = _distort(originals, config.perspective, state.rng)
    b = len(batch)
    dtype = model.dtype

    f_student = model.encoder(to_tensor(originals, dtype))
    f_teacher = model.teacher(to_tensor(distorted, dtype))
    e_student = model.embed_features(f_student, attribute)
    with frozen_norm_stats(model.head_for(attribute)):
        e_teacher = model.embed_features(f_teacher, attribute)

    l_ins = (info_nce(e_student[:b], e_student[b:], config.hyper.tau)
             + INS_VIEW_WEIGHT * info_nce(e_teacher[:b], e_teacher[b:], config.hyper.tau))
    if config.distill:
        l_kd = distill_mse([f_student[:b], f_student[b:]], [f_teacher[:b], f_teacher[b:]])
        loss = total_loss(l_ins, l_kd, config.hyper.lambda_kd)
    else:
        l_kd = torch.zeros(())
        loss = l_ins
    return loss, l_ins.item(), l_kd.item()


def _triplet_step(state: TrainState, dataset: Dataset, triplets: list[Triplet], config: MethodConfig):
    model = state.model
    ids = ([t.anchor for t in triplets] + [t.positive for t in triplets]
           + [t.negative for t in triplets])
    b = len(triplets)
    fmap = model.encoder(to_tensor(dataset.images_for(ids), model.dtype))
    texts = torch.stack([model.text_vector(t.attribute) for t in triplets] * 3)
    head = model.head_for(triplets[0].attribute)
    emb = head(fmap, texts)
    loss = triplet_loss(emb[:b], emb[b:2 * b], emb[2 * b:], config.hyper.margin)
    return loss, loss.item(), 0.0


def train_task(state: TrainState, task: Task, config: MethodConfig, dataset: Dataset,
               seed: int | None = None) -> tuple[TrainState, list[StepRecord]]:
    """Train one task in place; returns the state and its step records."""
    model = state.model
    attr = task.attribute
    if not task.doublets:
        raise DataError("empty task")
    if attr in state.trained:
        raise ValueError(f"attribute {attr!r} was already trained")
    head_seed = int(state.rng.integers(2**31)) if seed is None else seed

    if config.method == "er":
        if SHARED_HEAD not in model.registry:
            model.registry.add_head(SHARED_HEAD, model.head_config, head_seed)
    else:
        model.registry.add_head(attr, model.head_config, head_seed)  # raises on duplicates
    model.text_vector(attr)
    head = model.head_for(attr)

    head_group = {"params": list(head.parameters()),
                  "lr": config.lr if config.head_lr is None else config.head_lr}
    if state.optimizer is None:
        # encoder moments persist across tasks; each task adds its head's group
        state.optimizer = torch.optim.Adam([{"params": list(model.encoder.parameters())}],
                                           lr=config.lr)
    if not any(p is head_group["params"][0] for g in state.optimizer.param_groups
               for p in g["params"]):
        state.optimizer.add_param_group(head_group)
    model.encoder.train()
    head.train()

    n = len(task.doublets)
    b = config.hyper.batch
    triplets = None
    if not config.uses_doublets:
        triplets = sample_triplets(dataset, attr, n, int(state.rng.integers(2**63 - 1)))
    records = []
    for epoch in range(config.epochs):
        if config.method == "er" and state.buffer is not None and len(state.buffer) > 0:
            k = int(round(config.replay_fraction * b))
            batches = _batches(n, max(1, b - k), state.rng)
        else:
            k = 0
            batches = _batches(n, b, state.rng)
        for idx in batches:
            if config.uses_doublets:
                loss, li, lk = _mclfir_step(state, dataset, attr,
                                            [task.doublets[i] for i in idx], config)
            else:
                batch = [triplets[i] for i in idx]
                if k:
                    batch = batch + state.buffer.sample(k)
                loss, li, lk = _triplet_step(state, dataset, batch, config)
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            if model.teacher is not None:
                ema_update(model.teacher, model.encoder)
            records.append(StepRecord(state.step, task.index, attr, epoch, li, lk, loss.item()))
            state.step += 1

    if config.method == "er":
        for t in triplets:
            state.buffer.add(t)
    else:
        model.registry.freeze(attr)
    state.trained.append(attr)
    state.task_cursor += 1
    return state, records


def train_sequence(tasks: TaskSequence, config: MethodConfig, seed: int, dataset: Dataset,
                   checkpoint_dir=None, eval_dataset: Dataset | None = None) -> TrainHistory:
    """Train every task in order, snapshotting the model after each one.

    With ``eval_dataset`` the returned history carries a forgetting report.
    """
    names = [t.attribute for t in tasks]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate attributes in task sequence: {names}")
    state = init_state(config, seed)
    history = TrainHistory(config.method, names)
    for task in tasks:
        state, recs = train_task(state, task, config, dataset)
        history.records.extend(recs)
        history.snapshots[task.index] = state.model.snapshot()
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"task_{task.index:03d}.npz",
                            state.model, state.task_cursor)
    history.final = history.snapshots[tasks[-1].index] if len(tasks) else state.model
    if eval_dataset is not None:
        from .evaluation import forgetting_report
        history.report = forgetting_report(history, eval_dataset)
    return history


def write_run(history: TrainHistory, config: MethodConfig, out_dir, settings: dict | None = None):
    """Write the config snapshot, loss trace and history manifest into ``out_dir``.

    ``settings`` replaces the default snapshot (the flattened ``config``); the
    CLI passes its resolved flags so the run can be replayed from the file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat = dict(config.as_flat_dict()) if settings is None else dict(settings)
    with open(out / "config.txt", "w") as fh:
        for k in sorted(flat):
            v = flat[k]
            if isinstance(v, (list, tuple)):
                v = ",".join(map(str, v))
            fh.write(f"{k} = {'' if v is None else v}\n")
    history.write_loss_csv(out / "loss_trace.csv")
    manifest = {
        "method": history.method,
        "order": history.order,
        "checkpoints": [f"checkpoints/task_{i:03d}.npz" for i in range(len(history.order))],
        "steps": len(history.records),
        "images_per_step": count_images_per_step(config),
    }
    with open(out / "history.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out


def steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)
