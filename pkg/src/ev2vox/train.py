"""AdamW optimization, the training loop, and per-category evaluation.

Checkpoints carry the model parameters, the norm running statistics, and
the optimizer moments, so a resumed run continues bit-for-bit where the
interrupted one stopped. The shuffle order is drawn from a generator
seeded with (seed, epoch), which is what makes resumption equivalent to
never having stopped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import voxel
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointMismatch,
    ConfigError,
    EmptyDataset,
    ShapeInconsistency,
    StateShapeMismatch,
)
from .model import E2VModel, bce_loss, frames_to_input, model_config_dict


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")

    @classmethod
    def toy(cls) -> "AdamWConfig":
        return cls(lr=1e-3)


class OptState:
    """First and second moment accumulators plus the shared step counter.

    The step counter lives here rather than in the config because it is
    mutable run state that has to survive a checkpoint round trip.
    """

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.value, dtype=np.float32) for p in params}
        self.v = {p.name: np.zeros_like(p.value, dtype=np.float32) for p in params}
        self.step = 0

    def check(self, params):
        for p in params:
            for store, label in ((self.m, "m"), (self.v, "v")):
                got = store.get(p.name)
                if got is None or got.shape != p.value.shape:
                    have = None if got is None else got.shape
                    raise StateShapeMismatch(
                        f"optimizer {label} for {p.name}: state shape {have} "
                        f"does not match parameter shape {p.value.shape}"
                    )

    def entries(self):
        out = [("opt.step", np.float32(self.step))]
        for name in self.m:
            out.append((f"opt.m/{name}", self.m[name]))
            out.append((f"opt.v/{name}", self.v[name]))
        return out

    @classmethod
    def from_entries(cls, params, entries):
        state = cls(params)
        state.step = int(entries["opt.step"])
        for p in params:
            for store, prefix in ((state.m, "opt.m/"), (state.v, "opt.v/")):
                key = prefix + p.name
                if key not in entries:
                    raise StateShapeMismatch(f"checkpoint is missing {key}")
                arr = entries[key]
                if arr.shape != p.value.shape:
                    raise StateShapeMismatch(
                        f"{key}: checkpoint shape {arr.shape} != parameter "
                        f"shape {p.value.shape}"
                    )
                store[p.name] = arr.astype(np.float32)
        return state


@dataclass
class TrainRun:
    epochs: int = 100
    batch_size: int = 5
    seed: int = 0
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be at least 1, got {self.checkpoint_every}")


def adamw_step(params, state: OptState, cfg: AdamWConfig) -> None:
    """One decoupled-weight-decay Adam update; zeroes gradients afterwards.

    Decay applies only to parameters flagged for it (conv/deconv weights);
    biases and norm gains/shifts are excluded.
    """
    state.check(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p in params:
        g = p.grad.astype(np.float32, copy=False)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if p.decay and cfg.weight_decay:
            update = update + cfg.weight_decay * p.value
        p.value -= (cfg.lr * update).astype(p.value.dtype)
        p.zero_grad()


def _as_occupancy(sample_target) -> np.ndarray:
    occ = getattr(sample_target, "occupancy", sample_target)
    return np.asarray(occ)


def _validate_dataset(dataset):
    if len(dataset) == 0:
        raise EmptyDataset("training requires at least one sample")
    first_frames = np.asarray(getattr(dataset[0][0], "frames", dataset[0][0])).shape
    first_target = _as_occupancy(dataset[0][1]).shape
    for i, (frames, target, *_rest) in enumerate(dataset):
        fs = np.asarray(getattr(frames, "frames", frames)).shape
        ts = _as_occupancy(target).shape
        if fs != first_frames or ts != first_target:
            raise ShapeInconsistency(
                f"sample {i} has shapes {fs}/{ts}, expected {first_frames}/{first_target}"
            )


@dataclass
class TrainResult:
    model: E2VModel
    opt_state: OptState
    log: list[tuple[int, float, float]]  # (epoch, mean loss, mean IoU@0.3)
    checkpoint_path: str | None = None


def _save_training_checkpoint(out_dir, model, state, run, epoch_done, log):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(path, model.state_entries() + state.entries())
    sidecar = {
        "config": model_config_dict(model.enc_cfg, model.dec_cfg, model.seed),
        "seed": run.seed,
        "epoch": epoch_done,
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("epoch,loss,iou\n")
        for row in log:
            # repr round-trips float64 exactly, so a reloaded log matches
            # the in-memory one bit for bit
            fh.write(f"{row[0]},{row[1]!r},{row[2]!r}\n")
    return path


def load_training_checkpoint(path, model):
    """Restore model and optimizer from a checkpoint written by train()."""
    entries = load_checkpoint(path)
    model_entries = {k: v for k, v in entries.items() if not k.startswith("opt.")}
    model.load_state(model_entries)
    opt_entries = {k: v for k, v in entries.items() if k.startswith("opt.")}
    if "opt.step" not in opt_entries:
        raise CheckpointMismatch("checkpoint has no optimizer state")
    state = OptState.from_entries(model.parameters(), opt_entries)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    return state, sidecar


def load_metric_log(out_dir) -> list[tuple[int, float, float]]:
    rows = []
    path = os.path.join(out_dir, "metrics.csv")
    with open(path) as fh:
        header = fh.readline()
        if header.strip() != "epoch,loss,iou":
            raise CheckpointMismatch(f"unexpected metric log header in {path}")
        for line in fh:
            e, l, i = line.strip().split(",")
            rows.append((int(e), float(l), float(i)))
    return rows


def train(
    dataset,
    model: E2VModel,
    run: TrainRun,
    opt: AdamWConfig,
    out_dir: str | os.PathLike | None = None,
    start_epoch: int = 0,
    opt_state: OptState | None = None,
    log: list[tuple[int, float, float]] | None = None,
) -> TrainResult:
    """Optimize the model on (frames, occupancy) pairs.

    Each epoch shuffles with a generator seeded by (run.seed, epoch), so
    restarting from a checkpoint at start_epoch continues the exact
    sample order of an uninterrupted run. The logged loss and IoU@0.3
    are sample-weighted means over the epoch's training batches.
    """
    _validate_dataset(dataset)
    params = model.parameters()
    state = opt_state if opt_state is not None else OptState(params)
    state.check(params)
    rows = list(log) if log is not None else []
    n = len(dataset)
    ckpt_path = None

    frames = [np.asarray(getattr(s[0], "frames", s[0])) for s in dataset]
    targets = [_as_occupancy(s[1]).astype(np.float64) for s in dataset]

    model.train()
    for epoch in range(start_epoch, run.epochs):
        order = np.random.default_rng((run.seed, epoch)).permutation(n)
        loss_sum = 0.0
        iou_sum = 0.0
        for lo in range(0, n, run.batch_size):
            batch = order[lo:lo + run.batch_size]
            x = frames_to_input([frames[i] for i in batch], dtype=model.dtype)
            y = np.stack([targets[i] for i in batch])
            probs = model.forward(x)
            loss, grad = bce_loss(probs, y)
            model.backward(grad)
            adamw_step(params, state, opt)
            loss_sum += loss * len(batch)
            for j in range(len(batch)):
                pg = voxel.ProbGrid(probs.shape[-1], probs[j])
                gt = voxel.VoxelGrid(y.shape[-1], y[j] > 0.5)
                iou_sum += voxel.iou(pg, gt, threshold=0.3)
        rows.append((epoch, loss_sum / n, iou_sum / n))
        if out_dir is not None and (
            (epoch + 1) % run.checkpoint_every == 0 or epoch == run.epochs - 1
        ):
            ckpt_path = _save_training_checkpoint(out_dir, model, state, run, epoch + 1, rows)

    return TrainResult(model, state, rows, ckpt_path)


@dataclass(frozen=True)
class CategoryRow:
    category: str
    count: int
    iou: float
    fscore: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[CategoryRow, ...]
    overall: CategoryRow
    threshold: float
    distance: float

    def text(self) -> str:
        lines = [
            f"IoU@t={self.threshold:g}, F-Score@d={self.distance:g}",
            f"{'category':<16}{'count':>6}{'IoU':>10}{'F':>10}",
        ]
        for row in list(self.rows) + [self.overall]:
            lines.append(
                f"{row.category:<16}{row.count:>6}{row.iou:>10.4f}{row.fscore:>10.4f}"
            )
        return "\n".join(lines)

    def csv_rows(self) -> list[str]:
        out = ["category,count,iou,fscore"]
        for row in list(self.rows) + [self.overall]:
            out.append(f"{row.category},{row.count},{row.iou:.6f},{row.fscore:.6f}")
        return out


def evaluate(
    model: E2VModel,
    dataset,
    threshold: float = 0.3,
    distance: float = 0.20,
    batch_size: int = 5,
) -> EvalReport:
    """Score (frames, occupancy, category) samples with the model in
    inference mode; means are reported per category plus a sample-weighted
    Overall row."""
    _validate_dataset(dataset)
    model.eval()
    cats = [s[2] if len(s) > 2 else "all" for s in dataset]
    per_sample = []
    for lo in range(0, len(dataset), batch_size):
        chunk = dataset[lo:lo + batch_size]
        x = frames_to_input(
            [np.asarray(getattr(s[0], "frames", s[0])) for s in chunk], dtype=model.dtype
        )
        probs = model.forward(x, remember=False)
        for j, sample in enumerate(chunk):
            r = probs.shape[-1]
            gt = voxel.VoxelGrid(r, _as_occupancy(sample[1]) > 0.5)
            pg = voxel.ProbGrid(r, probs[j])
            score_i = voxel.iou(pg, gt, threshold=threshold)
            pred_pts = voxel.voxel_to_points(voxel.binarize(pg, threshold))
            gt_pts = voxel.voxel_to_points(gt)
            score_f = voxel.fscore(pred_pts, gt_pts, distance=distance)
            per_sample.append((score_i, score_f))

    by_cat: dict[str, list[tuple[float, float]]] = {}
    for cat, scores in zip(cats, per_sample):
        by_cat.setdefault(cat, []).append(scores)
    rows = tuple(
        CategoryRow(
            cat,
            len(scores),
            float(np.mean([s[0] for s in scores])),
            float(np.mean([s[1] for s in scores])),
        )
        for cat, scores in sorted(by_cat.items())
    )
    overall = CategoryRow(
        "Overall",
        len(per_sample),
        float(np.mean([s[0] for s in per_sample])),
        float(np.mean([s[1] for s in per_sample])),
    )
    return EvalReport(rows, overall, threshold, distance)
