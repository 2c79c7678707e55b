"""Loss, augmentation, AdamW, plateau scheduling and the joint training loop."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset, crop, pad_to_divisible
from .metadata import OutputSpec, Task, ValidationError
from .metrics import ConfusionCounts, Scores, classify, scores_from_counts
from .model import STSUN
from .tensor import NonFiniteError, Tensor, no_grad

CSV_COLUMNS = ("epoch", "dataset", "task", "loss", "P", "R", "F1", "IoU", "OA", "lr")


# --------------------------------------------------------------------------
# loss


@dataclass
class LossConfig:
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.bce_weight == 0 and self.dice_weight == 0:
            raise ValidationError("bce_weight and dice_weight cannot both be zero")
        if self.dice_smooth < 0:
            raise ValidationError("dice_smooth must be >= 0")


def targets_for(labels: np.ndarray, n_channels: int) -> np.ndarray:
    """(B, T2, H, W) class indices -> (B, T2, C2, H, W) {0,1} targets.

    One channel means binary labels; otherwise a one-hot expansion.
    """
    labels = np.asarray(labels)
    n_values = 2 if n_channels == 1 else n_channels
    if labels.size and (labels.min() < 0 or labels.max() >= n_values):
        raise ValidationError(f"labels must lie in [0, {n_values - 1}] for {n_channels} output channel(s)")
    if n_channels == 1:
        return labels[..., None, :, :].astype(np.float64)
    onehot = labels[..., None, :, :] == np.arange(n_channels)[:, None, None]
    return onehot.astype(np.float64)


def loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig = None) -> tuple:
    """BCE + (1 - soft Dice) on per-channel sigmoids.

    Dice is computed per (sample, frame, channel) and averaged.
    Returns (scalar tensor, {"bce": float, "dice": float}).
    """
    cfg = cfg or LossConfig()
    y = targets_for(labels, logits.shape[-3])
    if y.shape != logits.shape:
        raise ValidationError(f"logits {logits.shape} do not match expanded labels {y.shape}")
    total = None
    terms = {}
    if cfg.bce_weight:
        bce = T.mean(T.bce_with_logits(logits, y))
        terms["bce"] = bce.item()
        total = bce * cfg.bce_weight
    if cfg.dice_weight:
        p = T.sigmoid(logits)
        axes = (-2, -1)
        inter = T.sum_(p * y, axes)
        denom = T.sum_(p, axes) + (y.sum(axis=axes) + cfg.dice_smooth)
        dice = T.mean((inter * 2.0 + cfg.dice_smooth) / denom)
        terms["dice"] = dice.item()
        d = (1.0 - dice) * cfg.dice_weight
        total = d if total is None else total + d
    return total, terms


# --------------------------------------------------------------------------
# augmentation


def augment(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, p_flip: float = 0.5,
            p_transpose: float = 0.5) -> tuple:
    """Random h/v flips and transposition, applied identically to every frame.

    ``images`` is (..., H, W) and ``labels`` is (..., H, W). Three uniforms are
    drawn per call regardless of outcome so the stream depends only on the seed.
    """
    h, w = images.shape[-2:]
    if labels.shape[-2:] != (h, w):
        raise ValidationError("image and label extents differ")
    if p_transpose > 0 and h != w:
        raise ValidationError(f"transposition needs a square sample, got {h}x{w}")
    u = rng.random(3)
    if u[0] < p_flip:
        images, labels = images[..., ::-1], labels[..., ::-1]
    if u[1] < p_flip:
        images, labels = images[..., ::-1, :], labels[..., ::-1, :]
    if u[2] < p_transpose:
        images, labels = np.swapaxes(images, -1, -2), np.swapaxes(labels, -1, -2)
    return np.ascontiguousarray(images), np.ascontiguousarray(labels)


# --------------------------------------------------------------------------
# optimisation


class AdamW:
    """Adam with decoupled weight decay; parameters without a gradient are skipped."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.steps = {n: 0 for n, _ in self.params}

    def step(self):
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            t = self.steps[name] = self.steps[name] + 1
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state(self) -> tuple:
        """(json-able dict, arrays) for checkpoints."""
        arrays = {f"adamw.m.{n}": a for n, a in self.m.items()}
        arrays.update({f"adamw.v.{n}": a for n, a in self.v.items()})
        return {"lr": self.lr, "steps": dict(self.steps)}, arrays

    def load_state(self, state: dict, arrays: dict):
        self.lr = state["lr"]
        self.steps = {n: int(state["steps"][n]) for n, _ in self.params}
        for n, _ in self.params:
            self.m[n] = np.array(arrays[f"adamw.m.{n}"])
            self.v[n] = np.array(arrays[f"adamw.v.{n}"])


class ReduceLROnPlateau:
    """Multiply lr by ``factor`` once ``patience`` epochs in a row bring no improvement."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None, "stale": self.stale}


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainPlan:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    factor: float = 0.1
    patience: int = 5
    max_epochs: int = 100
    max_steps: int = None
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    target_f1: float = None     # stop once mean validation F1 reaches this
    loss: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lr", "factor", "max_epochs", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"train.{name} must be > 0")
        if self.weight_decay < 0:
            raise ValidationError("train.weight_decay must be >= 0")
        if self.patience < 1:
            raise ValidationError("train.patience must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValidationError("train.max_steps must be >= 1")
        self.loss_config = LossConfig(**self.loss)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown train plan keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainSet:
    """One dataset in a joint run: training split, optional validation split, category names."""

    name: str
    train: Dataset
    val: Dataset = None
    categories: list = None

    def __post_init__(self):
        if self.categories is None:
            self.categories = list(self.train.manifest.categories)
        if len(self.train) == 0:
            raise ValidationError(f"dataset {self.name!r} has no training samples")

    @property
    def task(self) -> Task:
        return Task.parse(self.train.manifest.task)


def output_spec(model: STSUN, ds: Dataset, categories=None) -> OutputSpec:
    m = ds.manifest
    names = list(categories) if categories is not None else m.categories
    ids = [model.registry.category_id(n) for n in names]
    return OutputSpec(m.task, m.T2, ids, (m.H1, m.W1))


def remap_labels(labels: np.ndarray, dataset_categories, categories) -> np.ndarray:
    """Relabel multi-class indices from the dataset's category order to ``categories``."""
    if list(categories) == list(dataset_categories):
        return labels
    if sorted(categories) != sorted(dataset_categories):
        raise ValidationError("category override must be a permutation of the dataset's categories")
    lut = np.array([list(categories).index(c) for c in dataset_categories], dtype=np.uint8)
    return lut[labels]


def predict_dataset(model: STSUN, ds: Dataset, categories=None, batch_size: int = 16) -> np.ndarray:
    """Class maps (N, T2, H1, W1); inputs not divisible by the grid are reflect-padded and cropped back."""
    cats = list(categories) if categories is not None else ds.manifest.categories
    m = ds.manifest
    meta = m.meta()
    out = np.empty((len(ds), m.T2, m.H1, m.W1), dtype=np.int64)
    for lo in range(0, len(ds), batch_size):
        x = ds.images[lo:lo + batch_size]
        x, _, box = pad_to_divisible(x, x[:, :1, 0], model.cfg.H, model.cfg.W)
        spec = output_spec(model, ds, cats)
        spec.out_size = tuple(x.shape[-2:])
        with no_grad():
            logits = model.forward(x, meta, spec).data
        out[lo:lo + batch_size] = crop(classify(logits), box)
    return out


def evaluate(model: STSUN, ds: Dataset, categories=None, batch_size: int = 16) -> Scores:
    """Scores of the model on a dataset; ``categories`` reorders the output subset."""
    cats = list(categories) if categories is not None else ds.manifest.categories
    binary = len(cats) == 1
    labels = ds.labels if binary else remap_labels(ds.labels, ds.manifest.categories, cats)
    pred = predict_dataset(model, ds, cats, batch_size)
    counts = ConfusionCounts.from_maps(pred, labels, 2 if binary else len(cats))
    return scores_from_counts(counts, [1] if binary else None)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


@dataclass
class TrainResult:
    rows: list
    best_state: dict
    best_f1: float
    best_epoch: int
    steps: int
    optimizer: AdamW
    scheduler: ReduceLROnPlateau
    seconds: float

    def csv(self) -> str:
        return metrics_csv(self.rows)


def _batches(n: int, size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train(model: STSUN, sets: list, plan: TrainPlan = None, log=None) -> TrainResult:
    """Joint training with round-robin interleaving of per-dataset batches.

    After each epoch every dataset's validation split (training split when
    absent) is scored; the parameters with the best mean F1 are kept.
    """
    plan = plan or TrainPlan()
    if not sets:
        raise ValidationError("train needs at least one dataset")
    names = [s.name for s in sets]
    if len(set(names)) != len(names):
        raise ValidationError("dataset names in a joint run must be unique")
    prepared = []
    for s in sets:
        s.train.validate()
        if s.val is not None:
            s.val.validate()
        spec = output_spec(model, s.train, s.categories)
        spec.validate(s.train.manifest.T1, model.registry, (s.train.manifest.H1, s.train.manifest.W1))
        labels = s.train.labels
        if spec.n_classes > 1:
            labels = remap_labels(labels, s.train.manifest.categories, s.categories)
        prepared.append((s, spec, s.train.manifest.meta(), labels))

    rng = np.random.default_rng(plan.seed)
    params = list(model.parameters())
    opt = AdamW(params, plan.lr, plan.weight_decay)
    sched = ReduceLROnPlateau(plan.lr, plan.factor, plan.patience)
    rows, best_state, best_f1, best_epoch = [], model.store.state(), -1.0, 0
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, plan.max_epochs + 1):
        queues = [_batches(len(s.train), plan.batch_size, rng) for s, *_ in prepared]
        losses = [[] for _ in prepared]
        done = False
        for k in range(max(len(q) for q in queues)):
            for i, (s, spec, meta, labels) in enumerate(prepared):
                if k >= len(queues[i]):
                    continue
                idx = queues[i][k]
                x, y = s.train.images[idx], labels[idx]
                if plan.augment:
                    pairs = [augment(xi, yi, rng) for xi, yi in zip(x, y)]
                    x = np.stack([p[0] for p in pairs])
                    y = np.stack([p[1] for p in pairs])
                opt.zero_grad()
                try:
                    value, _ = loss(model.forward(x, meta, spec), y, plan.loss_config)
                    value.backward()
                except NonFiniteError as exc:
                    raise NonFiniteError(
                        f"non-finite value at step {step + 1} (epoch {epoch}, dataset {s.name!r}): {exc}") from exc
                opt.step()
                step += 1
                losses[i].append(value.item())
                if plan.max_steps is not None and step >= plan.max_steps:
                    done = True
                    break
            if done:
                break

        f1s = []
        for i, (s, spec, meta, _) in enumerate(prepared):
            try:
                sc = evaluate(model, s.val if s.val is not None else s.train, s.categories, plan.batch_size)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"non-finite value evaluating after step {step} (epoch {epoch}, dataset {s.name!r}): {exc}"
                ) from exc
            f1s.append(sc.F1)
            mean_loss = float(np.mean(losses[i])) if losses[i] else float("nan")
            rows.append({"epoch": epoch, "dataset": s.name, "task": s.task.value, "loss": mean_loss,
                         "P": sc.P, "R": sc.R, "F1": sc.F1, "IoU": sc.IoU, "OA": sc.OA, "lr": opt.lr})
        mean_f1 = float(np.mean(f1s))
        if mean_f1 > best_f1:
            best_f1, best_epoch, best_state = mean_f1, epoch, model.store.state()
        if log is not None:
            log(f"epoch {epoch} step {step} mean_f1 {mean_f1:.4f} lr {opt.lr:.2e} "
                f"t {time.perf_counter() - t0:.1f}s")
        opt.lr = sched.step(mean_f1)
        if done or (plan.target_f1 is not None and mean_f1 >= plan.target_f1):
            break
    return TrainResult(rows, best_state, best_f1, best_epoch, step, opt, sched, time.perf_counter() - t0)
