"""Input/output metadata carriers, embedding registries and metadata tokenizers."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import sinusoidal_encoding
from .tensor import ParameterStore, Tensor


class ValidationError(ValueError):
    """Inputs violate a documented contract."""


class Task(str, enum.Enum):
    SS = "SS"
    BCD = "BCD"
    SCD = "SCD"

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValidationError(f"unknown task {value!r}; expected one of SS, BCD, SCD") from None


def output_length(task: Task, t_in: int) -> int:
    """Number of output frames a task produces from ``t_in`` input frames."""
    task = Task.parse(task)
    if task is Task.SS:
        if t_in != 1:
            raise ValidationError(f"SS needs a single input frame, got T1={t_in}")
        return 1
    if task is Task.BCD:
        if t_in < 2:
            raise ValidationError(f"BCD needs at least two input frames, got T1={t_in}")
        return t_in - 1
    return t_in


CHANGE = "change"


@dataclass
class InputMetadata:
    wavelengths_nm: list
    timestamps: list
    resolution_m: float

    def __post_init__(self):
        self.wavelengths_nm = [float(w) for w in self.wavelengths_nm]
        self.timestamps = [float(t) for t in self.timestamps]
        self.resolution_m = float(self.resolution_m)
        if not self.wavelengths_nm or not self.timestamps:
            raise ValidationError("wavelengths and timestamps must be non-empty")
        if any(not math.isfinite(w) or w <= 0 for w in self.wavelengths_nm):
            raise ValidationError("wavelengths must be finite and strictly positive")
        if any(not math.isfinite(t) for t in self.timestamps):
            raise ValidationError("timestamps must be finite")
        if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValidationError("timestamps must be non-decreasing")
        if not (math.isfinite(self.resolution_m) and self.resolution_m > 0):
            raise ValidationError("resolution_m must be > 0")

    @property
    def n_bands(self) -> int:
        return len(self.wavelengths_nm)

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)

    def check_cube(self, shape: Sequence[int]):
        t1, c1 = shape[-4], shape[-3]
        if t1 != self.n_frames:
            raise ValidationError(f"data has T1={t1} frames but metadata lists {self.n_frames} timestamps")
        if c1 != self.n_bands:
            raise ValidationError(f"data has C1={c1} bands but metadata lists {self.n_bands} wavelengths")

    def normalized_wavelengths(self) -> np.ndarray:
        return np.asarray(self.wavelengths_nm) / 1000.0

    def normalized_timestamps(self) -> np.ndarray:
        ts = np.asarray(self.timestamps)
        span = ts[-1] - ts[0]
        return (ts - ts[0]) / span if span > 0 else np.zeros_like(ts)

    def normalized_resolution(self) -> float:
        return math.log10(self.resolution_m)


@dataclass
class OutputSpec:
    task: Task
    out_len: int
    category_ids: list
    out_size: tuple = None

    def __post_init__(self):
        self.task = Task.parse(self.task)
        self.out_len = int(self.out_len)
        self.category_ids = [int(c) for c in self.category_ids]
        if self.out_size is not None:
            self.out_size = tuple(int(s) for s in self.out_size)
        if self.out_len < 1:
            raise ValidationError("out_len must be >= 1")
        if not self.category_ids:
            raise ValidationError("category_ids must be non-empty")
        if len(set(self.category_ids)) != len(self.category_ids):
            raise ValidationError(f"category_ids must be unique, got {self.category_ids}")

    @property
    def n_classes(self) -> int:
        return len(self.category_ids)

    def validate(self, t_in: int, registry: "EmbeddingRegistry" = None, size: tuple = None):
        expected = output_length(self.task, t_in)
        if self.out_len != expected:
            raise ValidationError(
                f"task {self.task.value} with T1={t_in} requires T2={expected}, got {self.out_len}")
        if registry is not None:
            for cid in self.category_ids:
                registry.check_category(cid)
            if self.task is Task.BCD:
                change = registry.category_id(CHANGE)
                if self.category_ids != [change]:
                    raise ValidationError("BCD output must use exactly the 'change' category")
        if size is not None and self.out_size is not None and tuple(size) != self.out_size:
            raise ValidationError(f"out_size {self.out_size} must equal the input size {tuple(size)}")


@dataclass
class DataCube:
    """T1 x C1 x H1 x W1 values plus the metadata that describes them."""

    values: np.ndarray
    meta: InputMetadata

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise ValidationError("DataCube values must be T x C x H x W")
        self.meta.check_cube(self.values.shape)


class EmbeddingRegistry:
    """Trainable task and category embeddings (vectors of width C_e)."""

    def __init__(self, store: ParameterStore, categories: Sequence[str], dim: int):
        if len(set(categories)) != len(categories):
            raise ValidationError("category names must be unique")
        self.categories = list(categories)
        self.dim = dim
        self.tasks = {t: store.normal(f"registry.task.{t.value}", (dim,)) for t in Task}
        self.category_table = store.normal("registry.categories", (len(self.categories), dim))

    def task_embedding(self, task) -> Tensor:
        task = Task.parse(task)
        return self.tasks[task]

    def check_category(self, cid: int):
        if not 0 <= cid < len(self.categories):
            raise ValidationError(f"unknown category id {cid} (registry has {len(self.categories)})")

    def category_id(self, name: str) -> int:
        try:
            return self.categories.index(name)
        except ValueError:
            raise ValidationError(f"category {name!r} not in registry {self.categories}") from None

    def category_tokens(self, ids: Sequence[int]) -> Tensor:
        for cid in ids:
            self.check_category(cid)
        rows = T.gather_rows(self.category_table, np.asarray(ids))
        return rows


@dataclass
class PositionalEncoding:
    dim: int
    max_len: int = 4096
    kind: str = "sinusoidal"
    _table: np.ndarray = field(default=None, repr=False)

    def __call__(self, n: int) -> np.ndarray:
        if n > self.max_len:
            raise ValidationError(f"sequence of {n} exceeds positional table length {self.max_len}")
        if self._table is None or self._table.shape[0] < n:
            self._table = sinusoidal_encoding(max(n, 64), self.dim)
        return self._table[:n]


class ScalarTokenizer:
    """Trainable affine 1 -> C_e map applied to each scalar independently."""

    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.weight = store.normal(f"{name}.weight", (1, dim))
        self.bias = store.zeros(f"{name}.bias", (dim,))

    def __call__(self, values) -> Tensor:
        vals = np.asarray(values, dtype=np.float64).reshape(-1, 1)
        if vals.size == 0:
            raise ValidationError("cannot tokenize an empty list")
        if not np.isfinite(vals).all():
            raise ValidationError("metadata values must be finite")
        return T.matmul(Tensor(vals), self.weight) + self.bias


def tokenize_scalars(values, projector: ScalarTokenizer) -> Tensor:
    return projector(values)


def within_patch_positions(ph: int, pw: int) -> tuple:
    """Row/col coordinates of each within-patch pixel, normalised to [0, 1]."""
    rows = np.repeat(np.arange(ph), pw).astype(np.float64)
    cols = np.tile(np.arange(pw), ph).astype(np.float64)
    if ph > 1:
        rows /= ph - 1
    if pw > 1:
        cols /= pw - 1
    return rows, cols


class SpatialMetaEncoder:
    """Position-row, position-col and resolution tokenizers, summed."""

    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.row = ScalarTokenizer(store, f"{name}.row", dim)
        self.col = ScalarTokenizer(store, f"{name}.col", dim)
        self.res = ScalarTokenizer(store, f"{name}.res", dim)

    def __call__(self, ph: int, pw: int, resolution_m: float) -> Tensor:
        if ph < 1 or pw < 1:
            raise ValidationError("patch grid extents must be >= 1")
        rows, cols = within_patch_positions(ph, pw)
        res = self.res([math.log10(resolution_m)])
        return self.row(rows) + self.col(cols) + res


def encode_spatial_meta(encoder: SpatialMetaEncoder, ph: int, pw: int, resolution_m: float) -> Tensor:
    return encoder(ph, pw, resolution_m)


class OutputTemporalEncoder:
    """Tokens t/T2 for t = 0..T2-1, each plus the selected task embedding."""

    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.step = ScalarTokenizer(store, f"{name}.step", dim)

    def __call__(self, out_len: int, task, registry: EmbeddingRegistry) -> Tensor:
        if out_len < 1:
            raise ValidationError("out_len must be >= 1")
        emb = registry.task_embedding(task)
        return self.step(np.arange(out_len) / out_len) + emb


def encode_output_temporal_meta(encoder: OutputTemporalEncoder, out_len: int, task,
                                registry: EmbeddingRegistry) -> Tensor:
    return encoder(out_len, task, registry)
