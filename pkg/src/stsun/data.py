"""On-disk dataset format, validation, padding and the synthetic generator.

Layout of a dataset directory::

    DIR/<split>/meta.json     manifest (canonical key order)
    DIR/<split>/images.f32    N x T1 x C1 x H1 x W1 little-endian float32, row-major
    DIR/<split>/labels.u8     N x T2 x H1 x W1 class indices

Labels of single-channel outputs (BCD, or SS/SCD with one category) are
{0, 1}; otherwise they index the manifest's category list.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .metadata import CHANGE, InputMetadata, Task, ValidationError, output_length

FORMAT_TAG = "stsun-dataset/1"
SPLITS = ("train", "val", "test")


class DatasetFormatError(OSError):
    """Files on disk are missing, truncated or not in the dataset format."""


@dataclass
class DatasetManifest:
    name: str
    task: str
    T1: int
    T2: int
    C1: int
    categories: list
    H1: int
    W1: int
    resolution_m: float
    wavelengths_nm: list
    timestamps: list
    split: str = "train"
    n: int = 0

    def __post_init__(self):
        self.task = Task.parse(self.task).value
        self.categories = list(self.categories)
        self.wavelengths_nm = [float(w) for w in self.wavelengths_nm]
        self.timestamps = [float(t) for t in self.timestamps]

    @property
    def n_classes(self) -> int:
        return len(self.categories)

    @property
    def binary(self) -> bool:
        return self.n_classes == 1

    @property
    def label_classes(self) -> int:
        """Number of distinct label values."""
        return 2 if self.binary else self.n_classes

    def meta(self) -> InputMetadata:
        return InputMetadata(self.wavelengths_nm, self.timestamps, self.resolution_m)

    def validate(self):
        def bad(fld, msg):
            raise ValidationError(f"manifest field {fld!r}: {msg}")

        for fld in ("T1", "T2", "C1", "H1", "W1"):
            if int(getattr(self, fld)) < 1:
                bad(fld, "must be >= 1")
        if self.n < 0:
            bad("n", "must be >= 0")
        try:
            t2 = output_length(self.task, self.T1)
        except ValidationError as exc:
            bad("T1", str(exc))
        if self.T2 != t2:
            bad("T2", f"task {self.task} with T1={self.T1} requires T2={t2}, got {self.T2}")
        if len(self.wavelengths_nm) != self.C1:
            bad("wavelengths_nm", f"has {len(self.wavelengths_nm)} entries, C1={self.C1}")
        if len(self.timestamps) != self.T1:
            bad("timestamps", f"has {len(self.timestamps)} entries, T1={self.T1}")
        if not self.categories or len(set(self.categories)) != len(self.categories):
            bad("categories", "must be a non-empty list of unique names")
        if self.task == Task.BCD.value and self.categories != [CHANGE]:
            bad("categories", f"BCD datasets must declare exactly [{CHANGE!r}]")
        try:
            self.meta()
        except ValidationError as exc:
            bad("metadata", str(exc))

    def to_json(self) -> bytes:
        d = {"format": FORMAT_TAG, **asdict(self)}
        return json.dumps(d, sort_keys=True, indent=1).encode("utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        if d.pop("format", None) != FORMAT_TAG:
            raise DatasetFormatError(f"manifest is not tagged {FORMAT_TAG!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown manifest keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"incomplete manifest: {exc}") from exc


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray      # (N, T1, C1, H1, W1) float64 holding float32-representable values
    labels: np.ndarray      # (N, T2, H1, W1) uint8

    def __len__(self) -> int:
        return self.images.shape[0]

    def validate(self):
        m = self.manifest
        m.validate()
        img_shape = (m.n, m.T1, m.C1, m.H1, m.W1)
        lab_shape = (m.n, m.T2, m.H1, m.W1)
        names = ("N", "T1", "C1", "H1", "W1")
        if self.images.shape != img_shape:
            diff = [n for n, a, b in zip(names, self.images.shape, img_shape) if a != b]
            raise ValidationError(f"images shape {self.images.shape} disagrees with manifest on {diff}")
        if self.labels.shape != lab_shape:
            diff = [n for n, a, b in zip(("N", "T2", "H1", "W1"), self.labels.shape, lab_shape) if a != b]
            raise ValidationError(f"labels shape {self.labels.shape} disagrees with manifest on {diff}")
        if self.labels.size and int(self.labels.max()) >= m.label_classes:
            raise ValidationError(
                f"labels contain class index {int(self.labels.max())} >= {m.label_classes}")
        if not np.isfinite(self.images).all():
            raise ValidationError("images contain non-finite values")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        man = DatasetManifest(**{**asdict(self.manifest), "n": int(idx.size)})
        return Dataset(man, self.images[idx], self.labels[idx])


def write_split(path, ds: Dataset):
    ds.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_bytes(ds.manifest.to_json())
    (path / "images.f32").write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    (path / "labels.u8").write_bytes(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())


def read_split(path) -> Dataset:
    path = Path(path)
    try:
        raw = json.loads((path / "meta.json").read_bytes())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}/meta.json is not valid JSON") from exc
    m = DatasetManifest.from_dict(raw)
    m.validate()
    n_img = m.n * m.T1 * m.C1 * m.H1 * m.W1
    n_lab = m.n * m.T2 * m.H1 * m.W1
    try:
        img_bytes = (path / "images.f32").read_bytes()
        lab_bytes = (path / "labels.u8").read_bytes()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: {exc.filename} missing") from exc
    if len(img_bytes) != 4 * n_img:
        kind = "truncated" if len(img_bytes) < 4 * n_img else "oversized"
        raise DatasetFormatError(f"{path}/images.f32 is {kind}: {len(img_bytes)} bytes, expected {4 * n_img}")
    if len(lab_bytes) != n_lab:
        kind = "truncated" if len(lab_bytes) < n_lab else "oversized"
        raise DatasetFormatError(f"{path}/labels.u8 is {kind}: {len(lab_bytes)} bytes, expected {n_lab}")
    images = np.frombuffer(img_bytes, dtype="<f4").astype(np.float64).reshape(m.n, m.T1, m.C1, m.H1, m.W1)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8).reshape(m.n, m.T2, m.H1, m.W1).copy()
    ds = Dataset(m, images, labels)
    ds.validate()
    return ds


def write_dataset(path, splits: dict):
    for name, ds in splits.items():
        if ds.manifest.split != name:
            raise ValidationError(f"split {name!r} holds a manifest for split {ds.manifest.split!r}")
        write_split(Path(path) / name, ds)


def read_dataset(path) -> dict:
    path = Path(path)
    found = {s: read_split(path / s) for s in SPLITS if (path / s / "meta.json").exists()}
    if not found:
        raise DatasetFormatError(f"{path}: no splits found (expected one of {SPLITS})")
    return found


# --------------------------------------------------------------------------
# padding


def pad_to_divisible(images: np.ndarray, labels: np.ndarray, H: int, W: int) -> tuple:
    """Reflect-pad the last two axes up to multiples of (H, W).

    Returns (images, labels, crop_box) with crop_box = (top, left, h, w) of the
    original extent inside the padded arrays.
    """
    h, w = images.shape[-2:]
    ph = (-h) % H
    pw = (-w) % W
    box = (0, 0, h, w)
    if ph == 0 and pw == 0:
        return images, labels, box
    if ph >= h or pw >= w:
        mode = "symmetric"   # reflect cannot pad by more than extent - 1
    else:
        mode = "reflect"
    pad_i = [(0, 0)] * (images.ndim - 2) + [(0, ph), (0, pw)]
    pad_l = [(0, 0)] * (labels.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(images, pad_i, mode=mode), np.pad(labels, pad_l, mode=mode), box


def crop(arr: np.ndarray, box: tuple) -> np.ndarray:
    top, left, h, w = box
    return arr[..., top:top + h, left:left + w]


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    name: str = "synthetic"
    seed: int = 0
    task: str = "SS"
    T1: int = 1
    H1: int = 32
    W1: int = 32
    wavelengths_nm: list = field(default_factory=lambda: [450.0, 550.0, 650.0])
    timestamps: list = None
    resolution_m: float = 0.5
    categories: list = field(default_factory=lambda: ["background", "building", "water"])
    land_cover: list = None
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    objects: tuple = (2, 5)
    object_size: tuple = (5, 12)
    change_rate: float = 0.5
    noise: float = 0.02
    field_amplitude: float = 0.05

    def __post_init__(self):
        self.task = Task.parse(self.task).value
        if self.timestamps is None:
            self.timestamps = [365.0 * t for t in range(self.T1)]
        self.objects = tuple(self.objects)
        self.object_size = tuple(self.object_size)
        if self.land_cover is None:
            if self.task == Task.BCD.value:
                self.land_cover = ["background", "building"]
            elif len(self.categories) == 1:
                self.land_cover = ["background", self.categories[0]]
            else:
                self.land_cover = list(self.categories)
        self.validate()

    def validate(self):
        if not 0.0 <= self.change_rate <= 1.0:
            raise ValidationError("change_rate must lie in [0, 1]")
        if self.noise < 0 or self.field_amplitude < 0:
            raise ValidationError("noise and field_amplitude must be >= 0")
        if len(self.land_cover) < 2:
            raise ValidationError("land_cover needs a background plus at least one object class")
        if self.task != Task.BCD.value and len(self.categories) > 1 and set(self.categories) != set(self.land_cover):
            raise ValidationError("multi-class categories must equal the land-cover set")
        if min(self.objects) < 0 or self.objects[0] > self.objects[1]:
            raise ValidationError("objects must be a (min, max) count range")
        if min(self.object_size) < 1 or self.object_size[0] > self.object_size[1]:
            raise ValidationError("object_size must be a (min, max) extent range")
        if self.task == Task.BCD.value and self.categories != [CHANGE]:
            raise ValidationError(f"BCD output categories must be [{CHANGE!r}]")

    @property
    def T2(self) -> int:
        return output_length(self.task, self.T1)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def spectral_signature(category: str, wavelengths_nm) -> np.ndarray:
    """Deterministic reflectance curve of a land-cover class, sampled at the given bands."""
    rng = np.random.default_rng(zlib.crc32(category.encode()))
    level = rng.uniform(0.15, 0.85)
    slope = rng.uniform(-0.6, 0.6)
    bump = rng.uniform(-0.3, 0.3)
    centre = rng.uniform(450.0, 900.0)
    lam = np.asarray(wavelengths_nm, dtype=np.float64)
    return level + slope * (lam / 1000.0 - 0.6) + bump * np.exp(-(((lam - centre) / 120.0) ** 2))


def _smooth_field(rng, h, w, cells=4) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _plant_objects(rng, spec: SyntheticSpec) -> list:
    """Disjoint rectangles/ellipses as boolean footprints with a class index."""
    h, w = spec.H1, spec.W1
    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    occupied = np.zeros((h, w), dtype=bool)
    objs = []
    for _ in range(n_obj):
        for _attempt in range(20):
            oh = int(rng.integers(spec.object_size[0], min(spec.object_size[1], h) + 1))
            ow = int(rng.integers(spec.object_size[0], min(spec.object_size[1], w) + 1))
            top = int(rng.integers(0, h - oh + 1))
            left = int(rng.integers(0, w - ow + 1))
            mask = np.zeros((h, w), dtype=bool)
            if rng.random() < 0.5:
                mask[top:top + oh, left:left + ow] = True
            else:
                yy, xx = np.mgrid[0:h, 0:w]
                cy, cx = top + (oh - 1) / 2, left + (ow - 1) / 2
                mask = ((yy - cy) / (oh / 2)) ** 2 + ((xx - cx) / (ow / 2)) ** 2 <= 1.0
            if mask.any() and not (mask & occupied).any():
                occupied |= mask
                cls = int(rng.integers(1, len(spec.land_cover)))
                objs.append([mask, cls])
                break
    return objs


def synth_frame_maps(rng, spec: SyntheticSpec) -> np.ndarray:
    """(T1, H1, W1) land-cover index maps; each object may be rewritten per frame."""
    objs = _plant_objects(rng, spec)
    n_lc = len(spec.land_cover)
    maps = np.zeros((spec.T1, spec.H1, spec.W1), dtype=np.int64)
    for t in range(spec.T1):
        if t > 0:
            for obj in objs:
                if rng.random() < spec.change_rate:
                    choices = [c for c in range(n_lc) if c != obj[1]]
                    obj[1] = int(rng.choice(choices))
        for mask, cls in objs:
            maps[t][mask] = cls
    return maps


def labels_from_maps(maps: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Task labels (T2, H1, W1) from land-cover maps (T1, H1, W1)."""
    if spec.task == Task.BCD.value:
        return (maps[1:] != maps[:-1]).astype(np.uint8)
    if len(spec.categories) == 1:
        target = spec.land_cover.index(spec.categories[0])
        return (maps == target).astype(np.uint8)
    lut = np.array([spec.categories.index(n) for n in spec.land_cover])
    return lut[maps].astype(np.uint8)


def _synth_split(spec: SyntheticSpec, split: str, n: int) -> Dataset:
    rng = np.random.default_rng([spec.seed, zlib.crc32(split.encode())])
    sigs = np.stack([spectral_signature(c, spec.wavelengths_nm) for c in spec.land_cover])  # (K, C1)
    c1 = len(spec.wavelengths_nm)
    images = np.empty((n, spec.T1, c1, spec.H1, spec.W1))
    labels = np.empty((n, spec.T2, spec.H1, spec.W1), dtype=np.uint8)
    for i in range(n):
        maps = synth_frame_maps(rng, spec)
        background = spec.field_amplitude * np.stack([_smooth_field(rng, spec.H1, spec.W1) for _ in range(c1)])
        for t in range(spec.T1):
            frame = sigs[maps[t]].transpose(2, 0, 1) + background
            frame = frame + spec.noise * rng.standard_normal(frame.shape)
            images[i, t] = frame
        labels[i] = labels_from_maps(maps, spec)
    images = images.astype(np.float32).astype(np.float64)
    man = DatasetManifest(spec.name, spec.task, spec.T1, spec.T2, c1, list(spec.categories), spec.H1, spec.W1,
                          spec.resolution_m, list(spec.wavelengths_nm), list(spec.timestamps), split, n)
    ds = Dataset(man, images, labels)
    ds.validate()
    return ds


def generate_synthetic(spec: SyntheticSpec) -> dict:
    """Train/val/test splits (empty splits omitted)."""
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    return {s: _synth_split(spec, s, n) for s, n in sizes.items() if n > 0}
