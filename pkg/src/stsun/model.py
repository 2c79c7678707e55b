"""Five-stage network: ISSUM -> encoder -> TUM -> decoder -> OSSUM, plus checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, LocalGlobalBlock, TransformerBlock
from .metadata import (CHANGE, EmbeddingRegistry, InputMetadata, OutputSpec, SpatialMetaEncoder,
                       ValidationError)
from .nn import LayerNorm
from .tensor import ParameterStore, Tensor, no_grad
from .unify import ISSUM, OSSUM, TUM, PatchGrid

DEFAULT_CATEGORIES = (
    CHANGE, "background", "building", "road", "water", "barren", "forest",
    "agriculture", "impervious", "wetland", "soil",
)

MAGIC = b"STSN"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    H: int = 16
    W: int = 16
    T: int = 4
    C_e: int = 32
    C_a: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    hyper_depth: int = 2
    hyper_heads: int = 4
    horizontal_window: tuple = (2, 8)
    vertical_window: tuple = (8, 2)
    square_window: tuple = (4, 4)
    stride_fraction: float = 0.5
    attention: str = "lgwa"
    unification: str = "decoupled"
    input_positional: bool = True
    categories: tuple = DEFAULT_CATEGORIES
    seed: int = 0

    def __post_init__(self):
        for name in ("horizontal_window", "vertical_window", "square_window", "categories"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("H", "W", "T", "C_e", "C_a", "heads", "mlp_ratio", "hyper_heads"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("encoder_depth", "decoder_depth", "hyper_depth"):
            if int(getattr(self, name)) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.attention not in ("lgwa", "global"):
            raise ValidationError("attention must be 'lgwa' or 'global'")
        if self.unification not in ("decoupled", "coupled"):
            raise ValidationError("unification must be 'decoupled' or 'coupled'")
        if self.d_model % self.heads:
            raise ValidationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.C_e % self.hyper_heads:
            raise ValidationError(f"C_e={self.C_e} not divisible by hyper_heads={self.hyper_heads}")
        if len(set(self.categories)) != len(self.categories):
            raise ValidationError("category names must be unique")

    @property
    def d_model(self) -> int:
        return self.C_e * self.C_a

    @property
    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.heads, self.horizontal_window, self.vertical_window,
                               self.square_window, self.stride_fraction, self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _as_batch(x) -> tuple:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 4:
        return (x.reshape((1,) + x.shape) if isinstance(x, Tensor) else Tensor(arr[None])), True
    if arr.ndim != 5:
        raise ValidationError(f"expected a (T1,C1,H1,W1) cube or a batch of them, got shape {arr.shape}")
    return (x if isinstance(x, Tensor) else Tensor(arr)), False


class _Stage:
    """Prefix validation errors with the pipeline stage that raised them."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is ValidationError and not str(exc).startswith("["):
            raise ValidationError(f"[{self.name}] {exc}") from exc
        return False


class STSUN:
    """Metadata-conditioned dense prediction network."""

    def __init__(self, cfg: ModelConfig = None):
        self.cfg = cfg = cfg or ModelConfig()
        self.store = store = ParameterStore(cfg.seed)
        self.registry = EmbeddingRegistry(store, cfg.categories, cfg.C_e)
        self.spatial_meta = SpatialMetaEncoder(store, "spatial_meta", cfg.C_e)
        self.issum = ISSUM(store, cfg, self.spatial_meta)
        self.tum = TUM(store, cfg)
        self.ossum = OSSUM(store, cfg, self.spatial_meta)
        grid = (cfg.H, cfg.W)
        self.encoder = [self._block(f"encoder.{i}", grid) for i in range(cfg.encoder_depth)]
        self.decoder = [self._block(f"decoder.{i}", grid) for i in range(cfg.decoder_depth)]
        self.out_norm = LayerNorm(store, "decoder.norm", cfg.d_model)

    def _block(self, name, grid):
        if self.cfg.attention == "lgwa":
            return LocalGlobalBlock(self.store, name, self.cfg.attention_config, grid)
        return TransformerBlock(self.store, name, self.cfg.d_model, self.cfg.heads, self.cfg.mlp_ratio)

    # ------------------------------------------------------------------
    def grid_for(self, h1: int, w1: int) -> PatchGrid:
        return PatchGrid(h1, w1, self.cfg.H, self.cfg.W)

    def check(self, shape, meta: InputMetadata, spec: OutputSpec) -> PatchGrid:
        with _Stage("input"):
            meta.check_cube(shape)
            spec.validate(shape[-4], self.registry, size=shape[-2:])
            return self.grid_for(shape[-2], shape[-1])

    def _trunk(self, blocks, f: Tensor) -> Tensor:
        b, t, length, c = f.shape
        y = f.reshape(b * t, length, c)
        for blk in blocks:
            y = blk(y)
        return y.reshape(b, t, length, c)

    def forward(self, x, meta: InputMetadata, spec: OutputSpec) -> Tensor:
        """Logits (T2, C2, H1, W1), or (B, T2, C2, H1, W1) for a batched cube."""
        if self.cfg.unification == "coupled":
            return self.forward_coupled(x, meta, spec)
        x, squeeze = _as_batch(x)
        grid = self.check(x.shape[1:], meta, spec)
        with _Stage("issum"):
            f = self.issum(x, meta, grid)
        f = self._trunk(self.encoder, f)
        with _Stage("tum"):
            f = self.tum(f, meta, spec, self.registry)
        f = self.out_norm(self._trunk(self.decoder, f))
        with _Stage("ossum"):
            y = self.ossum(f, spec, meta, grid, self.registry)
        return y.reshape(y.shape[1:]) if squeeze else y

    def forward_coupled(self, x, meta: InputMetadata, spec: OutputSpec) -> Tensor:
        """Ablation baseline: frames folded into bands on input, split from channels on output."""
        x, squeeze = _as_batch(x)
        grid = self.check(x.shape[1:], meta, spec)
        b, t1, c1, h1, w1 = x.shape
        t2, c2 = spec.out_len, spec.n_classes
        with _Stage("issum"):
            f = self.issum(x.reshape(b, 1, t1 * c1, h1, w1), meta, grid, coupled=True)
        f = self._trunk(self.encoder, f)
        f = self.out_norm(self._trunk(self.decoder, f))
        with _Stage("ossum"):
            cats = self.registry.category_tokens(spec.category_ids)              # (C2, Ce)
            steps = self.tum.out_meta(t2, spec.task, self.registry)              # (T2, Ce)
            tokens = (T.concat([cats] * t2, axis=0)
                      + T.gather_rows(steps, np.repeat(np.arange(t2), c2)))     # index t*C2 + c
            y = self.ossum(f, spec, meta, grid, self.registry, category_tokens=tokens)
        y = y.reshape(b, t2, c2, h1, w1)
        return y.reshape(y.shape[1:]) if squeeze else y

    __call__ = forward

    def predict(self, x, meta: InputMetadata, spec: OutputSpec) -> np.ndarray:
        with no_grad():
            return self.forward(x, meta, spec).data

    def parameters(self):
        return self.store.items()


def init(cfg: ModelConfig = None, seed: int = None) -> STSUN:
    cfg = cfg or ModelConfig()
    if seed is not None:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "seed": seed})
    return STSUN(cfg)


# --------------------------------------------------------------------------
# checkpoint file


class CheckpointError(OSError):
    """Checkpoint file is corrupt, truncated or of an unsupported version."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(path, model: STSUN, state: dict = None, tensors: dict = None):
    """Write config, parameters and optional training state.

    ``state`` is a JSON-serialisable dict (step count, lr, scheduler);
    ``tensors`` holds extra named arrays such as optimizer moments.
    """
    items = [(n, t.data) for n, t in model.store.items()]
    items += sorted((tensors or {}).items())
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    for blob in (canonical_json(model.cfg.to_dict()), canonical_json(state or {})):
        out += struct.pack("<Q", len(blob)) + blob
    out += struct.pack("<I", len(items))
    for name, arr in items:
        blob = _pack_tensor(name, arr)
        out += struct.pack("<Q", len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple:
    """Return (model, state, extra_tensors)."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an STSN checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        blobs = []
        for _ in range(2):
            (n,) = r.unpack("<Q")
            blobs.append(json.loads(r.take(n).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config section") from exc
    cfg_dict, state = blobs
    arrays = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (n,) = r.unpack("<Q")
        sub = _Reader(r.take(n))
        (ln,) = sub.unpack("<I")
        name = sub.take(ln).decode("utf-8")
        (ndim,) = sub.unpack("<I")
        shape = sub.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(sub.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if sub.pos != len(sub.buf):
            raise CheckpointError(f"{path}: tensor section {name!r} has trailing bytes")
        arrays[name] = data
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    try:
        model = STSUN(ModelConfig.from_dict(cfg_dict))
    except (TypeError, ValidationError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    params = {n: arrays.pop(n) for n in list(model.store) if n in arrays}
    try:
        model.store.load_state(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, state, arrays
