"""Spatial/spectral/temporal unification around generated linear maps.

Layout conventions (batch axis B leading everywhere):

* raw cube: (B, T1, C1, H1, W1)
* unified feature: (B, T, L, C) with L = H*W tokens and C = C_e*C_a channels,
  channel index ``e*C_a + a``
* logits: (B, T2, C2, H1, W1)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hypernet import GeneratedLinear, HyperBranch, apply
from .metadata import (EmbeddingRegistry, InputMetadata, OutputSpec, OutputTemporalEncoder,
                       ScalarTokenizer, SpatialMetaEncoder, ValidationError)
from .tensor import ParameterStore, Tensor


@dataclass(frozen=True)
class PatchGrid:
    H1: int
    W1: int
    H: int
    W: int

    def __post_init__(self):
        if min(self.H1, self.W1, self.H, self.W) < 1:
            raise ValidationError("grid extents must be >= 1")
        if self.H1 % self.H or self.W1 % self.W:
            raise ValidationError(
                f"input {self.H1}x{self.W1} is not divisible by the unified grid {self.H}x{self.W}")

    @property
    def Ph(self) -> int:
        return self.H1 // self.H

    @property
    def Pw(self) -> int:
        return self.W1 // self.W


def patchify(x: Tensor, grid: PatchGrid) -> Tensor:
    """(..., H1*W1, E) -> (..., H*W*E, Ph*Pw); pure index remap.

    Pixel (r, c) goes to patch (r // Ph, c // Pw) at within-patch index
    (r % Ph) * Pw + (c % Pw).
    """
    lead, e = x.shape[:-2], x.shape[-1]
    if x.shape[-2] != grid.H1 * grid.W1:
        raise ValidationError(f"expected {grid.H1 * grid.W1} pixels, got {x.shape[-2]}")
    nl = len(lead)
    y = x.reshape(lead + (grid.H, grid.Ph, grid.W, grid.Pw, e))
    y = y.permute(tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3))
    return y.reshape(lead + (grid.H * grid.W * e, grid.Ph * grid.Pw))


def unpatchify(x: Tensor, grid: PatchGrid) -> Tensor:
    """Exact inverse of :func:`patchify`: (..., H*W*E, Ph*Pw) -> (..., H1*W1, E)."""
    lead = x.shape[:-2]
    rows, p = x.shape[-2], x.shape[-1]
    if p != grid.Ph * grid.Pw or rows % (grid.H * grid.W):
        raise ValidationError(f"tensor {x.shape} does not match patch grid {grid}")
    e = rows // (grid.H * grid.W)
    nl = len(lead)
    y = x.reshape(lead + (grid.H, grid.W, e, grid.Ph, grid.Pw))
    y = y.permute(tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2))
    return y.reshape(lead + (grid.H1 * grid.W1, e))


class ISSUM:
    """Input spatial-spectral unification: (B,T1,C1,H1,W1) -> (B,T1,L,C)."""

    def __init__(self, store: ParameterStore, cfg, spatial_meta: SpatialMetaEncoder):
        ce, ca = cfg.C_e, cfg.C_a
        hyper = dict(depth=cfg.hyper_depth, heads=cfg.hyper_heads)
        self.cfg = cfg
        self.wavelength_tok = ScalarTokenizer(store, "issum.spectral.wavelength", ce)
        self.spectral = HyperBranch(store, "issum.spectral.hyper", ce, ce, use_cls=True,
                                    use_positional=cfg.input_positional, **hyper)
        self.spatial_meta = spatial_meta
        self.spatial = HyperBranch(store, "issum.spatial.hyper", ce, ca, use_cls=True,
                                   use_positional=cfg.input_positional, **hyper)
        # only used by the coupled ablation, where frames become extra bands
        self.coupled_time_tok = ScalarTokenizer(store, "issum.spectral.coupled_time", ce)

    def spectral_tokens(self, meta: InputMetadata, coupled: bool = False) -> Tensor:
        wl = self.wavelength_tok(meta.normalized_wavelengths())
        if not coupled:
            return wl
        t1, c1 = meta.n_frames, meta.n_bands
        tt = self.coupled_time_tok(meta.normalized_timestamps())
        # band index t*C1 + c  <->  wavelength c at frame t
        wl_rep = T.concat([wl] * t1, axis=0)
        tt_rep = T.gather_rows(tt, np.repeat(np.arange(t1), c1))
        return wl_rep + tt_rep

    def maps(self, meta: InputMetadata, grid: PatchGrid, coupled: bool = False) -> tuple:
        spectral = self.spectral.generate(self.spectral_tokens(meta, coupled))
        spatial = self.spatial.generate(self.spatial_meta(grid.Ph, grid.Pw, meta.resolution_m))
        return spectral, spatial

    def __call__(self, x: Tensor, meta: InputMetadata, grid: PatchGrid, coupled: bool = False) -> Tensor:
        b, t1, c1, h1, w1 = x.shape
        spectral, spatial = self.maps(meta, grid, coupled)
        if spectral.n_in != c1:
            raise ValidationError(f"cube has {c1} bands, metadata describes {spectral.n_in}")
        y = x.permute(0, 1, 3, 4, 2).reshape(b * t1, h1 * w1, c1)
        y = apply(spectral, y)                       # (N, H1W1, Ce)
        y = apply(spatial, patchify(y, grid))        # (N, H*W*Ce, Ca)
        return y.reshape(b, t1, grid.H * grid.W, self.cfg.C_e * self.cfg.C_a)


class TUM:
    """Temporal unification: (B,T1,L,C) -> (B,T,...) -> (B,T2,L,C)."""

    def __init__(self, store: ParameterStore, cfg):
        ce = cfg.C_e
        hyper = dict(depth=cfg.hyper_depth, heads=cfg.hyper_heads)
        self.cfg = cfg
        self.time_tok = ScalarTokenizer(store, "tum.in.time", ce)
        self.inp = HyperBranch(store, "tum.in.hyper", ce, cfg.T, use_cls=True, use_positional=True, **hyper)
        self.out_meta = OutputTemporalEncoder(store, "tum.out.meta", ce)
        self.out = HyperBranch(store, "tum.out.hyper", ce, cfg.T, use_cls=False, use_positional=True, **hyper)

    def maps(self, meta: InputMetadata, spec: OutputSpec, registry: EmbeddingRegistry) -> tuple:
        inp = self.inp.generate(self.time_tok(meta.normalized_timestamps()))
        out = self.out.generate(self.out_meta(spec.out_len, spec.task, registry)).transposed()
        return inp, out

    def __call__(self, x: Tensor, meta: InputMetadata, spec: OutputSpec, registry: EmbeddingRegistry) -> Tensor:
        b, t1, length, c = x.shape
        spec.validate(t1)
        inp, out = self.maps(meta, spec, registry)
        y = x.permute(0, 2, 3, 1).reshape(b, length * c, t1)
        y = apply(out, apply(inp, y))                # (B, L*C, T2)
        return y.reshape(b, length, c, spec.out_len).permute(0, 3, 1, 2)


class OSSUM:
    """Output spatial-spectral unification: (B,T2,L,C) -> (B,T2,C2,H1,W1)."""

    def __init__(self, store: ParameterStore, cfg, spatial_meta: SpatialMetaEncoder):
        ce, ca = cfg.C_e, cfg.C_a
        hyper = dict(depth=cfg.hyper_depth, heads=cfg.hyper_heads)
        self.cfg = cfg
        self.spatial_meta = spatial_meta
        self.spatial = HyperBranch(store, "ossum.spatial.hyper", ce, ca, use_cls=False,
                                   use_positional=True, **hyper)
        self.spectral = HyperBranch(store, "ossum.spectral.hyper", ce, ce, use_cls=False,
                                    use_positional=False, **hyper)

    def maps(self, spec: OutputSpec, meta: InputMetadata, grid: PatchGrid, registry: EmbeddingRegistry,
             category_tokens: Tensor = None) -> tuple:
        spatial = self.spatial.generate(self.spatial_meta(grid.Ph, grid.Pw, meta.resolution_m)).transposed()
        if category_tokens is None:
            category_tokens = registry.category_tokens(spec.category_ids)
        spectral = self.spectral.generate(category_tokens).transposed()
        return spatial, spectral

    def __call__(self, x: Tensor, spec: OutputSpec, meta: InputMetadata, grid: PatchGrid,
                 registry: EmbeddingRegistry, category_tokens: Tensor = None) -> Tensor:
        b, t2, length, c = x.shape
        ce, ca = self.cfg.C_e, self.cfg.C_a
        spatial, spectral = self.maps(spec, meta, grid, registry, category_tokens)
        y = x.reshape(b * t2, length * ce, ca)
        y = unpatchify(apply(spatial, y), grid)      # (N, H1W1, Ce)
        y = apply(spectral, y)                       # (N, H1W1, K)
        k = spectral.n_out
        return y.reshape(b, t2, grid.H1, grid.W1, k).permute(0, 1, 4, 2, 3)


def issum_forward(module: ISSUM, x: Tensor, meta: InputMetadata, grid: PatchGrid) -> Tensor:
    return module(x, meta, grid)


def tum_forward(module: TUM, x: Tensor, meta: InputMetadata, spec: OutputSpec,
                registry: EmbeddingRegistry) -> Tensor:
    return module(x, meta, spec, registry)


def ossum_forward(module: OSSUM, x: Tensor, spec: OutputSpec, meta: InputMetadata, grid: PatchGrid,
                  registry: EmbeddingRegistry) -> Tensor:
    return module(x, spec, meta, grid, registry)


__all__ = ["PatchGrid", "patchify", "unpatchify", "ISSUM", "TUM", "OSSUM", "GeneratedLinear",
           "issum_forward", "tum_forward", "ossum_forward"]
