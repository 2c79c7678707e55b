"""Registry of gradient checks per module, shared by the CLI and the test suite.

Residual output projections start at zero, so every check first perturbs all
parameters; otherwise most paths would carry identically zero gradient.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, LocalGlobalBlock, MultiHeadAttention, TransformerBlock, WindowPartition
from .gradcheck import CheckResult, grad_check, grad_check_params
from .hypernet import HyperBranch, apply
from .metadata import (EmbeddingRegistry, InputMetadata, OutputSpec, OutputTemporalEncoder, ScalarTokenizer,
                       SpatialMetaEncoder)
from .model import ModelConfig, STSUN
from .tensor import ParameterStore, Tensor
from .training import loss
from .unify import ISSUM, OSSUM, TUM, PatchGrid

TOL = 1e-4
EPS = 1e-5

REGISTRY: dict = {}


def register(module: str, name: str):
    def deco(fn):
        REGISTRY.setdefault(module, []).append((name, fn))
        return fn
    return deco


def perturb(store: ParameterStore, seed: int = 0, scale: float = 0.2):
    rng = np.random.default_rng(seed)
    for _, p in store.items():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def _projector(seed: int = 1):
    """Scalar readout sum(w * out) with fixed random w, created lazily per shape."""
    rng = np.random.default_rng(seed)
    cache = {}

    def proj(out: Tensor) -> Tensor:
        if out.shape not in cache:
            cache[out.shape] = rng.standard_normal(out.shape)
        return T.sum_(out * cache[out.shape])
    return proj


def _x(shape, seed=2, scale=1.0) -> Tensor:
    return Tensor(scale * np.random.default_rng(seed).standard_normal(shape))


def _wrt_x(fn: Callable, x: Tensor) -> float:
    proj = _projector()
    return grad_check(lambda t: proj(fn(t)), x, EPS)


def _wrt_params(fn: Callable, store: ParameterStore, per_param: int = 2) -> float:
    proj = _projector()
    return grad_check_params(lambda: proj(fn()), store.items(), EPS, per_param)


# --------------------------------------------------------------------------
# numeric core


@register("numeric-core", "matmul")
def _matmul():
    b, c = _x((3, 5), seed=5), _x((2, 6, 4), seed=6)
    return _wrt_x(lambda a: T.sum_(T.matmul(a, b)) + T.matmul(c, T.square(a)).sum(), _x((2, 4, 3)))


@register("numeric-core", "elementwise")
def _elementwise():
    def f(a):
        return T.exp(a * 0.3) + T.log(T.square(a) + 1.0) - T.sigmoid(a) / (T.square(a) + 2.0)
    return _wrt_x(f, _x((3, 5)))


@register("numeric-core", "softmax")
def _softmax():
    return _wrt_x(lambda a: T.softmax(a * 2.0), _x((2, 3, 6)))


@register("numeric-core", "layernorm")
def _layernorm():
    g, b = _x((6,), seed=7), _x((6,), seed=8)
    return _wrt_x(lambda a: T.layernorm(a, g, b), _x((4, 6)))


@register("numeric-core", "gelu")
def _gelu():
    return _wrt_x(T.gelu, _x((4, 5), scale=2.0))


@register("numeric-core", "bce_with_logits")
def _bce():
    y = (np.random.default_rng(3).random((3, 4)) > 0.5).astype(float)
    return _wrt_x(lambda a: T.bce_with_logits(a, y), _x((3, 4), scale=2.0))


@register("numeric-core", "gather_scatter")
def _gather_scatter():
    idx = np.array([0, 2, 2, 4, 1, 3])
    w = np.array([1.0, 0.5, 0.5, 1.0, 1.0, 1.0])
    return _wrt_x(lambda a: T.scatter_rows(T.square(T.gather_rows(a, idx)), idx, 5, w), _x((2, 5, 3)))


@register("numeric-core", "shape_ops")
def _shape_ops():
    def f(a):
        p, q = T.split(a.reshape(2, 12), [5, 7], axis=1)
        r = T.concat([T.square(q), p * 2.0], axis=1)
        return T.mean(r.reshape(3, 4, 2).permute(2, 0, 1), axis=1) + T.slice_(a, (slice(0, 2), slice(1, 3))).sum()
    return _wrt_x(f, _x((3, 8)))


@register("numeric-core", "sdpa")
def _sdpa():
    return _wrt_x(lambda a: T.sdpa(a, 2), _x((2, 5, 12)))


# --------------------------------------------------------------------------
# embeddings and metadata


@register("embeddings-metadata", "tokenizers")
def _tokenizers():
    store = ParameterStore(0)
    reg = EmbeddingRegistry(store, ["change", "a", "b"], 4)
    tok = ScalarTokenizer(store, "tok", 4)
    spatial = SpatialMetaEncoder(store, "sp", 4)
    temporal = OutputTemporalEncoder(store, "out", 4)
    perturb(store)

    def f():
        return T.concat([tok([0.45, 0.56, 0.67]), reg.category_tokens([2, 0]),
                         spatial(2, 3, 0.5), temporal(3, "SCD", reg)], axis=0)
    return _wrt_params(f, store, per_param=3)


# --------------------------------------------------------------------------
# hypernetwork


@register("hypernet", "generate_apply")
def _hyper_apply():
    store = ParameterStore(0)
    cls_branch = HyperBranch(store, "h1", 4, 3, use_cls=True, use_positional=True, depth=1, heads=2)
    out_branch = HyperBranch(store, "h2", 4, 3, use_cls=False, use_positional=False, depth=1, heads=2)
    perturb(store)
    data = _x((2, 5), seed=9)

    def f(tokens):
        y = apply(cls_branch.generate(tokens), data)
        return apply(out_branch.generate(tokens).transposed(), y)
    return _wrt_x(f, _x((5, 4)))


@register("hypernet", "parameters")
def _hyper_params():
    store = ParameterStore(0)
    branch = HyperBranch(store, "h", 4, 3, use_cls=True, use_positional=True, depth=1, heads=2)
    perturb(store)
    tokens, data = _x((4, 4)), _x((2, 4), seed=9)
    return _wrt_params(lambda: apply(branch.generate(tokens), data), store)


# --------------------------------------------------------------------------
# unification modules


def _small_cfg(**kw) -> ModelConfig:
    base = dict(H=2, W=2, T=2, C_e=4, C_a=2, heads=2, hyper_heads=2, hyper_depth=1,
                encoder_depth=1, decoder_depth=1, categories=("change", "a", "b", "c"))
    base.update(kw)
    return ModelConfig(**base)


@register("unify", "issum")
def _issum():
    cfg = _small_cfg()
    store = ParameterStore(0)
    mod = ISSUM(store, cfg, SpatialMetaEncoder(store, "sp", cfg.C_e))
    perturb(store)
    meta = InputMetadata([450, 550, 650], [0, 10], 0.5)
    return _wrt_x(lambda x: mod(x, meta, PatchGrid(4, 4, 2, 2)), _x((1, 2, 3, 4, 4)))


@register("unify", "tum")
def _tum():
    cfg = _small_cfg()
    store = ParameterStore(0)
    reg = EmbeddingRegistry(store, cfg.categories, cfg.C_e)
    mod = TUM(store, cfg)
    perturb(store)
    meta = InputMetadata([450], [0, 3, 10], 0.5)
    spec = OutputSpec("BCD", 2, [0])
    return _wrt_x(lambda x: mod(x, meta, spec, reg), _x((2, 3, 4, cfg.d_model)))


@register("unify", "ossum")
def _ossum():
    cfg = _small_cfg()
    store = ParameterStore(0)
    reg = EmbeddingRegistry(store, cfg.categories, cfg.C_e)
    mod = OSSUM(store, cfg, SpatialMetaEncoder(store, "sp", cfg.C_e))
    perturb(store)
    meta = InputMetadata([450], [0, 10], 0.5)
    spec = OutputSpec("SCD", 2, [3, 1])
    return _wrt_x(lambda x: mod(x, spec, meta, PatchGrid(4, 4, 2, 2), reg), _x((1, 2, 4, cfg.d_model)))


# --------------------------------------------------------------------------
# attention


@register("attention-lgwa", "window_attention")
def _window_attention():
    store = ParameterStore(0)
    mha = MultiHeadAttention(store, "a", 4, 2)
    perturb(store)
    part = WindowPartition.tiled((4, 4), (2, 4), 0.5)
    return _wrt_x(lambda x: mha.windowed(x, part), _x((2, 16, 4)))


@register("attention-lgwa", "lgwa_block")
def _lgwa_block():
    store = ParameterStore(0)
    blk = LocalGlobalBlock(store, "b", AttentionConfig(4, 2, (1, 4), (4, 1), (2, 2)), (4, 4))
    perturb(store)
    return _wrt_x(blk, _x((1, 16, 4)))


@register("attention-lgwa", "transformer_block")
def _transformer_block():
    store = ParameterStore(0)
    blk = TransformerBlock(store, "t", 4, 2)
    perturb(store)
    return _wrt_x(blk, _x((2, 5, 4)))


@register("attention-lgwa", "parameters")
def _attn_params():
    store = ParameterStore(0)
    blk = LocalGlobalBlock(store, "b", AttentionConfig(4, 2, (1, 4), (4, 1), (2, 2)), (4, 4))
    perturb(store)
    x = _x((1, 16, 4))
    return _wrt_params(lambda: blk(x), store)


# --------------------------------------------------------------------------
# full model


def _pipeline():
    model = STSUN(_small_cfg(H=4, W=4))
    perturb(model.store)
    meta = InputMetadata([450, 550, 650], [0, 30], 0.5)
    spec = OutputSpec("SCD", 2, [3, 1, 2])
    return model, meta, spec


@register("model", "pipeline_input")
def _model_x():
    # 2 frames x 3 bands x 8 x 8
    model, meta, spec = _pipeline()
    return _wrt_x(lambda x: model.forward(x, meta, spec), _x((2, 3, 8, 8)))


@register("model", "pipeline_parameters")
def _model_params():
    model, meta, spec = _pipeline()
    x = _x((2, 3, 8, 8))
    return _wrt_params(lambda: model.forward(x, meta, spec), model.store, per_param=1)


@register("model", "coupled_input")
def _model_coupled():
    model = STSUN(_small_cfg(H=4, W=4, unification="coupled", attention="global"))
    perturb(model.store)
    meta = InputMetadata([450, 650], [0, 30], 0.5)
    spec = OutputSpec("BCD", 1, [0])
    return _wrt_x(lambda x: model.forward(x, meta, spec), _x((2, 2, 4, 4)))


# --------------------------------------------------------------------------
# training loss


@register("training", "loss_binary")
def _loss_binary():
    labels = (np.random.default_rng(4).random((2, 1, 4, 4)) > 0.5).astype(np.uint8)
    return grad_check(lambda z: loss(z, labels)[0], _x((2, 1, 1, 4, 4)), EPS)


@register("training", "loss_multiclass")
def _loss_multi():
    labels = np.random.default_rng(4).integers(0, 3, (1, 2, 3, 3))
    return grad_check(lambda z: loss(z, labels)[0], _x((1, 2, 3, 3, 3)), EPS)


def modules() -> list:
    return list(REGISTRY)


def run(module: str = None, tol: float = TOL) -> list:
    """Run registered checks (all, or one module's); returns CheckResults with timings."""
    if module is not None and module not in REGISTRY:
        raise KeyError(f"no gradient checks registered for module {module!r}; known: {modules()}")
    results = []
    for mod in ([module] if module else modules()):
        for name, fn in REGISTRY[mod]:
            t0 = time.perf_counter()
            err = fn()
            res = CheckResult(mod, name, err, tol)
            res.seconds = time.perf_counter() - t0
            results.append(res)
    return results
