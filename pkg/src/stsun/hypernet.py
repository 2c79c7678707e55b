"""Metadata-conditioned generation of linear-layer parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .attention import TransformerBlock
from .metadata import PositionalEncoding, ValidationError
from .nn import LayerNorm, Linear
from .tensor import ParameterStore, Tensor


@dataclass
class GeneratedLinear:
    weight: Tensor
    bias: Tensor = None

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def transposed(self) -> "GeneratedLinear":
        if self.bias is not None:
            raise ValueError("only weight-only maps can be transposed")
        return GeneratedLinear(T.swap_last(self.weight))


class HyperBranch:
    """Tokens -> transformer blocks -> generated (weight[, bias]).

    With ``use_cls`` a learnable CLS token is prepended and its final state
    produces the bias (input-side maps). Without it only a weight is emitted
    (output-side maps). Row ``i`` of the weight comes from metadata token
    ``i``, so the weight always has shape (tokens, n_out).

    Generated weights are multiplied by 1/sqrt(fan_in) of the map they
    define: the token count for input-side maps, ``n_out`` for output-side
    maps (which the call site transposes).
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, n_out: int, *,
                 use_cls: bool, use_positional: bool, depth: int = 2, heads: int = 4,
                 mlp_ratio: int = 4):
        self.name = name
        self.dim = dim
        self.n_out = n_out
        self.use_cls = use_cls
        self.use_positional = use_positional
        self.blocks = [TransformerBlock(store, f"{name}.blocks.{i}", dim, heads, mlp_ratio)
                       for i in range(depth)]
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        head_std = 1.0 / math.sqrt(dim)
        self.weight_head = Linear(store, f"{name}.weight_head", dim, n_out, std=head_std)
        self.bias_head = Linear(store, f"{name}.bias_head", dim, n_out, std=head_std) if use_cls else None
        self.cls_token = store.normal(f"{name}.cls", (1, dim)) if use_cls else None
        self.positional = PositionalEncoding(dim)

    def generate(self, tokens: Tensor) -> GeneratedLinear:
        if tokens.ndim != 2 or tokens.shape[1] != self.dim:
            raise ValidationError(f"{self.name}: expected (n, {self.dim}) metadata tokens, got {tokens.shape}")
        n = tokens.shape[0]
        if self.use_positional:
            tokens = tokens + self.positional(n)
        if self.use_cls:
            tokens = T.concat([self.cls_token, tokens], axis=0)
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        if self.use_cls:
            cls, rows = T.split(tokens, [1, n], axis=0)
            weight = self.weight_head(rows) * (1.0 / math.sqrt(n))
            bias = self.bias_head(cls).reshape((self.n_out,))
            return GeneratedLinear(weight, bias)
        weight = self.weight_head(tokens) * (1.0 / math.sqrt(self.n_out))
        return GeneratedLinear(weight)


def generate(branch: HyperBranch, meta_tokens: Tensor) -> GeneratedLinear:
    return branch.generate(meta_tokens)


def apply(gl: GeneratedLinear, x: Tensor) -> Tensor:
    if x.shape[-1] != gl.n_in:
        raise ValidationError(f"input width {x.shape[-1]} does not match generated map ({gl.n_in} x {gl.n_out})")
    y = T.matmul(x, gl.weight)
    return y + gl.bias if gl.bias is not None else y
