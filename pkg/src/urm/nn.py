"""Linear layers, multi-head self-attention with adjacency fusion, and the pre-norm SABlock.

Token-row convention throughout: a sequence is ``(..., tokens, channels)`` and
attention scores are ``Q @ K^T`` of shape ``(..., tokens, tokens)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

SCALE_MODES = ("input_dim", "head_dim")


def _param(arr, precision: str) -> Tensor:
    return Tensor(arr, requires_grad=True, precision=precision)


@dataclass
class LinearParams:
    W: Tensor
    b: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True, precision: str = "single"):
        bound = 1.0 / np.sqrt(fan_in)
        W = _param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), precision)
        b = _param(np.zeros(fan_out), precision) if bias else None
        return cls(W, b)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.W", self.W
        if self.b is not None:
            yield f"{prefix}.b", self.b


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, width: int, precision: str = "single", eps: float = 1e-5):
        return cls(_param(np.ones(width), precision), _param(np.zeros(width), precision), eps)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class HeadParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams


@dataclass
class MHSAParams:
    heads: list[HeadParams]
    agg: LinearParams
    scale_mode: str = "input_dim"

    @classmethod
    def init(cls, rng, width: int, n_heads: int, scale_mode: str = "input_dim", precision: str = "single"):
        if width % n_heads:
            raise DimensionError(f"head count {n_heads} does not divide width {width}")
        if scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")
        hw = width // n_heads
        heads = [
            HeadParams(*(LinearParams.init(rng, width, hw, bias=False, precision=precision) for _ in range(3)))
            for _ in range(n_heads)
        ]
        return cls(heads, LinearParams.init(rng, width, width, bias=False, precision=precision), scale_mode)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, h in enumerate(self.heads):
            yield from h.q.named(f"{prefix}.head{i}.q")
            yield from h.k.named(f"{prefix}.head{i}.k")
            yield from h.v.named(f"{prefix}.head{i}.v")
        yield from self.agg.named(f"{prefix}.agg")


@dataclass
class FFNParams:
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def init(cls, rng, width: int, hidden: int | None = None, precision: str = "single"):
        hidden = width if hidden is None else hidden
        return cls(
            LinearParams.init(rng, width, hidden, precision=precision),
            LinearParams.init(rng, hidden, width, precision=precision),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.fc1.named(f"{prefix}.fc1")
        yield from self.fc2.named(f"{prefix}.fc2")


@dataclass
class SABlockParams:
    norm1: NormParams
    mhsa: MHSAParams
    norm2: NormParams
    ffn: FFNParams

    @classmethod
    def init(cls, rng, width: int, n_heads: int = 4, scale_mode: str = "input_dim", precision: str = "single"):
        return cls(
            NormParams.init(width, precision),
            MHSAParams.init(rng, width, n_heads, scale_mode, precision),
            NormParams.init(width, precision),
            FFNParams.init(rng, width, precision=precision),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.norm1.named(f"{prefix}.norm1")
        yield from self.mhsa.named(f"{prefix}.mhsa")
        yield from self.norm2.named(f"{prefix}.norm2")
        yield from self.ffn.named(f"{prefix}.ffn")


def linear(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.W.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} does not match weight {p.W.shape}")
    if x.ndim == 1:
        y = ad.reshape(ad.matmul(ad.reshape(x, (1, x.shape[0])), p.W), (p.W.shape[1],))
    else:
        y = ad.matmul(x, p.W)
    return y if p.b is None else ad.add(y, p.b)


def norm(p: NormParams, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p.gamma, p.beta, p.eps)


def attention_weights(head: HeadParams, x: Tensor, scale: float, soft_adj: Tensor | None = None) -> Tensor:
    """Row-stochastic implicit weights, plus ``soft_adj`` when given (rows then sum to 2)."""
    q = linear(head.q, x)
    k = linear(head.k, x)
    w = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), scale), axis=-1)
    return w if soft_adj is None else ad.add(soft_adj, w)


def _scale(mode: str, width: int, n_heads: int) -> float:
    d = width if mode == "input_dim" else width // n_heads
    return 1.0 / np.sqrt(d)


def _check_adjacency(x: Tensor, adj: Tensor | None) -> None:
    if adj is None:
        return
    n = x.shape[-2]
    if adj.shape[-2:] != (n, n):
        raise DimensionError(f"adjacency shape {adj.shape} does not match {n} tokens")


def self_attention(
    head: HeadParams,
    x: Tensor,
    adj: Tensor | None = None,
    scale_mode: str = "input_dim",
    n_heads: int = 1,
) -> Tensor:
    """One attention head: ``(softmax(adj) + softmax(Q K^T / sqrt(D))) V``.

    ``D`` is the full input width under ``scale_mode="input_dim"`` and the
    head width under ``"head_dim"``; ``n_heads`` is needed for the latter.
    """
    _check_adjacency(x, adj)
    soft_adj = None if adj is None else ad.softmax(adj, axis=-1)
    return _head(head, x, soft_adj, _scale(scale_mode, x.shape[-1], n_heads))


def _head(head: HeadParams, x: Tensor, soft_adj: Tensor | None, scale: float) -> Tensor:
    return ad.matmul(attention_weights(head, x, scale, soft_adj), linear(head.v, x))


def mhsa(p: MHSAParams, x: Tensor, adj: Tensor | None = None) -> Tensor:
    _check_adjacency(x, adj)
    # the same softmax(adj) is shared by every head
    soft_adj = None if adj is None else ad.softmax(adj, axis=-1)
    scale = _scale(p.scale_mode, x.shape[-1], len(p.heads))
    outs = [_head(h, x, soft_adj, scale) for h in p.heads]
    cat = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
    return linear(p.agg, cat)


def ffn(p: FFNParams, x: Tensor) -> Tensor:
    return linear(p.fc2, ad.gelu(linear(p.fc1, x)))


def sablock(p: SABlockParams, x: Tensor, adj: Tensor | None = None) -> Tensor:
    y = ad.add(x, mhsa(p.mhsa, norm(p.norm1, x), adj))
    return ad.add(y, ffn(p.ffn, norm(p.norm2, y)))


def count(named: Iterator[tuple[str, Tensor]]) -> int:
    return sum(t.data.size for _, t in named)
