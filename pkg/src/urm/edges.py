"""Explicit edge estimation: Template Bank soft-selection and Class-Token Projection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .nn import LinearParams, NormParams, _param, linear, norm

BANK_SIZES = (1, 32, 64, 128, 256, 512, 1024, 2048)
CTP_VARIANTS = {"global": ("global",), "vn": ("verb", "noun"), "vna": ("verb", "noun", "action")}


@dataclass
class BankParams:
    templates: Tensor  # (S, N, N)
    sel1: LinearParams  # C -> C
    sel2: LinearParams  # C -> S

    @classmethod
    def init(cls, rng, num_vertices: int, channels: int, bank_size: int = 512, precision: str = "single"):
        if bank_size < 1:
            raise ValueError(f"bank size must be >= 1, got {bank_size}")
        templates = _param(rng.normal(0.0, 0.02, size=(bank_size, num_vertices, num_vertices)), precision)
        return cls(
            templates,
            LinearParams.init(rng, channels, channels, precision=precision),
            LinearParams.init(rng, channels, bank_size, precision=precision),
        )

    @property
    def size(self) -> int:
        return self.templates.shape[0]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.templates", self.templates
        yield from self.sel1.named(f"{prefix}.selector1")
        yield from self.sel2.named(f"{prefix}.selector2")


@dataclass
class CTPParams:
    """Learnable class tokens, each with its own projection to vertex width plus layer norm."""

    variant: str
    tokens: list[Tensor]  # each (1, C)
    proj: list[LinearParams]  # each C -> N
    proj_norm: list[NormParams]  # each width N

    @classmethod
    def init(cls, rng, num_vertices: int, channels: int, variant: str = "vn", precision: str = "single"):
        if variant not in CTP_VARIANTS:
            raise ValueError(f"ctp variant must be one of {sorted(CTP_VARIANTS)}, got {variant!r}")
        k = len(CTP_VARIANTS[variant])
        return cls(
            variant,
            # unit scale, like the readout tokens that replace them after step 0
            [_param(rng.normal(0.0, 1.0, size=(1, channels)), precision) for _ in range(k)],
            [LinearParams.init(rng, channels, num_vertices, precision=precision) for _ in range(k)],
            [NormParams.init(num_vertices, precision) for _ in range(k)],
        )

    @property
    def roles(self) -> tuple[str, ...]:
        return CTP_VARIANTS[self.variant]

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for role, tok, p, n in zip(self.roles, self.tokens, self.proj, self.proj_norm):
            yield f"{prefix}.cls_{role}", tok
            yield from p.named(f"{prefix}.proj_{role}")
            yield from n.named(f"{prefix}.norm_{role}")


@dataclass
class Implicit:
    def named(self, prefix: str):
        return iter(())


@dataclass
class TemplateBank:
    bank: BankParams

    def named(self, prefix: str):
        return self.bank.named(prefix)


@dataclass
class ClassTokenProjection:
    ctp: CTPParams

    def named(self, prefix: str):
        return self.ctp.named(prefix)


EdgeStrategy = Union[Implicit, TemplateBank, ClassTokenProjection]


def tb_selector(bank: BankParams, e: Tensor) -> Tensor:
    """Template weights ``(..., S)`` from the vertex-averaged representation of ``e``."""
    pooled = ad.reduce_mean(e, axis=-2)
    return ad.softmax(linear(bank.sel2, ad.gelu(linear(bank.sel1, pooled))), axis=-1)


def tb_combine(bank: BankParams, weights: Tensor) -> Tensor:
    s, n, _ = bank.templates.shape
    flat = ad.reshape(bank.templates, (s, n * n))
    return ad.reshape(ad.matmul(_row(weights), flat), weights.shape[:-1] + (n, n))


def _row(w: Tensor) -> Tensor:
    # (..., S) -> (..., 1, S) so the combination is a batched matmul
    return ad.reshape(w, w.shape[:-1] + (1, w.shape[-1]))


def tb_adjacency(bank: BankParams, e: Tensor) -> Tensor:
    return tb_combine(bank, tb_selector(bank, e))


def ctp_projections(ctp: CTPParams, tokens: Tensor) -> list[Tensor]:
    """Layer-normalized projection of each token row of ``tokens`` (..., k, C) to width N."""
    if tokens.shape[-2] != ctp.num_tokens:
        raise ContractError(f"expected {ctp.num_tokens} class tokens, got {tokens.shape[-2]}")
    out = []
    for i, (p, n) in enumerate(zip(ctp.proj, ctp.proj_norm)):
        row = ad.reshape(ad.slice_axis(tokens, i, i + 1, axis=-2), tokens.shape[:-2] + (tokens.shape[-1],))
        out.append(norm(n, linear(p, row)))
    return out


def ctp_adjacency(ctp: CTPParams, tokens: Tensor) -> Tensor:
    """Outer product of projected tokens: ``P⊗P``, ``V⊗N``, or ``V⊗N + A⊗A`` by variant."""
    vecs = ctp_projections(ctp, tokens)
    if ctp.variant == "global":
        return ad.outer_product(vecs[0], vecs[0])
    adj = ad.outer_product(vecs[0], vecs[1])
    if ctp.variant == "vna":
        adj = ad.add(adj, ad.outer_product(vecs[2], vecs[2]))
    return adj


def initial_tokens(ctp: CTPParams, batch_shape: tuple[int, ...] = ()) -> Tensor:
    toks = ctp.tokens[0] if ctp.num_tokens == 1 else ad.concat(ctp.tokens, axis=0)
    if batch_shape:
        toks = ad.broadcast_to(toks, batch_shape + toks.shape)
    return toks


def adjacency_for_step(strategy: EdgeStrategy, e: Tensor, cls_state: Tensor | None = None) -> Tensor | None:
    if isinstance(strategy, Implicit):
        return None
    if isinstance(strategy, TemplateBank):
        return tb_adjacency(strategy.bank, e)
    if isinstance(strategy, ClassTokenProjection):
        if cls_state is None:
            raise ContractError("class-token projection needs the current class tokens")
        return ctp_adjacency(strategy.ctp, cls_state)
    raise TypeError(f"unknown edge strategy {strategy!r}")


def num_tokens(strategy: EdgeStrategy) -> int:
    return strategy.ctp.num_tokens if isinstance(strategy, ClassTokenProjection) else 0


def make_strategy(
    name: str,
    rng: np.random.Generator,
    num_vertices: int,
    channels: int,
    bank_size: int = 512,
    ctp_variant: str = "vn",
    precision: str = "single",
) -> EdgeStrategy:
    if name == "implicit":
        return Implicit()
    if name == "tb":
        return TemplateBank(BankParams.init(rng, num_vertices, channels, bank_size, precision))
    if name == "ctp":
        return ClassTokenProjection(CTPParams.init(rng, num_vertices, channels, ctp_variant, precision))
    raise ValueError(f"edge strategy must be implicit, tb or ctp, got {name!r}")
