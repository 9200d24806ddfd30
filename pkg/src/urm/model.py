"""Full anticipation model: recurrent cell, edge strategy and per-interval classifier heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cell import CellParams, run_sequence
from .edges import ClassTokenProjection, EdgeStrategy, make_strategy
from .nn import LinearParams, linear

ACTION_MODES = ("separate", "compose")


@dataclass
class ModelConfig:
    channels: int = 32
    heads: int = 4
    scale_mode: str = "input_dim"
    update_take: str = "message_half"
    strategy: str = "implicit"
    bank_size: int = 512
    ctp_variant: str = "vn"
    action_mode: str = "separate"
    precision: str = "single"


@dataclass
class ClassifierHeads:
    """Verb, noun and action heads shared across anticipation steps.

    With class tokens, the verb and noun heads read their token rows (the
    global variant feeds its single token to both) and the action head reads
    the action token if there is one, else the vertex-pooled readout.
    """

    verb: LinearParams
    noun: LinearParams
    action: LinearParams | None
    source: str = "mean_pool"
    action_mode: str = "separate"
    compose: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def named(self, prefix: str = "heads"):
        yield from self.verb.named(f"{prefix}.verb")
        yield from self.noun.named(f"{prefix}.noun")
        if self.action is not None:
            yield from self.action.named(f"{prefix}.action")


@dataclass
class URM:
    config: ModelConfig
    num_vertices: int
    input_dim: int
    num_verbs: int
    num_nouns: int
    num_actions: int
    cell: CellParams
    strategy: EdgeStrategy
    heads: ClassifierHeads

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.cell.named("cell"))
        out.update(self.strategy.named("edges"))
        out.update(self.heads.named("heads"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def dtype(self):
        return self.cell.pos_embed.data.dtype

    def forward(self, frames, steps: Sequence[int], trace: list | None = None):
        """Logits ``(verb, noun, action)`` at each step in ``steps`` (sorted)."""
        outs = run_sequence(self.cell, frames, self.strategy, steps, trace=trace)
        return [self._classify(y, cls) for y, cls in outs]

    def _classify(self, y: Tensor, cls: Tensor | None):
        pooled = ad.reduce_mean(y, axis=-2)
        h = self.heads
        if cls is None:
            v_in = n_in = a_in = pooled
        else:
            rows = [
                ad.reshape(ad.slice_axis(cls, i, i + 1, axis=-2), cls.shape[:-2] + (cls.shape[-1],))
                for i in range(cls.shape[-2])
            ]
            v_in = rows[0]
            n_in = rows[1] if len(rows) > 1 else rows[0]
            a_in = rows[2] if len(rows) > 2 else pooled
        v = linear(h.verb, v_in)
        n = linear(h.noun, n_in)
        if h.action_mode == "compose":
            mv, mn = h.compose
            a = ad.add(ad.matmul(v, Tensor(mv.astype(self.dtype))), ad.matmul(n, Tensor(mn.astype(self.dtype))))
        else:
            a = linear(h.action, a_in)
        return v, n, a


def compose_matrices(num_verbs: int, num_nouns: int) -> tuple[np.ndarray, np.ndarray]:
    """0/1 maps sending verb/noun logits to action ``verb * num_nouns + noun``."""
    a = np.arange(num_verbs * num_nouns)
    mv = (np.arange(num_verbs)[:, None] == (a // num_nouns)[None, :]).astype(np.float64)
    mn = (np.arange(num_nouns)[:, None] == (a % num_nouns)[None, :]).astype(np.float64)
    return mv, mn


def build_model(
    cfg: ModelConfig,
    num_vertices: int,
    input_dim: int,
    num_verbs: int,
    num_nouns: int,
    num_actions: int | None = None,
    seed: int = 0,
) -> URM:
    """Initialize every parameter from one seeded stream, in a fixed order."""
    if cfg.action_mode not in ACTION_MODES:
        raise ValueError(f"action_mode must be one of {ACTION_MODES}, got {cfg.action_mode!r}")
    num_actions = num_verbs * num_nouns if num_actions is None else num_actions
    if cfg.action_mode == "compose" and num_actions != num_verbs * num_nouns:
        raise ValueError("compose action mode needs num_actions == num_verbs * num_nouns")
    rng = np.random.default_rng(seed)
    prec = cfg.precision
    cell = CellParams.init(
        rng, num_vertices, input_dim, cfg.channels, cfg.heads, cfg.scale_mode, cfg.update_take, prec
    )
    strategy = make_strategy(cfg.strategy, rng, num_vertices, cfg.channels, cfg.bank_size, cfg.ctp_variant, prec)
    c = cfg.channels
    heads = ClassifierHeads(
        verb=LinearParams.init(rng, c, num_verbs, precision=prec),
        noun=LinearParams.init(rng, c, num_nouns, precision=prec),
        action=None if cfg.action_mode == "compose" else LinearParams.init(rng, c, num_actions, precision=prec),
        source="cls_tokens" if isinstance(strategy, ClassTokenProjection) else "mean_pool",
        action_mode=cfg.action_mode,
        compose=compose_matrices(num_verbs, num_nouns) if cfg.action_mode == "compose" else None,
    )
    return URM(cfg, num_vertices, input_dim, num_verbs, num_nouns, num_actions, cell, strategy, heads)
