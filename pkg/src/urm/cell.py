"""The recurrent cell: gated vertex encoding, message, update and readout SABlocks.

Tensors may carry any number of leading batch axes; the last two axes are
always ``(vertices, channels)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .edges import ClassTokenProjection, EdgeStrategy, adjacency_for_step, initial_tokens
from .nn import LinearParams, SABlockParams, _param, linear, sablock

UPDATE_TAKES = ("message_half", "vertex_half")


@dataclass
class CellParams:
    message_mlp: LinearParams  # C_in -> C
    pos_embed: Tensor  # (N, C)
    fuse: LinearParams  # 2C -> C
    msg_block: SABlockParams
    upd_block: SABlockParams
    readout_block: SABlockParams
    readout_proj: LinearParams  # C -> C
    update_take: str = "message_half"

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        num_vertices: int,
        input_dim: int,
        channels: int,
        n_heads: int = 4,
        scale_mode: str = "input_dim",
        update_take: str = "message_half",
        precision: str = "single",
    ) -> "CellParams":
        if update_take not in UPDATE_TAKES:
            raise ValueError(f"update_take must be one of {UPDATE_TAKES}, got {update_take!r}")
        c = channels
        return cls(
            message_mlp=LinearParams.init(rng, input_dim, c, precision=precision),
            pos_embed=_param(rng.normal(0.0, 0.02, size=(num_vertices, c)), precision),
            fuse=LinearParams.init(rng, 2 * c, c, precision=precision),
            msg_block=SABlockParams.init(rng, c, n_heads, scale_mode, precision),
            upd_block=SABlockParams.init(rng, c, n_heads, scale_mode, precision),
            readout_block=SABlockParams.init(rng, c, n_heads, scale_mode, precision),
            readout_proj=LinearParams.init(rng, c, c, precision=precision),
            update_take=update_take,
        )

    @property
    def num_vertices(self) -> int:
        return self.pos_embed.shape[0]

    @property
    def channels(self) -> int:
        return self.pos_embed.shape[1]

    def named(self, prefix: str = "cell") -> Iterator[tuple[str, Tensor]]:
        yield from self.message_mlp.named(f"{prefix}.message_mlp")
        yield f"{prefix}.pos_embed", self.pos_embed
        yield from self.fuse.named(f"{prefix}.fuse")
        yield from self.msg_block.named(f"{prefix}.msg_block")
        yield from self.upd_block.named(f"{prefix}.upd_block")
        yield from self.readout_block.named(f"{prefix}.readout_block")
        yield from self.readout_proj.named(f"{prefix}.readout_proj")


def count_parameters(p: CellParams, include_pe: bool = False) -> int:
    return sum(t.data.size for name, t in p.named() if include_pe or not name.endswith(".pos_embed"))


@dataclass
class HiddenState:
    h: Tensor
    t: int = 0


def init_state(p: CellParams, batch_shape: tuple[int, ...] = ()) -> HiddenState:
    shape = batch_shape + (p.num_vertices, p.channels)
    return HiddenState(Tensor(np.zeros(shape, dtype=p.pos_embed.data.dtype)), 0)


def encode_vertices(p: CellParams, x: Tensor) -> Tensor:
    """Self-gated projection of frame features plus the position encoding."""
    if x.shape[-2] != p.num_vertices:
        raise DimensionError(f"frame has {x.shape[-2]} vertices, position encoding has {p.num_vertices}")
    xb = linear(p.message_mlp, x)
    return ad.add(ad.mul(ad.sigmoid(xb), xb), p.pos_embed)


def message_step(p: CellParams, e: Tensor, h_prev: Tensor, adj: Tensor | None = None) -> Tensor:
    g = linear(p.fuse, ad.concat([e, h_prev], axis=-1))
    return sablock(p.msg_block, g, adj)


def update_step(p: CellParams, e: Tensor, m: Tensor) -> Tensor:
    """Stack vertices and messages as 2N tokens, attend, keep one half, squash with tanh."""
    n = e.shape[-2]
    u_full = sablock(p.upd_block, ad.concat([e, m], axis=-2))
    if p.update_take == "message_half":
        u = ad.slice_axis(u_full, n, 2 * n, axis=-2)
    else:
        u = ad.slice_axis(u_full, 0, n, axis=-2)
    return ad.tanh(u)


def readout(p: CellParams, h: Tensor, cls_tokens: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """Decode ``h``; class tokens, when given, are prepended as extra attention rows."""
    z = linear(p.readout_proj, h)
    if cls_tokens is None:
        return sablock(p.readout_block, z), None
    k = cls_tokens.shape[-2]
    out = sablock(p.readout_block, ad.concat([cls_tokens, z], axis=-2))
    rows = out.shape[-2]
    return ad.slice_axis(out, k, rows, axis=-2), ad.slice_axis(out, 0, k, axis=-2)


def _frame_list(frames) -> list[Tensor]:
    if isinstance(frames, Tensor):
        if frames.ndim < 3:
            raise DimensionError(f"frames tensor must be (..., T, N, C_in), got {frames.shape}")
        t_axis = frames.ndim - 3
        return [
            ad.reshape(ad.slice_axis(frames, t, t + 1, axis=t_axis), frames.shape[:t_axis] + frames.shape[t_axis + 1 :])
            for t in range(frames.shape[t_axis])
        ]
    if isinstance(frames, np.ndarray):
        return [Tensor(frames[..., t, :, :]) for t in range(frames.shape[-3])]
    return [f if isinstance(f, Tensor) else Tensor(f) for f in frames]


def run_sequence(
    p: CellParams,
    frames,
    strategy: EdgeStrategy,
    readout_steps: Sequence[int] | set[int] = (),
    trace: list | None = None,
) -> list[tuple[Tensor, Tensor | None]]:
    """Step the cell over ``frames`` and return readouts at ``readout_steps`` in step order.

    ``frames`` is a sequence of ``(..., N, C_in)`` tensors or one
    ``(..., T, N, C_in)`` array.  Under class-token projection the readout
    runs at every step, because the tokens it emits at step t-1 define the
    adjacency at step t.  When ``trace`` is a list, one dict per step with
    the vertex encoding and adjacency is appended to it.
    """
    xs = _frame_list(frames)
    if not xs:
        raise ContractError("run_sequence needs at least one frame")
    steps = set(readout_steps)
    bad = [s for s in steps if not 0 <= s < len(xs)]
    if bad:
        raise ContractError(f"readout steps {sorted(bad)} out of range for {len(xs)} frames")
    dtype = p.pos_embed.data.dtype
    xs = [x if x.data.dtype == dtype else Tensor(x.data.astype(dtype)) for x in xs]

    batch_shape = xs[0].shape[:-2]
    state = init_state(p, batch_shape)
    ctp = isinstance(strategy, ClassTokenProjection)
    tokens = initial_tokens(strategy.ctp, batch_shape) if ctp else None
    outputs = []
    for t, x in enumerate(xs):
        e = encode_vertices(p, x)
        adj = adjacency_for_step(strategy, e, tokens)
        if trace is not None:
            trace.append({"step": t, "e": e, "adjacency": adj, "tokens": tokens})
        m = message_step(p, e, state.h, adj)
        state = HiddenState(update_step(p, e, m), t + 1)
        if t in steps or ctp:
            y, cls_out = readout(p, state.h, tokens)
            tokens = cls_out if ctp else None
            if t in steps:
                outputs.append((y, cls_out))
    return outputs
