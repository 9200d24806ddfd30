"""Command-line entry point: ``gen-data``, ``train``, ``eval``, ``gradcheck``, ``inspect``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from .anticipation import AnticipationConfig, anticipation_loss, evaluate, forward_batch, sample_frames, usable_segments
from .autodiff import Tensor, grad_check_leaves, no_grad
from .config import ConfigError, RunConfig
from .data import FeatureFormatError, gen_dataset, load_features, save_features, split
from .edges import ClassTokenProjection, Implicit, TemplateBank, ctp_projections, tb_selector
from .training import Optimizer, TrainingDiverged, train

GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


def _limit_threads(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(1)


def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    if args.deterministic:
        cfg.run.deterministic = True
    return cfg


def _dataset(cfg: RunConfig, path: str | None = None):
    """Segments from a feature file, or freshly generated from the ``data`` section."""
    path = path or cfg.dataset.path
    if path:
        segs = load_features(path)
        n, c = segs[0].frames.shape[1:] if segs else (cfg.data.num_vertices, cfg.data.feature_dim)
        if (n, c) != (cfg.data.num_vertices, cfg.data.feature_dim):
            raise UsageError(
                f"data dims (N={n}, C_in={c}) do not match model dims "
                f"(N={cfg.data.num_vertices}, C_in={cfg.data.feature_dim})"
            )
    else:
        segs = gen_dataset(cfg.data, cfg.dataset.count)
    return usable_segments(segs, cfg.anticipation, cfg.data.fps)


def _splits(cfg: RunConfig, segs):
    vf = cfg.dataset.val_fraction
    return split(segs, (1.0 - vf, vf), seed=cfg.data.seed)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    if args.count is not None:
        cfg.dataset.count = args.count
    out = args.out or cfg.dataset.path or "features.urmf"
    segs = gen_dataset(cfg.data, cfg.dataset.count)
    save_features(out, segs)
    print(f"wrote {len(segs)} segments to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out:
        cfg.run.out = args.out
    if args.strategy:
        cfg.model.strategy = args.strategy
    if args.lr is not None:
        cfg.optim.lr = args.lr
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
    if args.data:
        cfg.dataset.path = args.data
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out / "config.txt")

    train_set, val_set = _splits(cfg, _dataset(cfg))
    model = ckpt.model_from_config(cfg)
    opt = Optimizer(model.named_parameters(), cfg.optim)
    ckpt_path = out / "checkpoint.urm"
    ckpt.save_checkpoint(out / "initial.urm", model, cfg, opt, 0)

    with open(out / "train.log", "w") as log:

        def on_line(line):
            log.write(line + "\n")

        def on_epoch(epoch, result):
            if (epoch + 1) % max(1, cfg.run.checkpoint_every) == 0:
                ckpt.save_checkpoint(ckpt_path, model, cfg, opt, opt.t)
            log.flush()

        try:
            result = train(
                model, train_set, cfg.optim, cfg.anticipation, cfg.data.fps,
                val_set=val_set, seed=cfg.run.seed, optimizer=opt, on_line=on_line, on_epoch=on_epoch,
            )
        except TrainingDiverged as exc:
            print(f"error: training diverged at step {exc.step} (loss {exc.loss})", file=sys.stderr)
            return 1
    ckpt.save_checkpoint(ckpt_path, model, cfg, opt, opt.t)
    print(f"trained {result.steps} steps; checkpoint {ckpt_path}")
    if result.reports:
        print(result.reports[-1].table())
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    cfg, model, _, _ = ckpt.load_checkpoint(args.checkpoint)
    if args.data:
        segs = usable_segments(load_features(args.data), cfg.anticipation, cfg.data.fps)
        if segs:
            n, c = segs[0].frames.shape[1:]
            if (n, c) != (model.num_vertices, model.input_dim):
                raise UsageError(
                    f"dimension mismatch: checkpoint expects (N={model.num_vertices}, C_in={model.input_dim}), "
                    f"data has (N={n}, C_in={c})"
                )
    else:
        _, segs = _splits(cfg, _dataset(cfg))
    if not segs:
        raise UsageError("no segments to evaluate")
    report = evaluate(model, segs, cfg.anticipation, cfg.data.fps)
    print(report.table())
    lines = report.lines()
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def gradcheck_config(cfg: RunConfig) -> RunConfig:
    """Shrink a config to toy double-precision dims (N<=8, C<=16, T<=3)."""
    cfg = copy.deepcopy(cfg)
    if cfg.data.num_vertices > 8:
        cfg.data.grid_h, cfg.data.grid_w = 2, 2
    if cfg.model.channels > 16:
        cfg.model.channels, cfg.model.heads = 8, 2
    if cfg.model.channels % cfg.model.heads:
        cfg.model.heads = 1
    cfg.data.feature_dim = min(cfg.data.feature_dim, 8)
    cfg.data.nouns = min(cfg.data.nouns, cfg.data.num_vertices)
    cfg.model.bank_size = min(cfg.model.bank_size, 4)
    cfg.model.precision = "double"
    cfg.data.observed, cfg.data.seq_len = 3, 4
    cfg.anticipation = AnticipationConfig(num_frames=3, stride_s=cfg.anticipation.stride_s,
                                          intervals_s=tuple(cfg.anticipation.stride_s * k for k in (3, 2, 1)))
    cfg.dataset.actions = 0
    return cfg


def run_gradcheck(cfg: RunConfig, batch: int = 2) -> dict[str, float]:
    """Max relative error per parameter group for the full model loss."""
    cfg = gradcheck_config(cfg)
    model = ckpt.model_from_config(cfg)
    segs = gen_dataset(cfg.data, batch)
    frames = np.stack([sample_frames(s, cfg.anticipation, cfg.data.fps) for s in segs])
    labels = tuple(np.array([getattr(s, k) for s in segs]) for k in ("verb", "noun", "action"))

    def loss():
        return anticipation_loss(forward_batch(model, frames, cfg.anticipation), labels)

    errs = grad_check_leaves(loss, model.named_parameters(), eps=1e-5)
    groups: dict[str, float] = {}
    for name, e in errs.items():
        parts = name.split(".")
        key = ".".join(parts[:2])
        groups[key] = max(groups.get(key, 0.0), e)
    return groups


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.strategy:
        cfg.model.strategy = args.strategy
    groups = run_gradcheck(cfg)
    worst = max(groups.values())
    for name, e in groups.items():
        print(f"{name:<28} {e:.3e} {'ok' if e < GRADCHECK_TOL else 'FAIL'}")
    print(f"max relative error {worst:.3e} ({cfg.model.strategy})")
    return 0 if worst < GRADCHECK_TOL else 1


def _write_csv(path: Path, mat) -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in mat) + "\n")


def inspect_segment(model, cfg: RunConfig, seg, out: Path) -> list[Path]:
    """Dump per-step adjacency, its row softmax, and selector weights or token projections."""
    if isinstance(model.strategy, Implicit):
        raise UsageError("no explicit edges: checkpoint uses the implicit strategy")
    out.mkdir(parents=True, exist_ok=True)
    frames = Tensor(sample_frames(seg, cfg.anticipation, cfg.data.fps)[None].astype(model.dtype))
    trace: list = []
    with no_grad():
        model.forward(frames, [], trace=trace)
        written = []
        extra: dict[str, list] = {}
        for rec in trace:
            t = rec["step"]
            adj = rec["adjacency"].data[0]
            soft = np.exp(adj - adj.max(axis=-1, keepdims=True))
            soft /= soft.sum(axis=-1, keepdims=True)
            for stem, mat in (("adjacency", adj), ("softmax_adjacency", soft)):
                p = out / f"{stem}_t{t:02d}.csv"
                _write_csv(p, mat)
                written.append(p)
            if isinstance(model.strategy, TemplateBank):
                extra.setdefault("selector", []).append(tb_selector(model.strategy.bank, rec["e"]).data[0])
            elif isinstance(model.strategy, ClassTokenProjection):
                ctp = model.strategy.ctp
                for role, vec in zip(ctp.roles, ctp_projections(ctp, rec["tokens"])):
                    extra.setdefault(f"ctp_{role}", []).append(vec.data[0])
        for stem, rows in extra.items():
            p = out / f"{stem}.csv"
            _write_csv(p, np.stack(rows))
            written.append(p)
    return written


def cmd_inspect(args) -> int:
    if not args.checkpoint:
        raise UsageError("inspect needs --checkpoint")
    cfg, model, _, _ = ckpt.load_checkpoint(args.checkpoint)
    if isinstance(model.strategy, Implicit):
        raise UsageError("no explicit edges: checkpoint uses the implicit strategy")
    segs = load_features(args.data) if args.data else gen_dataset(cfg.data, cfg.dataset.count)
    if args.segment:
        match = [s for s in segs if s.id == args.segment]
        if not match:
            raise UsageError(f"segment {args.segment!r} not found")
        seg = match[0]
    else:
        seg = segs[0]
    written = inspect_segment(model, cfg, seg, Path(args.out or "inspect"))
    print(f"wrote {len(written)} files for segment {seg.id} to {args.out or 'inspect'}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible numerics")
    common.add_argument("--out", metavar="PATH")

    p = argparse.ArgumentParser(prog="urm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic feature file")
    g.add_argument("--count", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--strategy", choices=("implicit", "tb", "ctp"))
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--data", metavar="PATH", help="feature file (default: synthetic per config)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", metavar="PATH")
    e.add_argument("--data", metavar="PATH")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check at toy dims")
    c.add_argument("--strategy", choices=("implicit", "tb", "ctp"))
    c.set_defaults(fn=cmd_gradcheck)

    i = sub.add_parser("inspect", parents=[common], help="dump explicit adjacencies for one segment")
    i.add_argument("--checkpoint", metavar="PATH")
    i.add_argument("--data", metavar="PATH")
    i.add_argument("--segment", metavar="ID")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _limit_threads(args.deterministic):
            return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FeatureFormatError, ckpt.CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
