#!/usr/bin/env python3
# coding: utf-8

# # Feature files, checkpoints and the command line
#
# Features travel in a small binary container with a CSV of labels beside it.
# Checkpoints use a similar named-tensor container that also echoes the run
# configuration, so a checkpoint alone is enough to rebuild its model.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from urm import checkpoint as ckpt
from urm import cli
from urm.config import RunConfig, dumps
from urm.data import SyntheticConfig, annotations_path, gen_dataset, load_features, save_features

work = Path(tempfile.mkdtemp(prefix="urm-demo-"))


# ## Feature files

# In[2]:

segs = gen_dataset(SyntheticConfig(grid_h=2, grid_w=2, feature_dim=6, verbs=3, nouns=2), 5)
path = work / "toy.urmf"
save_features(path, segs)
print(path.read_bytes()[:4], path.stat().st_size, "bytes")
print(annotations_path(path).read_text())

back = load_features(path)
print("bit exact:", all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(segs, back)))


# Damage is reported with the byte offset where parsing stopped.

# In[3]:

path.write_bytes(path.read_bytes()[:-7])
try:
    load_features(path)
except ValueError as exc:
    print(exc)


# ## Configuration
#
# Configs are flat `section.key = value` text. Unknown keys are errors.

# In[4]:

cfg_text = """\
data.grid_h = 2
data.grid_w = 2
data.feature_dim = 6
data.verbs = 3
data.nouns = 2
model.channels = 8
model.heads = 2
model.strategy = tb
model.bank_size = 4
dataset.count = 40
optim.epochs = 2
optim.batch_size = 8
optim.lr = 0.003
"""
(work / "toy.cfg").write_text(cfg_text)
print(dumps(RunConfig())[:200], "...")


# ## The command line
#
# The same flows are available as `urm <command>` (or `python -m urm`). Here
# we call the entry point in-process.

# In[5]:

run = work / "run"
cli.main(["train", "--config", str(work / "toy.cfg"), "--deterministic", "--seed", "3", "--out", str(run)])
print(sorted(p.name for p in run.iterdir()))

# In[6]:

cli.main(["eval", "--checkpoint", str(run / "checkpoint.urm"), "--out", str(work / "eval.csv")])

# In[7]:

cli.main(["inspect", "--checkpoint", str(run / "checkpoint.urm"), "--out", str(work / "inspect")])
sel = np.loadtxt(work / "inspect" / "selector.csv", delimiter=",")
print("selector weights per step:\n", sel.round(3))


# ## Checkpoints
#
# Loading rebuilds the model from the echoed config and restores every
# parameter bit for bit.

# In[8]:

cfg, model, tensors, step = ckpt.load_checkpoint(run / "checkpoint.urm")
print("step", step, "strategy", cfg.model.strategy, "tensors", len(tensors))
print(work)
