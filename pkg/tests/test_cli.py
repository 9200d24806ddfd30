import math
import subprocess
import sys

import numpy as np
import pytest

from urm import checkpoint as ckpt
from urm import cli
from urm import config as cf
from urm.data import load_features

TINY = """\
data.grid_h = 2
data.grid_w = 2
data.feature_dim = 6
data.verbs = 3
data.nouns = 2
model.channels = 8
model.heads = 2
model.bank_size = 4
dataset.count = 12
dataset.val_fraction = 0.25
optim.epochs = 1
optim.batch_size = 4
optim.lr = 0.001
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# ---------------------------------------------------------------- gen-data


def test_gen_data_round_trip_and_determinism(tmp_path, tiny, capsys):
    a, b = tmp_path / "a.urmf", tmp_path / "b.urmf"
    assert cli.main(["gen-data", "--config", str(tiny), "--seed", "3", "--out", str(a)]) == 0
    assert cli.main(["gen-data", "--config", str(tiny), "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(load_features(a)) == 12
    c = tmp_path / "c.urmf"
    cli.main(["gen-data", "--config", str(tiny), "--seed", "4", "--out", str(c)])
    assert a.read_bytes() != c.read_bytes()


def test_invalid_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.widht = 3\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "model.widht" in capsys.readouterr().err


def test_missing_feature_file_exits_1(tmp_path, tiny, capsys):
    code = cli.main(["train", "--config", str(tiny), "--data", str(tmp_path / "none.urmf"),
                     "--out", str(tmp_path / "r")])
    assert code == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "urm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout


# ---------------------------------------------------------------- train


@pytest.mark.parametrize("strategy", ["implicit", "tb", "ctp"])
def test_train_smoke(tmp_path, tiny, strategy, capsys):
    out = tmp_path / strategy
    assert cli.main(["train", "--config", str(tiny), "--strategy", strategy, "--out", str(out)]) == 0
    for name in ("config.txt", "initial.urm", "checkpoint.urm", "train.log"):
        assert (out / name).exists(), name
    log = (out / "train.log").read_text().splitlines()
    steps = [line.split(",") for line in log if not line.startswith("eval,")]
    assert [int(r[1]) for r in steps] == [1, 2, 3] and all(r[0] == "0" for r in steps)
    assert sum(line.startswith("eval,") for line in log) == 8 * 9
    cfg, model, _, step = ckpt.load_checkpoint(out / "checkpoint.urm")
    assert cfg.model.strategy == strategy and step == 3


def test_train_from_feature_file(tmp_path, tiny, capsys):
    feats = tmp_path / "f.urmf"
    cli.main(["gen-data", "--config", str(tiny), "--out", str(feats)])
    assert cli.main(["train", "--config", str(tiny), "--data", str(feats), "--out", str(tmp_path / "r")]) == 0


def test_train_deterministic_checkpoints(tmp_path, tiny, capsys):
    # same out dir both times: the checkpoint echoes the config, including run.out
    out = tmp_path / "run"
    args = ["train", "--config", str(tiny), "--deterministic", "--seed", "7", "--strategy", "ctp",
            "--epochs", "2", "--out", str(out)]
    blobs = []
    for _ in range(2):
        assert cli.main(args) == 0
        blobs.append((out / "checkpoint.urm").read_bytes())
    assert blobs[0] == blobs[1]


def test_zero_lr_keeps_initial_params(tmp_path, tiny, capsys):
    out = tmp_path / "r"
    assert cli.main(["train", "--config", str(tiny), "--lr", "0", "--strategy", "tb", "--out", str(out)]) == 0
    init = ckpt.read_tensors(out / "initial.urm")
    final = ckpt.read_tensors(out / "checkpoint.urm")
    names = [k for k in init if k.startswith("param/")]
    assert names
    for k in names:
        assert init[k].tobytes() == final[k].tobytes(), k


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(tmp_path, tiny, capsys):
    cfg_path = tmp_path / "hot.cfg"
    cfg_path.write_text(TINY + "optim.name = sgd\noptim.lr = 1e30\noptim.weight_decay = 0.0\n")
    assert cli.main(["train", "--config", str(cfg_path), "--epochs", "3", "--out", str(tmp_path / "r")]) == 1
    assert "diverged at step" in capsys.readouterr().err


# ---------------------------------------------------------------- eval


@pytest.fixture
def trained(tmp_path, tiny):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--strategy", "tb", "--out", str(out)])
    return out / "checkpoint.urm"


def test_eval_rows_and_repeatability(tmp_path, trained, capsys):
    capsys.readouterr()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["eval", "--checkpoint", str(trained), "--out", str(a)]) == 0
    assert cli.main(["eval", "--checkpoint", str(trained), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = a.read_text().splitlines()
    assert len({r.split(",")[1] for r in rows}) == 8
    assert {r.split(",")[2] for r in rows} >= {"action_top1", "action_top5", "action_recall5"}
    table = capsys.readouterr().out
    assert "2.00" in table and "0.25" in table


def test_eval_dimension_mismatch_names_both(tmp_path, trained, capsys):
    other = tmp_path / "other.cfg"
    other.write_text(TINY.replace("data.feature_dim = 6", "data.feature_dim = 5"))
    feats = tmp_path / "o.urmf"
    cli.main(["gen-data", "--config", str(other), "--out", str(feats)])
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(feats)]) == 2
    err = capsys.readouterr().err
    assert "C_in=6" in err and "C_in=5" in err


@pytest.mark.parametrize("seed", [0, 1])
def test_random_model_is_at_chance(tmp_path, seed, capsys):
    cfg = cf.RunConfig()
    cfg.dataset.count = 1000
    cfg.run.seed = seed
    path = tmp_path / "random.urm"
    ckpt.save_checkpoint(path, ckpt.model_from_config(cfg), cfg)
    out = tmp_path / "r.csv"
    assert cli.main(["eval", "--checkpoint", str(path), "--out", str(out)]) == 0
    rows = {(r.split(",")[1], r.split(",")[2]): float(r.split(",")[3]) for r in out.read_text().splitlines()}
    n, p = 200, 1 / 25
    se = math.sqrt(p * (1 - p) / n)
    assert abs(rows["1.00", "action_top1"] - p) <= 3 * se


# ---------------------------------------------------------------- gradcheck


@pytest.mark.parametrize("strategy", ["implicit", "tb", "ctp"])
def test_gradcheck_passes(strategy, capsys):
    assert cli.main(["gradcheck", "--strategy", strategy]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    groups = {line.split()[0] for line in out.splitlines()[:-1]}
    if strategy == "tb":
        assert {"edges.templates", "edges.selector1", "edges.selector2"} <= groups
    if strategy == "ctp":
        assert {"edges.cls_verb", "edges.cls_noun", "edges.proj_verb", "edges.proj_noun"} <= groups


def test_gradcheck_config_is_toy():
    cfg = cli.gradcheck_config(cf.RunConfig())
    assert cfg.data.num_vertices <= 8 and cfg.model.channels <= 16 and cfg.anticipation.num_frames <= 3
    assert cfg.model.precision == "double"


# ---------------------------------------------------------------- inspect


def test_inspect_tb_single_template_is_constant(tmp_path, tiny, capsys):
    run = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--strategy", "tb", "--out", str(run)])
    cfg = cf.load(run / "config.txt")
    cfg.model.bank_size = 1
    one = tmp_path / "s1.urm"
    ckpt.save_checkpoint(one, ckpt.model_from_config(cfg), cfg)
    dump = tmp_path / "dump"
    assert cli.main(["inspect", "--checkpoint", str(one), "--out", str(dump)]) == 0
    mats = [np.loadtxt(p, delimiter=",") for p in sorted(dump.glob("adjacency_t*.csv"))]
    assert len(mats) == 14
    for m in mats[1:]:
        assert np.array_equal(m, mats[0])
    sel = np.loadtxt(dump / "selector.csv", delimiter=",")
    np.testing.assert_allclose(sel, 1.0)


def test_inspect_tb_selector_rows(tmp_path, trained, capsys):
    dump = tmp_path / "dump"
    assert cli.main(["inspect", "--checkpoint", str(trained), "--out", str(dump)]) == 0
    sel = np.loadtxt(dump / "selector.csv", delimiter=",")
    assert sel.shape == (14, 4)
    np.testing.assert_allclose(sel.sum(axis=1), 1.0, atol=1e-6)
    soft = np.loadtxt(dump / "softmax_adjacency_t05.csv", delimiter=",")
    np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-12)


def test_inspect_ctp_is_rank_one(tmp_path, tiny, capsys):
    run = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--strategy", "ctp", "--out", str(run)])
    dump = tmp_path / "dump"
    assert cli.main(["inspect", "--checkpoint", str(run / "checkpoint.urm"), "--segment", "syn000003",
                     "--out", str(dump)]) == 0
    v = np.loadtxt(dump / "ctp_verb.csv", delimiter=",")
    n = np.loadtxt(dump / "ctp_noun.csv", delimiter=",")
    for t in (0, 7, 13):
        adj = np.loadtxt(dump / f"adjacency_t{t:02d}.csv", delimiter=",")
        assert np.linalg.matrix_rank(adj, tol=1e-6) <= 1
        np.testing.assert_allclose(adj, np.outer(v[t], n[t]), atol=1e-6)


def test_inspect_implicit_errors(tmp_path, tiny, capsys):
    run = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--strategy", "implicit", "--out", str(run)])
    capsys.readouterr()
    assert cli.main(["inspect", "--checkpoint", str(run / "checkpoint.urm"), "--out", str(tmp_path / "d")]) == 2
    assert "no explicit edges" in capsys.readouterr().err


def test_inspect_unknown_segment(tmp_path, trained, capsys):
    assert cli.main(["inspect", "--checkpoint", str(trained), "--segment", "nope", "--out", str(tmp_path / "d")]) == 2
