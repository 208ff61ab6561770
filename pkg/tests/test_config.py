import pytest

from gpsft import config as cf
from gpsft.errors import ConfigError


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_fill_in(tmp_path):
    cfg = cf.load_config(write(tmp_path, "seed = 4\n"))
    assert cfg["model.arch"] == "mlp"
    assert cfg["train.epochs"] == 50
    assert cfg["select.k"] == 1


def test_stage_seeds_inherit_global(tmp_path):
    cfg = cf.load_config(write(tmp_path, "seed = 7\ntrain.seed = 2\n"))
    assert cfg["train.seed"] == 2
    assert cfg["model.seed"] == 7
    assert cfg["select.seed"] == 7


def test_comments_and_blanks_ignored(tmp_path):
    cfg = cf.load_config(write(tmp_path, "# a comment\n\nseed = 1\n"))
    assert cfg["seed"] == 1


def test_unknown_key_rejected_with_line(tmp_path):
    with pytest.raises(ConfigError, match=":2"):
        cf.load_config(write(tmp_path, "seed = 1\nselct.k = 2\n"))


def test_duplicate_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="duplicate"):
        cf.load_config(write(tmp_path, "seed = 1\nseed = 2\n"))


def test_bad_value_positioned(tmp_path):
    with pytest.raises(ConfigError, match=":1"):
        cf.load_config(write(tmp_path, "train.lr = fast\n"))


def test_enum_values_validated(tmp_path):
    with pytest.raises(ConfigError, match="model.arch"):
        cf.load_config(write(tmp_path, "model.arch = resnet\n"))
    with pytest.raises(ConfigError, match="select.strategy"):
        cf.load_config(write(tmp_path, "select.strategy = alphabetical\n"))


def test_overrides_win(tmp_path):
    p = write(tmp_path, "seed = 1\nselect.k = 2\n")
    cfg = cf.load_config(p, overrides={"select.k": 9, "seed": None})
    assert cfg["select.k"] == 9
    assert cfg["seed"] == 1  # None means "not overridden"


def test_resolved_round_trip(tmp_path):
    p = write(tmp_path, "seed = 3\nmodel.input = 1x8x8\nmodel.arch = cnn\nmodel.hidden = 32\n")
    cfg = cf.load_config(p)
    rp = tmp_path / "resolved.cfg"
    cf.write_resolved(cfg, rp)
    assert cf.load_config(rp) == cfg
    # byte-stable
    assert cf.resolved_text(cf.load_config(rp)) == rp.read_text()


def test_factories(tmp_path):
    p = write(
        tmp_path,
        "model.arch = tiny-transformer\nmodel.input = 16\nmodel.dim = 8\nmodel.heads = 2\nseed = 5\n",
    )
    cfg = cf.load_config(p)
    spec = cf.model_spec(cfg)
    assert spec.arch == "tiny-transformer" and spec.dim == 8 and spec.seed == 5
    tc = cf.train_config(cfg)
    assert tc.seed == 5
    sc = cf.selection_config(cfg, strategy="magnitude", k=4)
    assert sc.strategy == "magnitude" and sc.k == 4


def test_load_task_synth(tmp_path):
    p = write(tmp_path, "data.dim = 4\ndata.classes = 2\ndata.per_class = 20\n")
    tr, va, te = cf.load_task(cf.load_config(p))
    assert tr.x.shape[1] == 4
    assert (len(tr.y), len(va.y), len(te.y)) == (24, 8, 8)


def test_load_task_csv(tmp_path):
    rows = ["%f,%f,%d" % (i * 0.5, i * 0.25, i % 2) for i in range(40)]
    csv = tmp_path / "d.csv"
    csv.write_text("\n".join(rows) + "\n")
    p = write(tmp_path, f"data.source = csv\ndata.csv = {csv}\n")
    tr, va, te = cf.load_task(cf.load_config(p))
    assert len(tr.y) + len(va.y) + len(te.y) == 40


def test_load_task_idx(tmp_path):
    import numpy as np

    from gpsft.data import write_idx

    rng = np.random.default_rng(0)
    ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
    write_idx(ip, lp, rng.random((30, 16)), rng.integers(0, 2, size=30), 4, 4)
    p = write(tmp_path, f"data.source = idx\ndata.images = {ip}\ndata.labels = {lp}\n")
    tr, va, te = cf.load_task(cf.load_config(p))
    assert len(tr.y) + len(va.y) + len(te.y) == 30


def test_load_task_missing_paths(tmp_path):
    p = write(tmp_path, "data.source = idx\n")
    with pytest.raises(ConfigError):
        cf.load_task(cf.load_config(p))
