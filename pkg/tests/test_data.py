import numpy as np
import pytest

from gpsft.data import (
    Dataset,
    SynthSpec,
    balanced_batches,
    load_csv,
    load_idx,
    shuffled_batches,
    stratified_split,
    synth_task,
    write_idx,
)
from gpsft.errors import ConfigError, FormatError, InputError


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(generator="moons", dim=2, classes=2, per_class=10)
    with pytest.raises(ConfigError):
        SynthSpec(generator="gaussian-blobs", dim=2, classes=2, per_class=10, noise=0.6)
    with pytest.raises(ConfigError):
        SynthSpec(generator="xor-grid", dim=2, classes=8, per_class=10)


def test_split_sizes_and_stratification():
    tr, va, te = synth_task(SynthSpec(generator="gaussian-blobs", dim=4, classes=3, per_class=50, seed=1))
    assert (len(tr.y), len(va.y), len(te.y)) == (90, 30, 30)
    for c in range(3):
        assert int(np.sum(tr.y == c)) == 30
        assert int(np.sum(va.y == c)) == 10
        assert int(np.sum(te.y == c)) == 10


def test_split_proportions_within_one():
    ds = Dataset(np.zeros((31, 2)), np.array([0] * 17 + [1] * 14), 2, "all")
    tr, va, te = stratified_split(ds, 0)
    for c, n in ((0, 17), (1, 14)):
        got = int(np.sum(tr.y == c))
        assert abs(got - 0.6 * n) <= 1.0


def test_standardization_from_train_stats():
    tr, va, te = synth_task(SynthSpec(generator="gaussian-blobs", dim=5, classes=2, per_class=40, seed=3))
    assert np.allclose(tr.x.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(tr.x.std(axis=0), 1.0, atol=1e-9)
    # val/test use the train stats, so they are close to but not exactly unit
    assert not np.allclose(va.x.mean(axis=0), 0.0, atol=1e-12)


def test_generators_are_deterministic():
    spec = SynthSpec(generator="two-rings", dim=3, classes=2, per_class=20, seed=9)
    a = synth_task(spec)
    b = synth_task(spec)
    for da, db in zip(a, b):
        assert np.array_equal(da.x, db.x) and np.array_equal(da.y, db.y)


def test_two_rings_radii():
    spec = SynthSpec(generator="two-rings", dim=2, classes=2, per_class=200, seed=2)
    tr, va, te = synth_task(spec)
    # standardization preserves ring ordering: class-1 radius > class-0
    r0 = np.linalg.norm(tr.x[tr.y == 0], axis=1).mean()
    r1 = np.linalg.norm(tr.x[tr.y == 1], axis=1).mean()
    assert r1 > r0


def test_xor_grid_labels_match_cells():
    spec = SynthSpec(generator="xor-grid", dim=2, classes=2, per_class=50, seed=4)
    from gpsft.data import _generate

    x, y = _generate(spec)
    want = (np.floor(x[:, 0]) + np.floor(x[:, 1])).astype(int) % 2
    assert np.array_equal(want, y)


def test_label_noise_flip_rate():
    spec = SynthSpec(generator="gaussian-blobs", dim=2, classes=3, per_class=600, noise=0.2, seed=5)
    clean = SynthSpec(generator="gaussian-blobs", dim=2, classes=3, per_class=600, noise=0.0, seed=5)
    from gpsft.data import _generate

    _, yn = _generate(spec)
    _, yc = _generate(clean)
    rate = float(np.mean(yn != yc))
    sigma = np.sqrt(0.2 * 0.8 / 1800)
    assert abs(rate - 0.2) < 5 * sigma


def test_dataset_arrays_read_only():
    tr, _, _ = synth_task(SynthSpec(generator="gaussian-blobs", dim=2, classes=2, per_class=10, seed=0))
    with pytest.raises(ValueError):
        tr.x[0, 0] = 1.0


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    x = rng.random((12, 49))
    y = rng.integers(0, 4, size=12)
    ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
    write_idx(ip, lp, x, y, 7, 7)
    ds = load_idx(ip, lp)
    assert ds.x.shape == (12, 49)
    assert np.array_equal(ds.y, y)
    assert np.max(np.abs(ds.x - x)) <= 0.5 / 255  # one quantization step
    # bytes are stable across rewrites
    write_idx(tmp_path / "im2.idx", tmp_path / "lb2.idx", x, y, 7, 7)
    assert (tmp_path / "im.idx").read_bytes() == (tmp_path / "im2.idx").read_bytes()


def test_idx_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 16)
    lp = tmp_path / "lb.idx"
    lp.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        load_idx(p, lp)


def test_idx_rejects_truncation(tmp_path):
    rng = np.random.default_rng(1)
    ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
    write_idx(ip, lp, rng.random((4, 4)), np.zeros(4, dtype=int), 2, 2)
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_idx(ip, lp)


def test_idx_rejects_count_mismatch(tmp_path):
    rng = np.random.default_rng(1)
    ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
    write_idx(ip, lp, rng.random((4, 4)), np.zeros(4, dtype=int), 2, 2)
    ip2, lp2 = tmp_path / "im2.idx", tmp_path / "lb2.idx"
    write_idx(ip2, lp2, rng.random((5, 4)), np.zeros(5, dtype=int), 2, 2)
    with pytest.raises(FormatError):
        load_idx(ip, lp2)


def test_csv_loader(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("f1,f2,label\n1.0,2.0,cat\n3.5,4.0,dog\n5.0,6.5,cat\n")
    ds = load_csv(p, label_col=-1, header=True)
    assert ds.x.shape == (3, 2)
    # labels densify in first-appearance order: cat=0, dog=1
    assert ds.y.tolist() == [0, 1, 0]
    assert ds.classes == 2


def test_csv_label_col_zero(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,0.5,0.25\n0,1.5,2.5\n")
    ds = load_csv(p, label_col=0)
    assert ds.x.shape == (2, 2)
    assert ds.y.tolist() == [0, 1]


def test_csv_positioned_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1.0,2.0,a\n3.0,b\n")
    with pytest.raises(FormatError, match="line 2"):
        load_csv(p)
    p.write_text("1.0,x,a\n")
    with pytest.raises(FormatError, match="line 1"):
        load_csv(p)


def _batch_partition(batches, n):
    seen = sorted(i for b in batches for i in b)
    assert seen == list(range(n))


def test_balanced_batches_properties():
    tr, _, _ = synth_task(SynthSpec(generator="gaussian-blobs", dim=2, classes=3, per_class=30, seed=6))
    batches = balanced_batches(tr, 12, seed=1)
    _batch_partition(batches, len(tr.y))
    # every class appearing in a batch appears at least twice, bar one
    # possible odd singleton per class
    for b in batches:
        labels = tr.y[b]
        counts = {c: int(np.sum(labels == c)) for c in set(labels.tolist())}
        singles = [c for c, n in counts.items() if n == 1]
        assert len(singles) == 0  # 18 per class per split is even


def test_balanced_batches_determinism():
    tr, _, _ = synth_task(SynthSpec(generator="gaussian-blobs", dim=2, classes=3, per_class=20, seed=6))
    a = balanced_batches(tr, 8, seed=4)
    b = balanced_batches(tr, 8, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_balanced_batches_rejects_small_batch():
    tr, _, _ = synth_task(SynthSpec(generator="gaussian-blobs", dim=2, classes=2, per_class=10, seed=0))
    with pytest.raises(ConfigError):
        balanced_batches(tr, 3, seed=0)


def test_balanced_batches_rejects_singleton_class():
    ds = Dataset(np.zeros((5, 2)), np.array([0, 0, 0, 0, 1]), 2, "t")
    with pytest.raises(InputError):
        balanced_batches(ds, 4, seed=0)


def test_shuffled_batches_partition():
    tr, _, _ = synth_task(SynthSpec(generator="gaussian-blobs", dim=2, classes=2, per_class=25, seed=2))
    batches = shuffled_batches(tr, 8, seed=3)
    _batch_partition(batches, len(tr.y))
