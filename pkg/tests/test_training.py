import numpy as np
import pytest

from gpsft.data import SynthSpec, synth_task
from gpsft.errors import ConfigError, ContractError, NumericError
from gpsft.models import ModelSpec, build_model
from gpsft.selection import SelectionConfig, bias_mask, build_mask, full_mask, linear_mask
from gpsft.training import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    TrainConfig,
    evaluate,
    finetune,
    lr_at,
    make_state,
    masked_step,
)


def task(seed=5):
    return synth_task(
        SynthSpec(generator="gaussian-blobs", dim=6, classes=3, per_class=30, seed=seed)
    )


def model(seed=11):
    return build_model(ModelSpec(arch="mlp", input_shape=(6,), classes=3, hidden=(16, 8), seed=seed))


# ---------------------------------------------------------------- schedule


def test_lr_schedule_shape():
    cfg = TrainConfig(base_lr=0.01, epochs=10, warmup_epochs=2)
    total = 100
    warm = total * 2 // 10
    assert lr_at(0, total, cfg) == 0.01 * 1 / warm
    assert abs(lr_at(warm // 2 - 1, total, cfg) - 0.005) < 1e-15
    assert lr_at(warm - 1, total, cfg) == 0.01
    # cosine tail decreases monotonically to ~0
    tail = [lr_at(s, total, cfg) for s in range(warm, total)]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    assert tail[-1] < 0.001


def test_lr_no_warmup():
    cfg = TrainConfig(base_lr=0.4, epochs=5, warmup_epochs=0)
    assert lr_at(0, 50, cfg) == 0.4


def test_lr_step_out_of_range():
    cfg = TrainConfig(epochs=5, warmup_epochs=0)
    with pytest.raises(ContractError):
        lr_at(50, 50, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=7, epochs=5)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- steps


def test_masked_sgd_updates_only_masked(rng):
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    g = np.array([[10.0, 10.0], [10.0, 10.0]])
    mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    state = make_state("sgd", mask)
    masked_step(w, g, mask, state, lr=0.1)
    assert np.array_equal(w, np.array([[0.0, 2.0], [3.0, 3.0]]))


def test_masked_adam_matches_dense_reference(rng):
    w = rng.standard_normal((4, 3))
    ref = w.copy()
    mask = np.ones_like(w, dtype=np.uint8)
    state = make_state("adam", mask)
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 11):
        g = rng.standard_normal(w.shape)
        masked_step(w, g, mask, state, lr=0.01)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        mh = m / (1.0 - ADAM_BETA1**t)
        vh = v / (1.0 - ADAM_BETA2**t)
        ref = ref - 0.01 * (mh / (np.sqrt(vh) + ADAM_EPS))
    assert np.array_equal(w.ravel(), ref.ravel())


def test_masked_adam_moments_only_on_selected(rng):
    w = rng.standard_normal(6)
    keep = w.copy()
    mask = np.array([1, 0, 1, 0, 0, 1], dtype=np.uint8)
    state = make_state("adam", mask)
    for _ in range(5):
        masked_step(w, rng.standard_normal(6), mask, state, lr=0.05)
    assert np.array_equal(w[mask == 0], keep[mask == 0])
    assert not np.array_equal(w[mask == 1], keep[mask == 1])
    assert state["m"].shape == (3,)  # moments exist only for selected slots


def test_weight_decay_masked_and_decoupled(rng):
    w = np.array([2.0, 2.0])
    mask = np.array([1, 0], dtype=np.uint8)
    state = make_state("sgd", mask)
    masked_step(w, np.zeros(2), mask, state, lr=0.1, weight_decay=0.5)
    # decoupled decay: w0 -> w0 - lr*wd*w0; w1 frozen
    assert abs(w[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-15
    assert w[1] == 2.0


def test_masked_step_shape_mismatch():
    state = make_state("sgd", np.ones(3, dtype=np.uint8))
    with pytest.raises(ContractError):
        masked_step(np.zeros(3), np.zeros(4), np.ones(3, dtype=np.uint8), state, lr=0.1)


# ---------------------------------------------------------------- loop


def test_finetune_improves_and_respects_mask():
    base = model()
    tr, va, te = task()
    cfg = SelectionConfig(strategy="neuron-topk", k=2, loss="scl", seed=7, batch_size=20)
    from gpsft.selection import accumulate_gradients

    snap = accumulate_gradients(base, tr, cfg)
    mask = build_mask(base, cfg, snapshot=snap)
    tuned, hist = finetune(
        base, mask, tr, va, TrainConfig(base_lr=0.02, epochs=10, warmup_epochs=2, batch_size=20, seed=1)
    )
    assert len(hist) == 10
    assert hist[-1]["val_acc"] >= hist[0]["val_acc"]
    for name, buf in mask.buffers.items():
        frozen = buf == 0
        assert np.array_equal(base.params[name].data[frozen], tuned.params[name].data[frozen])
    acc, loss = evaluate(tuned, te)
    assert acc > 0.5


def test_finetune_zero_epochs_identity():
    base = model()
    tr, va, _ = task()
    tuned, hist = finetune(base, full_mask(base), tr, va, TrainConfig(epochs=0, warmup_epochs=0))
    assert hist == []
    for n in base.params:
        assert np.array_equal(base.params[n].data, tuned.params[n].data)


def test_finetune_linear_probe_trains_head_only():
    base = model()
    tr, va, _ = task()
    tuned, _ = finetune(
        base, linear_mask(), tr, va, TrainConfig(base_lr=0.05, epochs=5, warmup_epochs=1, batch_size=20)
    )
    for n in base.params:
        same = np.array_equal(base.params[n].data, tuned.params[n].data)
        assert same != n.startswith("head.")


def test_finetune_freeze_head_all_frozen():
    base = model()
    tr, va, _ = task()
    tuned, _ = finetune(
        base, linear_mask(), tr, va,
        TrainConfig(base_lr=0.05, epochs=3, warmup_epochs=0, batch_size=20),
        freeze_head=True,
    )
    for n in base.params:
        assert np.array_equal(base.params[n].data, tuned.params[n].data)


def test_finetune_bias_only_path():
    base = model()
    tr, va, _ = task()
    tuned, _ = finetune(
        base, bias_mask(base), tr, va, TrainConfig(base_lr=0.05, epochs=4, warmup_epochs=1, batch_size=20)
    )
    assert not np.array_equal(base.params["layer0.bias"].data, tuned.params["layer0.bias"].data)
    assert np.array_equal(base.params["layer0.weight"].data, tuned.params["layer0.weight"].data)


def test_finetune_deterministic():
    base = model()
    tr, va, _ = task()
    cfg = TrainConfig(base_lr=0.03, epochs=5, warmup_epochs=1, batch_size=20, seed=4)
    a, ha = finetune(base, full_mask(base), tr, va, cfg)
    b, hb = finetune(base, full_mask(base), tr, va, cfg)
    assert ha == hb
    for n in a.params:
        assert np.array_equal(a.params[n].data, b.params[n].data)


def test_finetune_history_fields():
    base = model()
    tr, va, _ = task()
    _, hist = finetune(
        base, full_mask(base), tr, va, TrainConfig(base_lr=0.02, epochs=3, warmup_epochs=1, batch_size=20)
    )
    assert [h["epoch"] for h in hist] == [1, 2, 3]
    for h in hist:
        assert set(h) == {"epoch", "train_loss", "val_acc", "lr"}
        assert 0.0 <= h["val_acc"] <= 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finetune_nan_raises_numeric_error():
    base = model()
    tr, va, _ = task()
    # absurd lr forces overflow within a few epochs
    with pytest.raises(NumericError):
        finetune(
            base, full_mask(base), tr, va,
            TrainConfig(optimizer="sgd", base_lr=1e18, epochs=30, warmup_epochs=0, batch_size=20),
        )


def test_evaluate_known_answer():
    base = model()
    _, _, te = task()
    acc, loss = evaluate(base, te)
    assert 0.0 <= acc <= 1.0
    assert loss > 0.0
    # mean CE equals the sum over singleton batches divided by n
    accs = [evaluate(base, type(te)(te.x[i : i + 1], te.y[i : i + 1], te.classes, "t"))[1] for i in range(4)]
    small = type(te)(te.x[:4], te.y[:4], te.classes, "t")
    assert abs(evaluate(base, small)[1] - sum(accs) / 4) < 1e-12
