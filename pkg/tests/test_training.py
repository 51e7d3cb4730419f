import csv

import numpy as np
import pytest

from dier import store
from dier import tensor as tn
from dier.diffusion import make_linear_schedule
from dier.errors import ConfigError, NumericError
from dier.nets import init_dit, init_encoder, nano_configs
from dier.store import load_checkpoint
from dier.tensor import Tensor
from dier.training import (OptimizerState, TrainConfig, adam_step, adamw_step, clip_grad_norm,
                           diffusion_loss, epoch_order, fit, lr_schedule, sample_noise_batch,
                           simple_loss, smooth)

SCHED = make_linear_schedule()
TINY_DIT, TINY_ENC = nano_configs(8, 1)


def tiny_models(seed=0):
    return init_encoder(TINY_ENC, seed), init_dit(TINY_DIT, seed + 1)


def tiny_images(n=12, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 1, 8, 8)).astype(np.float32)


def read_trace(path):
    with open(path) as fh:
        return [(r["step"], r["loss"], r["lr"]) for r in csv.DictReader(fh)]


# -- optimiser -------------------------------------------------------------

def test_adam_first_step_hand_value():
    with tn.double_precision():
        w = Tensor(np.array([1.0]), requires_grad=True)
    adam_step({"w": w}, {"w": np.array([2.0])}, OptimizerState(), 0.1)
    # m_hat = 2, v_hat = 4 -> w1 = 1 - 0.1 * 2 / (2 + 1e-8)
    assert w.data[0] == pytest.approx(0.9000000005, abs=1e-12)


def test_adam_zero_grad_fixed_point():
    w = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    before = w.data.copy()
    adam_step({"w": w}, {"w": np.zeros(2, np.float32)}, OptimizerState(), 0.1)
    np.testing.assert_array_equal(w.data, before)


def test_adamw_decay_only():
    with tn.double_precision():
        w = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    adamw_step({"w": w}, {"w": np.zeros(2)}, OptimizerState(), 0.1, weight_decay=0.05)
    np.testing.assert_allclose(w.data, np.array([2.0, -4.0]) * (1 - 0.005), rtol=1e-12)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    with tn.double_precision():
        w = Tensor(rng.standard_normal(5), requires_grad=True)
    ref = w.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    st = OptimizerState()
    for k in range(1, 8):
        g = rng.standard_normal(5)
        adam_step({"w": w}, {"w": g}, st, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)
    assert st.step == 7


def test_adam_rejects_bad_lr():
    w = Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ConfigError):
        adam_step({"w": w}, {"w": np.ones(1)}, OptimizerState(), 0.0)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    total = clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    norm = np.sqrt(sum((g ** 2).sum() for g in grads.values()))
    assert norm == pytest.approx(1.0, rel=1e-5)


def test_lr_schedule_points():
    assert lr_schedule(10, 100, 10, 2e-4) == 2e-4
    assert lr_schedule(100, 100, 10, 2e-4) == 0.0
    assert lr_schedule(55, 100, 10, 2e-4) == pytest.approx(1e-4)
    assert lr_schedule(5, 100, 10, 2e-4) == pytest.approx(1e-4)
    with pytest.raises(ConfigError):
        lr_schedule(1, 0, 0, 1.0)


# -- loss ------------------------------------------------------------------

def test_oracle_predictor_zero_loss():
    x0 = tiny_images(4)

    def oracle(x_t, t, clean):
        ab = SCHED.alpha_bars.astype(np.float64)[t].reshape(-1, 1, 1, 1)
        return Tensor((x_t.data - np.sqrt(ab) * clean.data) / np.sqrt(1 - ab))

    loss = simple_loss(oracle, x0, SCHED, np.random.default_rng(0))
    assert loss.item() < 1e-8


def test_zero_init_loss_near_one():
    enc, dit = tiny_models()
    loss = diffusion_loss(enc, dit, tiny_images(64), SCHED, np.random.default_rng(1))
    assert 0.9 <= loss.item() <= 1.1


def test_toy_predictor_gradients():
    x0 = tiny_images(3)[:, :, :2, :2]
    rng_state = np.random.default_rng(2).bit_generator.state

    def f(w):
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state

        def predict(x_t, t, clean):
            return x_t * w[0] + tn.sin(x_t * w[1]) * w[2] + clean * w[3] + w[4]

        return simple_loss(predict, x0, SCHED, rng)

    assert tn.grad_check(f, Tensor(np.array([0.5, -0.3, 0.8, 0.1, 0.05]))) < 1e-4


def test_nan_loss_aborts_with_diagnostic():
    def bad(x_t, t, clean):
        return x_t * float("nan")

    with pytest.raises(NumericError, match="t="):
        simple_loss(bad, tiny_images(2), SCHED, np.random.default_rng(0))


def test_noise_batch_order():
    x0 = np.zeros((4, 1, 2, 2))
    t, eps = sample_noise_batch(x0, 1000, np.random.default_rng(5))
    ref = np.random.default_rng(5)
    np.testing.assert_array_equal(t, ref.integers(0, 1000, size=4))
    np.testing.assert_array_equal(eps, ref.standard_normal(x0.shape, dtype=np.float32))


def test_smooth():
    out = smooth([1.0, 0.0, 0.0])
    np.testing.assert_allclose(out, [1.0, 0.99, 0.9801])


# -- fit -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)


def test_empty_dataset_rejected():
    enc, dit = tiny_models()
    with pytest.raises(ConfigError):
        fit(enc, dit, np.zeros((0, 1, 8, 8), np.float32), TrainConfig(epochs=1))


def test_epoch_order_pure():
    a = epoch_order(20, 3, 4, True)
    b = epoch_order(20, 3, 4, True)
    c = epoch_order(20, 3, 5, True)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_fit_deterministic_and_trains_both(tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3, seed=7)
    traces = []
    for run in ("a", "b"):
        enc, dit = tiny_models()
        enc0 = {k: p.data.copy() for k, p in enc.params.items()}
        dit0 = {k: p.data.copy() for k, p in dit.params.items()}
        rep = fit(enc, dit, tiny_images(), cfg, tmp_path / run)
        traces.append(read_trace(tmp_path / run / "loss.csv"))
        assert rep.final_step == 9
        assert (tmp_path / run / "final.dier").exists()
        assert sum(np.linalg.norm(p.data - enc0[k]) for k, p in enc.params.items()) > 0
        assert sum(np.linalg.norm(p.data - dit0[k]) for k, p in dit.params.items()) > 0
        assert all(np.all(np.isfinite(p.data)) for p in enc.parameters() + dit.parameters())
    assert traces[0] == traces[1]
    assert len(traces[0]) == 9


def test_fit_resume_matches_straight_run(tmp_path):
    cfg = TrainConfig(epochs=4, batch_size=5, learning_rate=1e-3, seed=3, checkpoint_every=5,
                      augment_flip=True)
    images = tiny_images(12)
    enc, dit = tiny_models()
    straight = fit(enc, dit, images, cfg, tmp_path / "straight")
    assert straight.final_step == 12
    ck = load_checkpoint(tmp_path / "straight" / "ckpt_0000005.dier")
    assert ck.step == 5
    resumed = fit(ck.encoder, ck.dit, images, cfg, tmp_path / "resumed", optimizer=ck.optimizer,
                  rng=ck.rng, start_step=ck.step)
    assert resumed.losses == straight.losses[5:]
    for k, p in dit.params.items():
        assert p.data.tobytes() == ck.dit.params[k].data.tobytes()


def test_fit_trace_columns(tmp_path):
    enc, dit = tiny_models()
    fit(enc, dit, tiny_images(8), TrainConfig(epochs=1, batch_size=4, log_every=1), tmp_path)
    with open(tmp_path / "loss.csv") as fh:
        header = fh.readline().strip()
    assert header == "step,loss,lr,wall_ms"


def test_fit_io_failure_flushes_trace(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(store, "save_checkpoint", boom)
    enc, dit = tiny_models()
    with pytest.raises(OSError):
        fit(enc, dit, tiny_images(8), TrainConfig(epochs=2, batch_size=4, checkpoint_every=3), tmp_path)
    assert len(read_trace(tmp_path / "loss.csv")) == 3


def test_encoder_receives_gradient():
    enc, dit = tiny_models()
    # zero final layer and zero adaLN each hold the path shut for one step
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-2, max_steps=3)
    fit(enc, dit, tiny_images(4), cfg)
    loss = diffusion_loss(enc, dit, tiny_images(4), SCHED, np.random.default_rng(0))
    tn.backward(loss)
    norm = sum(float(np.sum(p.grad ** 2)) for p in enc.parameters() if p.grad is not None)
    assert norm > 0
