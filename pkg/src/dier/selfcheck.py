"""Built-in numerical suites run by ``dier selfcheck``.

Each suite returns ``(ok, detail)``; sizes are chosen to finish in seconds.
"""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import read_idx, synth_shapes, write_idx
from .diffusion import make_linear_schedule, q_sample, sample_from_noise, stochastic_encode
from .nets import dit_forward, encoder_forward, init_dit, init_encoder, nano_configs
from .tensor import Tensor


def exact_eps_predictor(x0: np.ndarray, sched):
    """Predictor returning the noise that maps ``x0`` onto the queried ``x_t`` exactly."""
    x0 = np.asarray(x0, dtype=np.float64)

    def predict(x, t):
        ab = sched.alpha_bar(int(t[0]))
        xt = np.asarray(x.data, dtype=np.float64)
        if ab >= 1.0:
            return np.zeros_like(xt)
        return (xt - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return predict


def suite_grad() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = rng.standard_normal((4, 3, 3, 3))
    checks = {
        "conv2d": lambda a: tn.sum(tn.square(tn.conv2d(a, Tensor(w), None, 2, 1))),
        "group_norm": lambda a: tn.sum(tn.group_norm(a, 3) * tn.sin(a)),
        "layer_norm": lambda a: tn.sum(tn.layer_norm(a) * a),
        "softmax": lambda a: tn.sum(tn.softmax(a, axis=-1) * tn.cos(a)),
        "gelu_silu": lambda a: tn.sum(tn.gelu(a) + tn.silu(a) * a),
    }
    for name, f in checks.items():
        worst = max(worst, tn.grad_check(f, x, max_coords=40))
    dit_cfg, enc_cfg = nano_configs(8, 1)
    enc = init_encoder(enc_cfg, seed=0)
    dit = init_dit(dit_cfg, seed=1)
    for p in dit.params.values():  # leave the zero-init regime so gradients are non-trivial
        p.data = p.data + np.float32(0.05) * rng.standard_normal(p.data.shape).astype(np.float32)
    x0 = Tensor(rng.uniform(-1, 1, (2, 1, 8, 8)))
    t = np.array([3, 700])
    worst = max(worst, tn.grad_check(
        lambda a: tn.sum(tn.square(dit_forward(dit, a, t, encoder_forward(enc, a, t)))), x0, max_coords=24))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def suite_schedule(draws: int = 100_000) -> tuple[bool, str]:
    sched = make_linear_schedule()
    ab = sched.alpha_bars.astype(np.float64)
    ok = bool(np.all(np.diff(ab) < 0)) and ab[-1] < 5e-5
    rng = np.random.default_rng(1)
    worst = 0.0
    for t in (0, 333, 999):
        x0 = np.ones((draws, 1), np.float32)
        xt = q_sample(x0, np.full(draws, t), sched=sched, rng=rng).data.astype(np.float64)
        mean_err = abs(xt.mean() - np.sqrt(ab[t]))
        std_err = abs(xt.std() / np.sqrt(1 - ab[t]) - 1)
        worst = max(worst, mean_err, std_err)
    ok = ok and worst < 0.01
    return ok, f"alpha_bar[999]={ab[-1]:.2e} worst moment error {worst:.2e}"


def suite_sampler() -> tuple[bool, str]:
    sched = make_linear_schedule()
    x0 = np.random.default_rng(2).uniform(-1, 1, (3, 1, 4, 4))
    pred = exact_eps_predictor(x0, sched)
    grid = [0, 250, 500, 750, 999]
    code = stochastic_encode(x0, pred, grid, sched)
    back = sample_from_noise(code, pred, grid[::-1], sched, clip=False).data
    again = sample_from_noise(code, pred, grid[::-1], sched, clip=False).data
    err = float(np.abs(back - x0).max())
    return err < 1e-4 and np.array_equal(back, again), f"roundtrip max error {err:.2e}"


def suite_idx() -> tuple[bool, str]:
    ds = synth_shapes(5, 3, 12, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        ip, lp = Path(tmp) / "img", Path(tmp) / "lab"
        write_idx(ds, ip, lp)
        back = read_idx(ip, lp)
    ok = np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    return ok, f"{len(ds)} images round-tripped"


SUITES = {
    "grad": suite_grad,
    "schedule": suite_schedule,
    "sampler": suite_sampler,
    "idx": suite_idx,
}


def run_all() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in SUITES.items():
        try:
            ok, detail = fn()
        except Exception as err:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(err).__name__}: {err}"
        out.append((name, bool(ok), detail))
    return out
