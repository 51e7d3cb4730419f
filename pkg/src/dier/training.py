"""Joint pre-training of encoder and DiT on the simple noise-prediction loss."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .diffusion import NoiseSchedule, make_linear_schedule, q_sample
from .errors import ConfigError, DimensionError, NumericError
from .nets import DiTModel, EncoderModel, dit_forward, encoder_forward
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 0
    log_every: int = 1
    max_steps: int | None = None
    grad_clip: float = 1.0
    augment_flip: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when given")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place.  ``state.weight_decay > 0`` makes it AdamW
    (decay ``lr * wd * param`` applied separately from the gradient)."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, param {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               weight_decay: float = 0.05) -> None:
    state.weight_decay = weight_decay
    adam_step(params, grads, state, lr)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-6)
        for name in grads:
            grads[name] = grads[name] * np.float32(k)
    return total


def lr_schedule(step: int, total_steps: int, warmup_steps: int, max_lr: float) -> float:
    """Linear warm-up from 0 to ``max_lr`` over ``warmup_steps``, then linear decay to 0."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if warmup_steps > 0 and step <= warmup_steps:
        return max_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return max_lr * (total_steps - step) / (total_steps - warmup_steps)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def sample_noise_batch(x0: np.ndarray, T: int, rng: np.random.Generator):
    """Draw per-item timesteps then per-item Gaussian noise, in that order."""
    t = rng.integers(0, T, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    return t, eps


def simple_loss(predict: Callable, x0, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Mean squared error between drawn noise and ``predict(x_t, t, x0)``, weight 1 at every t."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    t, eps = sample_noise_batch(x0.data, sched.T, rng)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat = predict(x_t, t, x0)
    loss = tn.mean(tn.square(eps_hat - eps))
    if not np.isfinite(loss.data):
        pred = np.asarray(eps_hat.data)
        finite = np.abs(pred[np.isfinite(pred)])
        raise NumericError(
            "non-finite diffusion loss; "
            f"t={t.tolist()} |eps_hat|max={finite.max() if finite.size else 'n/a'} "
            f"nan_in_pred={int(np.isnan(pred).sum())} |x0|max={float(np.abs(x0.data).max())}")
    return loss


def diffusion_loss(encoder: EncoderModel, dit: DiTModel, x0, sched: NoiseSchedule,
                   rng: np.random.Generator) -> Tensor:
    """Noise-prediction loss with the DiT conditioned on ``encoder(x0, t)``."""
    def predict(x_t, t, clean):
        return dit_forward(dit, x_t, t, encoder_forward(encoder, clean, t))

    return simple_loss(predict, x0, sched, rng)


def smooth(losses, factor: float = 0.99) -> np.ndarray:
    """Exponential moving average seeded with the first value."""
    out = np.empty(len(losses))
    acc = None
    for i, v in enumerate(losses):
        acc = v if acc is None else factor * acc + (1 - factor) * v
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainingReport:
    losses: list = field(default_factory=list)      # every step
    trace: list = field(default_factory=list)       # (step, loss, lr, wall_ms) at log_every
    wall_time: float = 0.0
    checkpoint_paths: list = field(default_factory=list)
    final_step: int = 0

    @property
    def smoothed(self) -> np.ndarray:
        return smooth(self.losses)


def epoch_order(n: int, seed: int, epoch: int, flip: bool):
    """Permutation and flip mask for one epoch; a pure function of (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    return perm, flips


def all_params(encoder: EncoderModel, dit: DiTModel) -> dict:
    named = {f"encoder/{k}": p for k, p in encoder.params.items()}
    named.update({f"dit/{k}": p for k, p in dit.params.items()})
    return named


def make_train_rng(seed: int) -> np.random.Generator:
    # counter-based stream; its state is checkpointed for exact resume
    return np.random.Generator(np.random.Philox(seed))


def _write_trace(path: Path, rows, append: bool) -> None:
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "loss", "lr", "wall_ms"])
        for step, loss, lr, ms in rows:
            w.writerow([step, repr(float(loss)), repr(float(lr)), int(ms)])


def fit(encoder: EncoderModel, dit: DiTModel, images: np.ndarray, config: TrainConfig,
        run_dir: str | os.PathLike | None = None, *, optimizer: OptimizerState | None = None,
        rng: np.random.Generator | None = None, start_step: int = 0,
        extra_config: dict | None = None) -> TrainingReport:
    """Train both networks on ``images`` (float32 ``[N, C, H, W]`` in [-1, 1]).

    Resuming: pass the ``optimizer``, ``rng`` and ``start_step`` restored from
    a checkpoint; batches continue from the same position of the same epoch.
    """
    from .store import save_checkpoint  # store imports training types

    if len(images) == 0:
        raise ConfigError("training set is empty")
    sched = make_linear_schedule(config.T, config.beta_start, config.beta_end)
    optimizer = optimizer or OptimizerState()
    rng = rng or make_train_rng(config.seed)
    params = all_params(encoder, dit)
    n = len(images)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    run_dir = Path(run_dir) if run_dir is not None else None
    trace_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        trace_path = run_dir / "loss.csv"

    report = TrainingReport(final_step=start_step)
    pending_rows: list = []
    appending = [start_step > 0]
    t_start = time.perf_counter()
    step = start_step

    def checkpoint(name: str):
        if run_dir is None:
            return
        path = run_dir / name
        try:
            save_checkpoint(path, encoder, dit, optimizer, sched, rng, step,
                            config=_config_blob(config, extra_config))
        except OSError:
            _flush()
            raise
        report.checkpoint_paths.append(str(path))

    def _flush():
        if trace_path is not None and pending_rows:
            _write_trace(trace_path, pending_rows, append=appending[0])
            appending[0] = True
            pending_rows.clear()

    try:
        while step < total:
            epoch, offset = divmod(step, per_epoch)
            perm, flips = epoch_order(n, config.seed, epoch, config.augment_flip)
            idx = perm[offset * config.batch_size:(offset + 1) * config.batch_size]
            x0 = images[idx]
            if config.augment_flip:
                x0 = np.where(flips[idx][:, None, None, None], x0[..., ::-1], x0)
            lr = config.learning_rate
            loss = diffusion_loss(encoder, dit, x0, sched, rng)
            tn.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            clip_grad_norm(grads, config.grad_clip)
            adam_step(params, grads, optimizer, lr)
            for p in params.values():
                p.grad = None
            step += 1
            value = float(loss.data)
            report.losses.append(value)
            if step % config.log_every == 0 or step == total:
                ms = (time.perf_counter() - t_start) * 1000.0
                report.trace.append((step, value, lr, ms))
                pending_rows.append((step, value, lr, ms))
                log.info("step %d loss %.5f", step, value)
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step < total:
                _flush()
                checkpoint(f"ckpt_{step:07d}.dier")
        _flush()
        checkpoint("final.dier")
    except NumericError:
        _flush()
        raise
    report.final_step = step
    report.wall_time = time.perf_counter() - t_start
    return report


def _config_blob(config: TrainConfig, extra: dict | None) -> dict:
    blob = {"train": asdict(config)}
    if extra:
        blob.update(extra)
    return blob
