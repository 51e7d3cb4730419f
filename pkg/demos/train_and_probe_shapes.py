"""Train the nano encoder + DiT pair briefly on synthetic shapes, then probe.

A few hundred steps on one CPU core. Expect the loss to fall well below its
starting value of about 1; probe accuracies at this scale are noisy.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from dier.data import synth_shapes, to_unit_range
from dier.diffusion import make_linear_schedule
from dier.nets import init_dit, init_encoder, nano_configs
from dier.probe import ProbeConfig, raw_pixel_table, reconstruct_report, timestep_sweep, train_linear_probe
from dier.training import TrainConfig, fit, smooth

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
train, test = synth_shapes(200, 4, 16, seed=0), synth_shapes(50, 4, 16, seed=1)

dit_cfg, enc_cfg = nano_configs(16, 1)
encoder, dit = init_encoder(enc_cfg, 0), init_dit(dit_cfg, 1)
print(f"encoder {encoder.num_params():,} params, DiT {dit.num_params():,} params")

cfg = TrainConfig(epochs=1000, batch_size=32, learning_rate=1e-4, max_steps=steps)
run_dir = Path(tempfile.mkdtemp(prefix="dier_demo_"))
report = fit(encoder, dit, to_unit_range(train.images), cfg, run_dir)
print(f"loss {report.losses[0]:.3f} -> {smooth(report.losses)[-1]:.3f} (smoothed) in {report.wall_time:.0f}s")
print("trace and checkpoint in", run_dir)

probe_cfg = ProbeConfig.from_pretrain_lr(cfg.learning_rate, epochs=30)
sweep = timestep_sweep(encoder, train, test, [0, 100, 500, 999], probe_cfg)
for t, acc in zip(sweep.timesteps, sweep.top1):
    print(f"t={t:4d}  top1 {acc:5.1f}")
print("raw pixels top1", train_linear_probe(raw_pixel_table(train), raw_pixel_table(test, "test"), probe_cfg).top1)

x0 = to_unit_range(test.images[:8]).astype(np.float64)
for mode in ("code", "noise"):
    rec = reconstruct_report(encoder, dit, x0, make_linear_schedule(), mode, steps=20)
    print(f"reconstruct from {mode}: mean PSNR {rec.mean_psnr:.2f} dB")
