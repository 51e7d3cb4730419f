"""Command-line entry point: ``dier <command> [options]``.

Exit codes: 0 ok, 1 usage, 2 config, 3 data, 4 numeric, 5 checkpoint.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import LabeledImageSet, load_mnist_dir, resize_nearest, synth_shapes, to_unit_range
from .diffusion import make_linear_schedule
from .errors import (CheckpointError, ConfigError, DataError, FormatError, NumericError,
                     UsageError)
from .nets import FULL_CONFIGS, DiTConfig, EncoderConfig, init_dit, init_encoder, nano_configs
from .probe import (DEFAULT_GRID, ProbeConfig, extract_embeddings, reconstruct_report,
                    timestep_sweep, train_linear_probe)
from .store import export_embeddings, load_checkpoint
from .training import TrainConfig, fit

log = logging.getLogger("dier")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = range(6)

# dataset caps applied by --nano
NANO_TRAIN_CAP = 5000
NANO_TEST_CAP = 1000


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class DataSection:
    source: str = "shapes"     # "shapes" or a directory holding IDX files
    classes: int = 4
    size: int = 16
    per_class: int = 500
    test_per_class: int = 250
    train_cap: int = 0         # 0 = no cap
    test_cap: int = 0
    seed: int = 0


@dataclasses.dataclass
class ModelSection:
    preset: str = "nano"       # "nano" or a key of FULL_CONFIGS
    dit_seed: int = 1
    encoder_seed: int = 0


@dataclasses.dataclass
class DiffusionSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50


@dataclasses.dataclass
class ProbeSection:
    epochs: int = 100
    batch_size: int = 256
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    lr_multiplier: float = 2.0
    standardize: bool = True
    t_grid: str = "0:999:100"


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "diffusion": DiffusionSection,
    "train": TrainConfig,
    "probe": ProbeSection,
}


@dataclasses.dataclass
class RunConfig:
    data: DataSection
    model: ModelSection
    diffusion: DiffusionSection
    train: TrainConfig
    probe: ProbeSection

    @property
    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(epochs=self.probe.epochs, batch_size=self.probe.batch_size,
                           peak_lr=self.probe.lr_multiplier * self.train.learning_rate,
                           weight_decay=self.probe.weight_decay,
                           warmup_epochs=self.probe.warmup_epochs,
                           standardize=self.probe.standardize, seed=self.train.seed)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_ini_value(value)}")
            if name == "probe":
                pc = self.probe_config
                lines.append(f"peak_lr = {pc.peak_lr!r}")
                lines.append("optimizer = adamw")
                lines.append("schedule = warmup_linear_decay")
                lines.append("grid = " + ",".join(str(t) for t in parse_grid(self.probe.t_grid)))
            lines.append("")
        return "\n".join(lines)


def _ini_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(section: str, field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    text = raw.strip()
    try:
        if "bool" in kind:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if "None" in kind and text.lower() in ("none", ""):
            return None
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {field.name}: cannot parse {raw!r} as {kind}") from None


def _build(section: str, values: dict):
    cls = SECTIONS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]; allowed: {sorted(fields)}")
        kwargs[key] = raw if not isinstance(raw, str) else _coerce(section, fields[key], raw)
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"[{section}]: {err}") from None


def _read_ini(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (T)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; allowed: {list(SECTIONS)}")
        out[section] = dict(parser[section])
    return out


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse an INI run file, apply ``{section: {key: value}}`` overrides and validate."""
    raw: dict[str, dict] = {name: {} for name in SECTIONS}
    if path is not None:
        for section, values in _read_ini(path).items():
            raw[section].update(values)
    for section, values in (overrides or {}).items():
        raw[section].update({k: v for k, v in values.items() if v is not None})
    cfg = RunConfig(**{name: _build(name, raw[name]) for name in SECTIONS})
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.model.preset != "nano" and cfg.model.preset not in FULL_CONFIGS:
        raise ConfigError(f"unknown model preset {cfg.model.preset!r}")
    if cfg.data.classes < 1 or cfg.data.per_class < 1 or cfg.data.test_per_class < 1:
        raise ConfigError("data counts must be >= 1")
    if cfg.train.T != cfg.diffusion.T:
        cfg.train.T = cfg.diffusion.T
    cfg.train.beta_start = cfg.diffusion.beta_start
    cfg.train.beta_end = cfg.diffusion.beta_end
    make_linear_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    if cfg.diffusion.sample_steps < 1:
        raise ConfigError("sample_steps must be >= 1")
    parse_grid(cfg.probe.t_grid, cfg.diffusion.T)
    cfg.probe_config  # raises on bad probe values


def parse_grid(text: str, T: int = 1000) -> list[int]:
    """``start:end:step`` -> timesteps; ``end`` is appended when it is T-1 and the step skips it."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid must look like start:end:step, got {text!r}")
    try:
        start, end, step = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"grid values must be integers: {text!r}") from None
    if step < 1 or start < 0 or end < start or end >= T:
        raise ConfigError(f"grid {text!r} invalid for T={T}")
    grid = list(range(start, end + 1, step))
    if end == T - 1 and grid[-1] != end:
        grid.append(end)
    return grid


# ---------------------------------------------------------------------------
# data and models
# ---------------------------------------------------------------------------

def load_datasets(cfg: RunConfig, data_arg: str | None, nano: bool) -> tuple[LabeledImageSet, LabeledImageSet]:
    source = data_arg or cfg.data.source
    d = cfg.data
    if source == "shapes":
        train = synth_shapes(d.per_class, d.classes, d.size, seed=d.seed, name="shapes-train")
        test = synth_shapes(d.test_per_class, d.classes, d.size, seed=d.seed + 1, name="shapes-test")
    else:
        path = Path(source)
        if not path.is_dir():
            raise DataError(f"data path not found: {source}")
        try:
            train = load_mnist_dir(path, "train")
            test = load_mnist_dir(path, "test")
        except (FileNotFoundError, FormatError) as err:
            raise DataError(str(err)) from None
    train_cap = d.train_cap or (NANO_TRAIN_CAP if nano else 0)
    test_cap = d.test_cap or (NANO_TEST_CAP if nano else 0)
    return train.subset(train_cap or None), test.subset(test_cap or None)


def model_configs(cfg: RunConfig, dataset: LabeledImageSet) -> tuple[DiTConfig, EncoderConfig]:
    channels, size = dataset.images.shape[1], dataset.images.shape[-1]
    if cfg.model.preset == "nano":
        # sizes that cannot be halved cleanly are padded up to the next multiple of 8
        side = size if size % 8 == 0 else 32 if size <= 32 else size + (-size) % 8
        return nano_configs(side, channels)
    dit, enc = FULL_CONFIGS[cfg.model.preset]
    if dit.in_channels != channels or dit.input_size < size:
        raise ConfigError(f"preset {cfg.model.preset} expects {dit.in_channels}x{dit.input_size}, "
                          f"data is {channels}x{size}")
    return dit, enc


def _fit_size(dataset: LabeledImageSet, size: int) -> LabeledImageSet:
    if dataset.images.shape[-1] == size:
        return dataset
    return LabeledImageSet(resize_nearest(dataset.images, size), dataset.labels,
                           dataset.class_count, dataset.name)


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (FormatError, KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: {err}") from None


def _config_from_checkpoint(ckpt, args) -> RunConfig:
    run = ckpt.config or {}
    overrides = {name: dict(run.get(name, {})) for name in SECTIONS}
    for section in overrides:
        for k, v in list(overrides[section].items()):
            if isinstance(v, (list, tuple)):
                overrides[section].pop(k)
    if getattr(args, "config", None):
        # only the evaluation-side sections may differ from the training run
        file_raw = _read_ini(args.config)
        for name in ("probe", "data"):
            overrides[name].update(file_raw.get(name, {}))
    if getattr(args, "seed", None) is not None:
        overrides["train"]["seed"] = args.seed
    if getattr(args, "data", None):
        overrides["data"]["source"] = args.data
    return load_run_config(None, overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    overrides = {"train": {"seed": args.seed, "epochs": args.epochs, "max_steps": args.max_steps,
                           "learning_rate": args.lr},
                 "data": {"source": args.data}}
    cfg = load_run_config(args.config, overrides)
    train, _ = load_datasets(cfg, args.data, args.nano)
    dit_cfg, enc_cfg = model_configs(cfg, train)
    train = _fit_size(train, dit_cfg.input_size)
    out = _out_dir(args)
    (out / "effective_config.ini").write_text(cfg.to_ini())
    encoder = init_encoder(enc_cfg, seed=cfg.model.encoder_seed + cfg.train.seed)
    dit = init_dit(dit_cfg, seed=cfg.model.dit_seed + cfg.train.seed)
    extra = {name: dataclasses.asdict(getattr(cfg, name)) for name in ("data", "model", "diffusion", "probe")}
    report = fit(encoder, dit, to_unit_range(train.images), cfg.train, out, extra_config=extra)
    print(f"steps={report.final_step} final_loss={report.losses[-1]:.6f} "
          f"wall_s={report.wall_time:.1f} checkpoint={out / 'final.dier'}")
    return EXIT_OK


def _probe_setup(args):
    ckpt = _load_ckpt(args.checkpoint)
    cfg = _config_from_checkpoint(ckpt, args)
    train, test = load_datasets(cfg, args.data, args.nano)
    size = ckpt.encoder.config.input_size
    if train.images.shape[1] != ckpt.encoder.config.in_channels or train.images.shape[-1] > size:
        raise DataError(f"data {train.images.shape[1:]} does not match the checkpoint's encoder input")
    return ckpt, cfg, _fit_size(train, size), _fit_size(test, size)


def _check_t(t: int, T: int) -> None:
    if not 0 <= t < T:
        raise ConfigError(f"timestep {t} outside [0, {T - 1}]")


def cmd_sweep(args) -> int:
    ckpt, cfg, train, test = _probe_setup(args)
    if args.t_grid:
        cfg.probe.t_grid = args.t_grid
    grid = parse_grid(cfg.probe.t_grid, ckpt.schedule.T)
    out = _out_dir(args)
    (out / "effective_config.ini").write_text(cfg.to_ini())
    report = timestep_sweep(ckpt.encoder, train, test, grid, cfg.probe_config, csv_path=out / "sweep.csv")
    print(f"best_t={report.best_timestep} top1={report.best_top1:.4f}")
    return EXIT_OK


def cmd_probe(args) -> int:
    ckpt, cfg, train, test = _probe_setup(args)
    _check_t(args.t, ckpt.schedule.T)
    out = _out_dir(args)
    (out / "effective_config.ini").write_text(cfg.to_ini())
    classes = max(train.class_count, test.class_count)
    res = train_linear_probe(extract_embeddings(ckpt.encoder, train, args.t, "train"),
                             extract_embeddings(ckpt.encoder, test, args.t, "test"),
                             cfg.probe_config, num_classes=classes)
    from .probe import SweepReport
    SweepReport([args.t], [res.top1], [res.top5] if res.top5 is not None else None).write_csv(
        out / f"probe_t{args.t}.csv")
    line = f"top1={res.top1:.4f}"
    if res.top5 is not None:
        line += f" top5={res.top5:.4f}"
    print(line)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ckpt, cfg, _, test = _probe_setup(args)
    if args.n < 1 or args.steps < 1:
        raise ConfigError("--n and --steps must be >= 1")
    x0 = to_unit_range(test.images[:args.n]).astype(np.float64)
    seed = cfg.train.seed if args.seed is None else args.seed
    rep = reconstruct_report(ckpt.encoder, ckpt.dit, x0, ckpt.schedule, args.mode, args.steps, seed)
    for note in rep.warnings:
        print(note, file=sys.stderr)
    img, table = rep.write(_out_dir(args))
    print(f"mode={args.mode} n={len(rep.psnr)} mean_psnr={rep.mean_psnr:.3f} grid={img} psnr_csv={table}")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt, cfg, train, test = _probe_setup(args)
    _check_t(args.t, ckpt.schedule.T)
    dataset = train if args.split == "train" else test
    table = extract_embeddings(ckpt.encoder, dataset, args.t, args.split, source=str(args.checkpoint))
    path = export_embeddings(table, _out_dir(args) / f"embeddings_{args.split}_t{args.t}.{args.format}",
                             args.format)
    print(f"wrote {len(table.labels)} x {table.dim} to {path}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all
    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dier", description="Self-conditioned diffusion representation learning.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=True):
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config")
        sp.add_argument("--data", help="'shapes' or a directory with IDX files")
        sp.add_argument("--out", required=True)
        sp.add_argument("--nano", action="store_true", help="desk-scale model and dataset caps")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="pre-train encoder and DiT")
    common(sp, checkpoint=False)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="probe accuracy across a timestep grid")
    common(sp)
    sp.add_argument("--t-grid", default=None, help="start:end:step, e.g. 0:999:100")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("probe", help="probe accuracy at one timestep")
    common(sp)
    sp.add_argument("--t", type=int, required=True)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("reconstruct", help="rebuild test images from codes or noise")
    common(sp)
    sp.add_argument("--mode", choices=("code", "noise"), default="code")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--steps", type=int, default=50)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("export-embeddings", help="write embeddings for external tools")
    common(sp)
    sp.add_argument("--t", type=int, required=True)
    sp.add_argument("--format", choices=("csv", "bin"), default="csv")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("selfcheck", help="run the built-in numerical checks")
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
