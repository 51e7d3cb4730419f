"""Linear probing of frozen encoder embeddings, timestep sweeps and reconstruction reports."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import LabeledImageSet, from_unit_range, to_unit_range, write_ppm
from .diffusion import NoiseSchedule, psnr, sample_from_noise, stochastic_encode, uniform_grid
from .errors import ConfigError, DimensionError, UsageError
from .nets import DiTModel, EncoderModel, dit_forward, encoder_forward
from .tensor import Tensor
from .training import OptimizerState, adam_step, lr_schedule

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(range(0, 1000, 100)) + (999,)


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # f32 [N, d]
    labels: np.ndarray   # int [N]
    timestep: int
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise DimensionError(f"embedding table needs shape [N>=1, d], got {self.vectors.shape}")
        if len(self.vectors) != len(self.labels):
            raise DimensionError(f"{len(self.vectors)} vectors but {len(self.labels)} labels")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def extract_embeddings(encoder: EncoderModel, dataset: LabeledImageSet, t: int, split: str = "train",
                       batch_size: int = 128, source: str = "") -> EmbeddingTable:
    """Embed every clean image of ``dataset`` at timestep ``t`` with frozen weights."""
    cfg = encoder.config
    size = dataset.images.shape[-1]
    if dataset.images.shape[1] != cfg.in_channels or size > cfg.input_size:
        raise DimensionError(
            f"dataset images {dataset.images.shape[1:]} do not fit encoder input "
            f"[{cfg.in_channels}, {cfg.input_size}, {cfg.input_size}]")
    images = dataset.images
    if size != cfg.input_size:
        from .data import resize_nearest
        images = resize_nearest(images, cfg.input_size)
    out = []
    with tn.no_grad():
        for start in range(0, len(images), batch_size):
            x = to_unit_range(images[start:start + batch_size])
            out.append(encoder_forward(encoder, Tensor(x), np.full(len(x), t)).data)
    vectors = np.concatenate(out).astype(np.float32)
    return EmbeddingTable(vectors, dataset.labels.copy(), int(t), split, source)


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 256
    peak_lr: float = 2e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("probe epochs and batch_size must be >= 1")
        if not self.peak_lr > 0:
            raise ConfigError(f"probe peak_lr must be > 0, got {self.peak_lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("probe warmup_epochs must be in [0, epochs)")

    @classmethod
    def from_pretrain_lr(cls, lr: float, **kw) -> "ProbeConfig":
        return cls(peak_lr=2.0 * lr, **kw)


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    top1: float
    top5: float | None
    train_top1: float

    def logits(self, vectors: np.ndarray) -> np.ndarray:
        return ((vectors - self.mean) / self.std) @ self.weight + self.bias


def topk_accuracy(logits, labels, k: int = 1) -> float:
    """Percent of rows whose label is among the ``k`` largest logits; ties go to the lower class."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, C], got {logits.shape}")
    if k > logits.shape[1]:
        raise UsageError(f"k={k} exceeds the number of classes {logits.shape[1]}")
    # stable sort on the negated logits keeps lower indices first among equals
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hit = (top == labels[:, None]).any(axis=1)
    return float(100.0 * hit.mean())


def train_linear_probe(train: EmbeddingTable, test: EmbeddingTable, config: ProbeConfig,
                       num_classes: int | None = None) -> ProbeResult:
    """Fit one linear layer with softmax cross-entropy on frozen vectors and score ``test``."""
    if train.dim != test.dim:
        raise DimensionError(f"train width {train.dim} != eval width {test.dim}")
    if train.timestep != test.timestep:
        raise UsageError(f"train table at t={train.timestep}, eval table at t={test.timestep}")
    classes = num_classes or int(max(train.labels.max(), test.labels.max())) + 1
    missing = sorted(set(range(classes)) - set(np.unique(train.labels).tolist()))
    if missing:
        warnings.warn(f"classes {missing} absent from the probe's training labels", stacklevel=2)
    x = train.vectors.astype(np.float64)
    if config.standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-8, sd, 1.0)
    else:
        mu = np.zeros(train.dim)
        sd = np.ones(train.dim)
    xs = ((x - mu) / sd).astype(np.float32)
    y = train.labels.astype(np.int64)
    w = Tensor(np.zeros((train.dim, classes), np.float32), requires_grad=True)
    b = Tensor(np.zeros(classes, np.float32), requires_grad=True)
    params = {"weight": w, "bias": b}
    opt = OptimizerState(weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(xs)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    warm = per_epoch * config.warmup_epochs
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            with tn.fresh_tape():
                loss = tn.cross_entropy(Tensor(xs[idx]) @ w + b, y[idx])
                grads = tn.backward(loss, wrt=[w, b])
            step += 1
            lr = lr_schedule(step, total, warm, config.peak_lr)
            if lr > 0:
                adam_step(params, {"weight": grads[w], "bias": grads[b]}, opt, lr)
    result = ProbeResult(w.data.astype(np.float64), b.data.astype(np.float64), mu, sd, 0.0, None, 0.0)
    test_logits = result.logits(test.vectors.astype(np.float64))
    result.top1 = topk_accuracy(test_logits, test.labels, 1)
    result.top5 = topk_accuracy(test_logits, test.labels, 5) if classes > 10 else None
    result.train_top1 = topk_accuracy(result.logits(x), y, 1)
    return result


def raw_pixel_table(dataset: LabeledImageSet, split: str = "train") -> EmbeddingTable:
    """Flattened pixels in [-1, 1] as a probe baseline."""
    vectors = to_unit_range(dataset.images).reshape(len(dataset), -1)
    return EmbeddingTable(vectors, dataset.labels.copy(), 0, split, "raw-pixels")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepReport:
    timesteps: list
    top1: list
    top5: list | None = None
    best_timestep: int = -1
    best_top1: float = float("nan")

    def __post_init__(self):
        if len(self.timesteps) != len(self.top1):
            raise DimensionError("timesteps and top1 differ in length")
        if self.top5 is not None and len(self.top5) != len(self.top1):
            raise DimensionError("timesteps and top5 differ in length")
        if self.timesteps and self.best_timestep < 0:
            self.best_timestep, self.best_top1 = select_best(self.timesteps, self.top1)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "top1", "top5"])
            for i, t in enumerate(self.timesteps):
                top5 = "" if self.top5 is None else _fmt(self.top5[i])
                w.writerow([t, _fmt(self.top1[i]), top5])
        return path


def _fmt(v) -> str:
    if v is None:
        return ""
    return "nan" if math.isnan(v) else f"{v:.4f}"


def select_best(timesteps, top1) -> tuple[int, float]:
    """Best Top-1 and its timestep; smallest timestep among ties, NaN points ignored."""
    best_t, best = None, -math.inf
    for t, acc in sorted(zip(timesteps, top1), key=lambda p: p[0]):
        if acc is None or math.isnan(acc):
            continue
        if acc > best:
            best_t, best = t, acc
    if best_t is None:
        return -1, float("nan")
    return int(best_t), float(best)


def timestep_sweep(encoder: EncoderModel, train_set: LabeledImageSet, test_set: LabeledImageSet,
                   grid=DEFAULT_GRID, config: ProbeConfig | None = None,
                   csv_path=None) -> SweepReport:
    """Probe at every grid timestep; failed points are recorded as NaN and the sweep goes on."""
    config = config or ProbeConfig()
    classes = max(train_set.class_count, test_set.class_count)
    top1, top5 = [], []
    for t in grid:
        try:
            tr = extract_embeddings(encoder, train_set, t, "train")
            te = extract_embeddings(encoder, test_set, t, "test")
            res = train_linear_probe(tr, te, config, num_classes=classes)
            top1.append(res.top1)
            top5.append(res.top5 if res.top5 is not None else float("nan"))
            log.info("t=%d top1=%.2f", t, res.top1)
        except (ArithmeticError, ValueError, RuntimeError) as err:
            log.warning("probe at t=%d failed: %s", t, err)
            top1.append(float("nan"))
            top5.append(float("nan"))
    report = SweepReport(list(grid), top1, top5 if classes > 10 else None)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionReport:
    reconstructions: np.ndarray  # f64 [n, C, H, W] in [-1, 1]
    originals: np.ndarray
    psnr: list
    mode: str
    warnings: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    def grid_image(self) -> np.ndarray:
        """uint8 ``[C, n*H, 2*W]``: reconstruction on the left, ground truth on the right."""
        rec = from_unit_range(self.reconstructions)
        org = from_unit_range(self.originals)
        rows = [np.concatenate([r, o], axis=-1) for r, o in zip(rec, org)]
        return np.concatenate(rows, axis=-2)

    def write(self, out_dir, stem: str = "reconstruct") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        img_path = out_dir / f"{stem}_{self.mode}.ppm"
        write_ppm(img_path, self.grid_image())
        csv_path = out_dir / f"{stem}_{self.mode}_psnr.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "psnr_db"])
            for i, v in enumerate(self.psnr):
                w.writerow([i, f"{v:.4f}"])
        return img_path, csv_path


def conditioned_predictor(encoder: EncoderModel, dit: DiTModel, x0: np.ndarray):
    """Noise predictor whose conditioning is ``encoder(x0, t)`` at each queried ``t``."""
    cache: dict[int, Tensor] = {}
    clean = Tensor(np.asarray(x0, dtype=np.float32))

    def predict(x: Tensor, t: np.ndarray) -> Tensor:
        key = int(t[0])
        if key not in cache:
            cache[key] = encoder_forward(encoder, clean, t)
        return dit_forward(dit, Tensor(x.data.astype(np.float32)), t, cache[key])

    return predict


def reconstruct_report(encoder: EncoderModel, dit: DiTModel, x0: np.ndarray, sched: NoiseSchedule,
                       mode: str = "code", steps: int = 50, seed: int = 0) -> ReconstructionReport:
    """Rebuild ``x0`` (float in [-1, 1]) from its stochastic code or from fresh noise.

    Both modes decode with DDIM conditioned on the embedding of ``x0``; only
    the starting latent differs.
    """
    if mode not in ("code", "noise"):
        raise UsageError(f"mode must be 'code' or 'noise', got {mode!r}")
    x0 = np.asarray(x0, dtype=np.float64)
    predictor = conditioned_predictor(encoder, dit, x0)
    grid = uniform_grid(sched.T, steps)
    notes = []
    with tn.no_grad():
        test_out = predictor(Tensor(x0.astype(np.float32)), np.full(len(x0), grid[-1])).data
    if not np.any(test_out):
        notes.append("WARNING: the noise predictor outputs exactly zero; the model looks untrained")
    if mode == "code":
        x_T = stochastic_encode(x0, predictor, grid, sched).data
    else:
        x_T = np.random.default_rng(seed).standard_normal(x0.shape)
    rec = sample_from_noise(x_T, predictor, grid[::-1], sched, mode="ddim").data
    scores = [psnr(r, o) for r, o in zip(rec, x0)]
    return ReconstructionReport(np.asarray(rec), x0, scores, mode, notes)
