"""Timestep-conditioned encoder and DiT noise predictor.

Both networks are plain parameter dictionaries (hierarchical names ->
:class:`~dier.tensor.Tensor`) plus a frozen config; the forward passes are
free functions so that checkpointing and gradient checks can address any
parameter by name.

The encoder maps ``(x0, t)`` to an embedding ``v`` of width ``embed_dim``.
The DiT predicts the noise in ``x_t`` from ``(x_t, t, v)``; ``v`` is
projected to the token width and added to the timestep embedding to form
the conditioning vector that drives every block's adaLN modulation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiTConfig:
    input_size: int = 32
    in_channels: int = 3
    patch: int = 2
    hidden: int = 192
    depth: int = 12
    heads: int = 3
    mlp_ratio: float = 4.0
    cond_dim: int = 1024
    freq_dim: int = 256

    def __post_init__(self):
        if self.input_size % self.patch:
            raise ConfigError(f"input_size {self.input_size} not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.freq_dim % 2:
            raise ConfigError("freq_dim must be even")

    @property
    def tokens(self) -> int:
        return (self.input_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 32
    in_channels: int = 3
    base: int = 128
    blocks: int = 2
    attention_resolutions: tuple = (16, 8)
    heads: int = 4
    channel_multipliers: tuple = (1, 2, 3, 4)
    embed_dim: int = 1024
    groups: int = 32

    def __post_init__(self):
        object.__setattr__(self, "attention_resolutions", tuple(self.attention_resolutions))
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        m = self.channel_multipliers
        if not m or any(b < a for a, b in zip(m, m[1:])):
            raise ConfigError(f"channel multipliers must be non-decreasing: {m}")
        sides = self.resolutions
        if sides[-1] < 1 or self.input_size % (2 ** (len(m) - 1)):
            raise ConfigError(f"input {self.input_size} cannot be halved {len(m) - 1} times")
        for r in self.attention_resolutions:
            if r not in sides:
                raise ConfigError(f"attention resolution {r} not among feature sides {sides}")
        if self.time_dim % 2:
            raise ConfigError("4 * base must be even")

    @property
    def resolutions(self) -> list[int]:
        return [self.input_size // 2 ** i for i in range(len(self.channel_multipliers))]

    @property
    def time_dim(self) -> int:
        return 4 * self.base

    def to_dict(self) -> dict:
        return asdict(self)


def _full_size(input_size, in_ch, patch, hidden, depth, heads, base, mult):
    dit = DiTConfig(input_size, in_ch, patch, hidden, depth, heads, 4.0, 1024)
    enc = EncoderConfig(input_size, in_ch, base, 2, (16, 8), 4, mult, 1024)
    return dit, enc


# Architecture table for the six reference datasets.
FULL_CONFIGS = {
    "mnist": _full_size(32, 1, 2, 192, 12, 3, 128, (1, 2, 3, 4)),
    "cifar10": _full_size(32, 3, 2, 192, 12, 3, 128, (1, 2, 3, 4)),
    "cifar100": _full_size(32, 3, 2, 192, 12, 3, 128, (1, 2, 3, 4)),
    "tiny-in": _full_size(64, 3, 4, 384, 12, 6, 128, (1, 2, 3, 4)),
    "bccd": _full_size(256, 3, 8, 768, 16, 12, 256, (1, 1, 2, 2, 3, 4)),
    "oct2017": _full_size(256, 3, 8, 768, 16, 12, 256, (1, 1, 2, 2, 3, 4)),
}


def nano_configs(input_size: int = 16, in_channels: int = 1) -> tuple[DiTConfig, EncoderConfig]:
    """Desk-scale pair used for CPU training runs and CI."""
    patch = 4
    dit = DiTConfig(input_size, in_channels, patch, hidden=64, depth=4, heads=2,
                    mlp_ratio=4.0, cond_dim=128, freq_dim=64)
    enc = EncoderConfig(input_size, in_channels, base=32, blocks=1,
                        attention_resolutions=(input_size // 2,), heads=2,
                        channel_multipliers=(1, 2), embed_dim=128)
    return dit, enc


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass
class _Model:
    params: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


@dataclass
class EncoderModel(_Model):
    config: EncoderConfig = field(default_factory=EncoderConfig)


@dataclass
class DiTModel(_Model):
    config: DiTConfig = field(default_factory=DiTConfig)


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def trunc_normal(self, name, shape, std=0.02):
        x = self.rng.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        self._add(name, x * std)

    def zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def ones(self, name, shape):
        self._add(name, np.ones(shape))

    def linear(self, name, fan_in, fan_out, zero=False):
        if zero:
            self.zeros(f"{name}.weight", (fan_in, fan_out))
        else:
            self.trunc_normal(f"{name}.weight", (fan_in, fan_out))
        self.zeros(f"{name}.bias", (fan_out,))

    def conv(self, name, cin, cout, k):
        self.trunc_normal(f"{name}.weight", (cout, cin, k, k))
        self.zeros(f"{name}.bias", (cout,))

    def norm(self, name, c):
        self.ones(f"{name}.gamma", (c,))
        self.zeros(f"{name}.beta", (c,))

    def _add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)


def _encoder_layout(cfg: EncoderConfig):
    """Yield the encoder's layer plan as (kind, name, *args) tuples."""
    ch = cfg.base
    plan = [("conv_in", "conv_in", cfg.in_channels, ch)]
    for s, mult in enumerate(cfg.channel_multipliers):
        cout = cfg.base * mult
        side = cfg.resolutions[s]
        for b in range(cfg.blocks):
            plan.append(("res", f"stage{s}.res{b}", ch, cout))
            ch = cout
            if side in cfg.attention_resolutions:
                plan.append(("attn", f"stage{s}.attn{b}", ch))
        if s + 1 < len(cfg.channel_multipliers):
            plan.append(("down", f"stage{s}.down", ch))
    plan.append(("out", "out", ch))
    return plan


def _groups(cfg: EncoderConfig, c: int) -> int:
    return math.gcd(min(cfg.groups, c), c)


def init_encoder(cfg: EncoderConfig, seed: int = 0) -> EncoderModel:
    ini = _Init(seed)
    td = cfg.time_dim
    ini.linear("temb.fc1", td, td)
    ini.linear("temb.fc2", td, td)
    for kind, name, *args in _encoder_layout(cfg):
        if kind == "conv_in":
            ini.conv(name, args[0], args[1], 3)
        elif kind == "res":
            cin, cout = args
            ini.norm(f"{name}.norm1", cin)
            ini.conv(f"{name}.conv1", cin, cout, 3)
            ini.linear(f"{name}.temb", td, cout)
            ini.norm(f"{name}.norm2", cout)
            ini.conv(f"{name}.conv2", cout, cout, 3)
            if cin != cout:
                ini.conv(f"{name}.skip", cin, cout, 1)
        elif kind == "attn":
            c = args[0]
            ini.norm(f"{name}.norm", c)
            ini.linear(f"{name}.qkv", c, 3 * c)
            ini.linear(f"{name}.proj", c, c)
        elif kind == "down":
            ini.conv(name, args[0], args[0], 3)
        else:
            ini.norm(f"{name}.norm", args[0])
            ini.linear(f"{name}.fc", args[0], cfg.embed_dim)
    return EncoderModel(params=ini.params, config=cfg)


def init_dit(cfg: DiTConfig, seed: int = 0) -> DiTModel:
    """adaLN-Zero initialisation: all modulation heads and the output layer start at 0."""
    ini = _Init(seed)
    h = cfg.hidden
    patch_dim = cfg.patch * cfg.patch * cfg.in_channels
    mlp = int(h * cfg.mlp_ratio)
    ini.linear("x_embed", patch_dim, h)
    ini.linear("t_embed.fc1", cfg.freq_dim, h)
    ini.linear("t_embed.fc2", h, h)
    ini.linear("v_embed", cfg.cond_dim, h)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        ini.linear(f"{p}.adaLN", h, 6 * h, zero=True)
        ini.linear(f"{p}.attn.qkv", h, 3 * h)
        ini.linear(f"{p}.attn.proj", h, h)
        ini.linear(f"{p}.mlp.fc1", h, mlp)
        ini.linear(f"{p}.mlp.fc2", mlp, h)
    ini.linear("final.adaLN", h, 2 * h, zero=True)
    ini.linear("final.linear", h, patch_dim, zero=True)
    return DiTModel(params=ini.params, config=cfg)


def init_params(config, seed: int = 0):
    if isinstance(config, DiTConfig):
        return init_dit(config, seed)
    if isinstance(config, EncoderConfig):
        return init_encoder(config, seed)
    raise ConfigError(f"unknown config type {type(config).__name__}")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t w_i), cos(t w_i)]``, ``w_i = 10000^(-i / (dim/2))``.

    A scalar ``t`` gives shape ``[dim]``; an array of ``N`` timesteps gives ``[N, dim]``.
    """
    if dim % 2:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    t_arr = np.asarray(t, dtype=np.float64)
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(np.float32)


def pos_embed_2d(hidden: int, grid: int) -> np.ndarray:
    """Fixed 2-D sin-cos positional table of shape ``[grid*grid, hidden]``."""
    if hidden % 4:
        raise ConfigError(f"2-D positional embedding needs hidden % 4 == 0, got {hidden}")
    quarter = hidden // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")

    def enc(pos):
        out = pos.reshape(-1)[:, None] * omega[None]
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([enc(ys), enc(xs)], axis=1).astype(np.float32)


def linear(x, params: dict, name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def patchify(x, p: int) -> Tensor:
    """``[N, C, H, W]`` -> ``[N, (H/p)(W/p), p*p*C]`` with (row, col, channel) patch order."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    n, c, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch {p}")
    x = x.reshape(n, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(n, (h // p) * (w // p), p * p * c)


def unpatchify(tokens, p: int, channels: int) -> Tensor:
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    n, length, dim = tokens.shape
    g = int(round(math.sqrt(length)))
    if g * g != length or dim != p * p * channels:
        raise DimensionError(f"cannot unpatchify tokens {tokens.shape} with p={p}, C={channels}")
    x = tokens.reshape(n, g, g, p, p, channels)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(n, channels, g * p, g * p)


def attention(x, params: dict, name: str, heads: int) -> Tensor:
    """Multi-head self-attention over ``x[N, L, D]``."""
    n, length, d = x.shape
    dh = d // heads
    qkv = linear(x, params, f"{name}.qkv")  # N, L, 3D
    qkv = qkv.reshape(n, length, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # 3, N, H, L, dh
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = tn.scale(q @ k.swapaxes(-1, -2), 1.0 / math.sqrt(dh))
    out = tn.softmax(scores, axis=-1) @ v  # N, H, L, dh
    out = out.transpose(0, 2, 1, 3).reshape(n, length, d)
    return linear(out, params, f"{name}.proj")


def modulate(y, shift, scale_) -> Tensor:
    """``y * (1 + scale) + shift`` with per-item vectors broadcast over tokens."""
    n, d = shift.shape
    return y * (scale_.reshape(n, 1, d) + 1.0) + shift.reshape(n, 1, d)


def adaln_modulate(params: dict, name: str, c) -> tuple[Tensor, ...]:
    """Six per-item modulation vectors from conditioning ``c[N, hidden]``:
    (shift, scale, gate) for the attention branch then for the MLP branch."""
    mod = linear(tn.silu(c), params, f"{name}.adaLN")
    d = mod.shape[1] // 6
    return tuple(mod[:, i * d:(i + 1) * d] for i in range(6))


def dit_block(params: dict, name: str, h, c, heads: int) -> Tensor:
    shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = adaln_modulate(params, name, c)
    n, _, d = h.shape
    y = modulate(tn.layer_norm(h, eps=1e-6), shift_a, scale_a)
    h = h + gate_a.reshape(n, 1, d) * attention(y, params, f"{name}.attn", heads)
    y = modulate(tn.layer_norm(h, eps=1e-6), shift_m, scale_m)
    y = linear(tn.gelu(linear(y, params, f"{name}.mlp.fc1")), params, f"{name}.mlp.fc2")
    return h + gate_m.reshape(n, 1, d) * y


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _as_t(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(n, int(t), dtype=np.int64)
    if t.shape != (n,):
        raise DimensionError(f"expected {n} timesteps, got shape {t.shape}")
    return t


def _check_image(x: Tensor, size: int, channels: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1:] != (channels, size, size):
        raise DimensionError(
            f"{who}: expected input [N, {channels}, {size}, {size}], got {list(x.shape)}")


def dit_condition(model: DiTModel, t, v) -> Tensor:
    """Conditioning vector ``c = MLP(sinusoid(t)) + W_v v``."""
    cfg = model.config
    p = model.params
    v = v if isinstance(v, Tensor) else Tensor(v)
    if v.ndim != 2 or v.shape[1] != cfg.cond_dim:
        raise DimensionError(f"dit: embedding width {v.shape[-1]} != cond_dim {cfg.cond_dim}")
    t = _as_t(t, v.shape[0])
    temb = Tensor(timestep_embedding(t, cfg.freq_dim))
    temb = linear(tn.silu(linear(temb, p, "t_embed.fc1")), p, "t_embed.fc2")
    return temb + linear(v, p, "v_embed")


def dit_embed_tokens(model: DiTModel, x) -> Tensor:
    cfg = model.config
    tokens = linear(patchify(x, cfg.patch), model.params, "x_embed")
    return tokens + pos_embed_2d(cfg.hidden, cfg.input_size // cfg.patch)


def dit_head(model: DiTModel, h, c) -> Tensor:
    cfg = model.config
    p = model.params
    mod = linear(tn.silu(c), p, "final.adaLN")
    d = cfg.hidden
    shift, scale_ = mod[:, :d], mod[:, d:]
    y = modulate(tn.layer_norm(h, eps=1e-6), shift, scale_)
    return unpatchify(linear(y, p, "final.linear"), cfg.patch, cfg.in_channels)


def dit_forward(model: DiTModel, x_t, t, v) -> Tensor:
    """Noise prediction ``eps_hat[N, C, H, W]`` for ``x_t`` at timesteps ``t`` given ``v[N, d]``."""
    cfg = model.config
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    _check_image(x_t, cfg.input_size, cfg.in_channels, "dit")
    c = dit_condition(model, t, v)
    if c.shape[0] != x_t.shape[0]:
        raise DimensionError(f"dit: batch {x_t.shape[0]} vs embedding batch {c.shape[0]}")
    h = dit_embed_tokens(model, x_t)
    for i in range(cfg.depth):
        h = dit_block(model.params, f"blocks.{i}", h, c, cfg.heads)
    return dit_head(model, h, c)


def _res_unit(p, name, x, temb, cfg: EncoderConfig) -> Tensor:
    cin = x.shape[1]
    h = tn.group_norm(x, _groups(cfg, cin), p[f"{name}.norm1.gamma"], p[f"{name}.norm1.beta"])
    h = tn.conv2d(tn.silu(h), p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], 1, 1)
    cout = h.shape[1]
    h = h + linear(temb, p, f"{name}.temb").reshape(h.shape[0], cout, 1, 1)
    h = tn.group_norm(h, _groups(cfg, cout), p[f"{name}.norm2.gamma"], p[f"{name}.norm2.beta"])
    h = tn.conv2d(tn.silu(h), p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], 1, 1)
    skip = x
    if f"{name}.skip.weight" in p:
        skip = tn.conv2d(x, p[f"{name}.skip.weight"], p[f"{name}.skip.bias"])
    return skip + h


def _attn_unit(p, name, x, cfg: EncoderConfig) -> Tensor:
    n, c, hh, ww = x.shape
    h = tn.group_norm(x, _groups(cfg, c), p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
    tokens = h.reshape(n, c, hh * ww).swapaxes(1, 2)
    out = attention(tokens, p, name, cfg.heads)
    return x + out.swapaxes(1, 2).reshape(n, c, hh, ww)


def encoder_forward(model: EncoderModel, x0, t) -> Tensor:
    """Embedding ``v[N, embed_dim]`` of clean images ``x0`` at timesteps ``t``."""
    cfg = model.config
    p = model.params
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    _check_image(x0, cfg.input_size, cfg.in_channels, "encoder")
    t = _as_t(t, x0.shape[0])
    temb = Tensor(timestep_embedding(t, cfg.time_dim))
    temb = tn.silu(linear(tn.silu(linear(temb, p, "temb.fc1")), p, "temb.fc2"))
    h = x0
    for kind, name, *args in _encoder_layout(cfg):
        if kind == "conv_in":
            h = tn.conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"], 1, 1)
        elif kind == "res":
            h = _res_unit(p, name, h, temb, cfg)
        elif kind == "attn":
            h = _attn_unit(p, name, h, cfg)
        elif kind == "down":
            h = tn.conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"], 2, 1)
        else:
            c = h.shape[1]
            h = tn.group_norm(h, _groups(cfg, c), p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
            pooled = tn.silu(h).mean(axis=(2, 3))
            return linear(pooled, p, f"{name}.fc")
    raise AssertionError("encoder layout has no output stage")
