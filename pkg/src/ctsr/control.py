"""Text-conditioned denoising U-Net and its side-control extension.

The base U-Net is split into an :class:`EncoderHalf` (timestep MLP, input
conv, down blocks, middle block) and a :class:`DecoderHalf`. The condition
network is a trainable deep copy of the encoder half whose input conv takes
``[z_t, f_lr]``; its per-resolution outputs pass through fusion projections
and are added to the output of the matching decoder block::

    o_i = D_i(o_{i-1}, f_p) + fuse_i(cond_i([z_t, f_lr], f_p))
"""

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import io
from .errors import ConfigError, PreconditionError
from .text import EMBED_DIM


OUTPUT_MODES = ("eps", "v")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    widths: tuple = (32, 64, 96)
    context_dim: int = EMBED_DIM
    time_dim: int = 64
    heads: int = 4
    groups: int = 8
    output: str = "eps"

    def validate(self, text_dim: int = EMBED_DIM) -> None:
        if len(self.widths) != 3 or any(w <= 0 for w in self.widths):
            raise ConfigError(f"need three positive widths, got {self.widths}")
        if self.context_dim != text_dim:
            raise ConfigError(f"cross-attention width {self.context_dim} != prompt embedding width {text_dim}")
        if self.output not in OUTPUT_MODES:
            raise ConfigError(f"output must be one of {OUTPUT_MODES}, got {self.output!r}")
        for w in self.widths:
            if w % self.groups or w % self.heads:
                raise ConfigError(f"width {w} must be divisible by groups={self.groups} and heads={self.heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (32, 64, 96)))
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Image tokens attend to prompt tokens; residual output."""

    def __init__(self, channels, context_dim, heads, groups):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        split = lambda y: y.reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)  # noqa: E731
        q, k, v = split(self.q(tokens)), split(self.k(ctx)), split(self.v(ctx))
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(att).transpose(1, 2).reshape(b, c, h, w)


class EncoderHalf(nn.Module):
    def __init__(self, cfg: DenoiserConfig, in_channels: int | None = None):
        super().__init__()
        w0, w1, w2 = cfg.widths
        tdim = 2 * cfg.time_dim
        self.time_dim = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(in_channels or cfg.latent_channels, w0, 3, padding=1)
        self.down0 = ResBlock(w0, w0, tdim, cfg.groups)
        self.ds0 = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.down1 = ResBlock(w0, w1, tdim, cfg.groups)
        self.ds1 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.down2 = ResBlock(w1, w2, tdim, cfg.groups)
        self.mid1 = ResBlock(w2, w2, tdim, cfg.groups)
        self.mid_attn = CrossAttention(w2, cfg.context_dim, cfg.heads, cfg.groups)
        self.mid2 = ResBlock(w2, w2, tdim, cfg.groups)

    def forward(self, x, t, ctx):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim))
        h0 = self.down0(self.conv_in(x), temb)
        h1 = self.down1(self.ds0(h0), temb)
        h2 = self.down2(self.ds1(h1), temb)
        m = self.mid2(self.mid_attn(self.mid1(h2, temb), ctx), temb)
        return temb, (h0, h1, h2), m


class DecoderHalf(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        tdim = 2 * cfg.time_dim
        self.up2 = ResBlock(w2 + w2, w2, tdim, cfg.groups)
        self.attn2 = CrossAttention(w2, cfg.context_dim, cfg.heads, cfg.groups)
        self.up1 = ResBlock(w2 + w1, w1, tdim, cfg.groups)
        self.attn1 = CrossAttention(w1, cfg.context_dim, cfg.heads, cfg.groups)
        self.up0 = ResBlock(w1 + w0, w0, tdim, cfg.groups)
        self.attn0 = CrossAttention(w0, cfg.context_dim, cfg.heads, cfg.groups)
        self.norm_out = nn.GroupNorm(cfg.groups, w0)
        self.conv_out = nn.Conv2d(w0, cfg.latent_channels, 3, padding=1)

    def forward(self, m, skips, temb, ctx, controls=None):
        h0, h1, h2 = skips
        o = self.attn2(self.up2(torch.cat([m, h2], 1), temb), ctx)
        if controls is not None:
            o = o + controls[0]
        o = F.interpolate(o, scale_factor=2, mode="nearest")
        o = self.attn1(self.up1(torch.cat([o, h1], 1), temb), ctx)
        if controls is not None:
            o = o + controls[1]
        o = F.interpolate(o, scale_factor=2, mode="nearest")
        o = self.attn0(self.up0(torch.cat([o, h0], 1), temb), ctx)
        if controls is not None:
            o = o + controls[2]
        return self.conv_out(F.silu(self.norm_out(o)))


class BaseUNet(nn.Module):
    """eps-prediction U-Net; ``forward(z_t, t, f_p, f_lr=None)`` ignores ``f_lr``.

    With ``output="v"`` the network body predicts v and the forward pass
    returns ``eps = sqrt(1 - ab) z_t + sqrt(ab) v``. The returned quantity is
    still eps, but the implied x0 no longer divides network error by
    ``sqrt(ab)``, which is tiny near t = T. This mode needs the schedule's
    alpha_bar, attached with :meth:`attach_schedule`.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = EncoderHalf(cfg)
        self.decoder = DecoderHalf(cfg)
        self.register_buffer("alpha_bar", torch.empty(0), persistent=False)

    def attach_schedule(self, alpha_bar) -> "BaseUNet":
        self.alpha_bar = torch.from_numpy(np.array(alpha_bar, dtype=np.float32))
        return self

    def to_eps(self, out, z_t, t):
        if self.cfg.output == "eps":
            return out
        if self.alpha_bar.numel() == 0:
            raise PreconditionError("v-output model needs attach_schedule() before use")
        ab = self.alpha_bar[t - 1].view(-1, 1, 1, 1)
        return (1.0 - ab).sqrt() * z_t + ab.sqrt() * out

    def forward(self, z_t, t, f_p, f_lr=None):
        _check_latent(z_t, self.cfg)
        t = _as_t(t, z_t)
        temb, skips, m = self.encoder(z_t, t, f_p)
        return self.to_eps(self.decoder(m, skips, temb, f_p), z_t, t)


def _as_t(t, z):
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(z.shape[0])
    return t


def _check_latent(z, cfg):
    if z.ndim != 4 or z.shape[1] != cfg.latent_channels or z.shape[-1] % 4 or z.shape[-2] % 4:
        raise PreconditionError(f"latent must be (N, {cfg.latent_channels}, h, w) with h, w divisible by 4; got {tuple(z.shape)}")


def build_base_unet(cfg: DenoiserConfig, seed: int) -> BaseUNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return BaseUNet(cfg)


FUSION_MODES = ("zero-init", "bare")


@dataclass
class ControlOptions:
    fusion: str = "zero-init"
    cond_init: str = "pretrained"  # pretrained | random
    cond_seed: int = 0
    extra: dict = field(default_factory=dict)


class ControlledModel(nn.Module):
    """Frozen base U-Net + trainable condition network + per-resolution fusion."""

    def __init__(self, base: BaseUNet, cond: EncoderHalf, fusion: str = "zero-init"):
        super().__init__()
        if fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
        self.base = base
        self.cond = cond
        self.fusion_mode = fusion
        w0, w1, w2 = base.cfg.widths
        if fusion == "zero-init":
            self.fusion = nn.ModuleList([_zero_conv(w) for w in (w2, w1, w0)])
        else:
            self.fusion = nn.ModuleList([nn.Identity() for _ in range(3)])
        self.control_scale = 1.0

    @property
    def cfg(self) -> DenoiserConfig:
        return self.base.cfg

    def control_signals(self, z_t, t, f_p, f_lr):
        _, (c0, c1, _), c_mid = self.cond(torch.cat([z_t, f_lr], 1), t, f_p)
        return [fuse(c) for fuse, c in zip(self.fusion, (c_mid, c1, c0))]

    def forward(self, z_t, t, f_p, f_lr):
        _check_latent(z_t, self.cfg)
        if f_lr is None or f_lr.shape != z_t.shape:
            got = None if f_lr is None else tuple(f_lr.shape)
            raise PreconditionError(f"f_lr shape {got} must match z_t shape {tuple(z_t.shape)}")
        t = _as_t(t, z_t)
        temb, skips, m = self.base.encoder(z_t, t, f_p)
        controls = [self.control_scale * c for c in self.control_signals(z_t, t, f_p, f_lr)]
        return self.base.to_eps(self.base.decoder(m, skips, temb, f_p, controls), z_t, t)

    def trainable_parameters(self):
        return [p for p in list(self.cond.parameters()) + list(self.fusion.parameters()) if p.requires_grad]

    def groups(self) -> dict:
        return {
            "base": dict(self.base.state_dict()),
            "cond": dict(self.cond.state_dict()),
            "fusion": dict(self.fusion.state_dict()),
        }

    def base_hash(self) -> str:
        return io.hash_arrays(self.base.state_dict())


def _zero_conv(ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(ch, ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def clone_condition_network(base: BaseUNet) -> EncoderHalf:
    """Deep-copy the base encoder half and widen its input conv to take ``[z_t, f_lr]``.

    The extra input columns start at zero, so the copy initially ignores
    ``f_lr`` and reproduces the base encoder exactly.
    """
    cond = copy.deepcopy(base.encoder)
    old = cond.conv_in
    c = base.cfg.latent_channels
    wide = nn.Conv2d(2 * c, old.out_channels, old.kernel_size, padding=old.padding)
    with torch.no_grad():
        wide.weight.zero_()
        wide.weight[:, :c] = old.weight
        wide.bias.copy_(old.bias)
    cond.conv_in = wide
    for p in cond.parameters():
        p.requires_grad_(True)
    return cond


def random_condition_network(cfg: DenoiserConfig, seed: int) -> EncoderHalf:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return EncoderHalf(cfg, in_channels=2 * cfg.latent_channels)


def freeze_base(model: ControlledModel) -> ControlledModel:
    for p in model.base.parameters():
        p.requires_grad_(False)
    model.base.eval()
    return model


def build_controlled(base: BaseUNet, fusion: str = "zero-init", cond_init: str = "pretrained",
                     cond_seed: int = 0) -> ControlledModel:
    if cond_init == "pretrained":
        cond = clone_condition_network(base)
    elif cond_init == "random":
        cond = random_condition_network(base.cfg, cond_seed)
    else:
        raise ConfigError(f"cond_init must be pretrained or random, got {cond_init!r}")
    return freeze_base(ControlledModel(base, cond, fusion))


def load_state(module: nn.Module, arrays: dict) -> None:
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
