"""Tiny convolutional VAE: images in [0, 1] <-> 4-channel latents at 1/4 resolution."""

import copy
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import io
from .errors import NumericError, PreconditionError, StateError
from .seeding import derive_seed, numpy_rng, torch_generator

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DOWNSAMPLE = 4


class _Res(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Encoder(nn.Module):
    def __init__(self, widths=(32, 64), latent=LATENT_CHANNELS):
        super().__init__()
        w1, w2 = widths
        self.net = nn.Sequential(
            nn.Conv2d(1, w1 // 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w1 // 2, w1, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w1, w2, 3, padding=1),
            _Res(w2),
            nn.SiLU(),
        )
        self.head = nn.Conv2d(w2, 2 * latent, 3, padding=1)

    def forward(self, x):
        mean, logvar = self.head(self.net(x)).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)


class Decoder(nn.Module):
    def __init__(self, widths=(32, 64), latent=LATENT_CHANNELS):
        super().__init__()
        w1, w2 = widths
        self.net = nn.Sequential(
            nn.Conv2d(latent, w2, 3, padding=1),
            _Res(w2),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w2, w1, 3, padding=1),
            _Res(w1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w1, w1, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w1, 1, 3, padding=1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class LatentAutoencoder(nn.Module):
    """Encoder/decoder pair plus the global latent scale.

    :meth:`encode` returns latents divided by ``latent_scale`` (roughly unit
    variance over the training set) and :meth:`decode` undoes it.
    """

    def __init__(self, widths=(32, 64), latent=LATENT_CHANNELS):
        super().__init__()
        self.widths = tuple(widths)
        self.encoder = Encoder(widths, latent)
        self.decoder = Decoder(widths, latent)
        self.register_buffer("latent_scale", torch.ones(()))
        self.trained = False

    def _require_trained(self):
        if not self.trained:
            raise StateError("autoencoder weights are untrained; run train-vae or load a checkpoint")

    def encode(self, x, mode: str = "mean", seed=None, encoder: nn.Module | None = None) -> torch.Tensor:
        self._require_trained()
        x = as_batch(x)
        if x.shape[-1] % DOWNSAMPLE or x.shape[-2] % DOWNSAMPLE:
            raise PreconditionError(f"image side must be divisible by {DOWNSAMPLE}, got {tuple(x.shape[-2:])}")
        mean, logvar = (encoder or self.encoder)(x)
        if mode == "mean":
            z = mean
        elif mode == "sample":
            gen = torch_generator(0 if seed is None else seed, "vae-sample")
            z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
        else:
            raise PreconditionError(f"unknown encode mode {mode!r}")
        return z / self.latent_scale

    def decode(self, z) -> torch.Tensor:
        self._require_trained()
        z = torch.as_tensor(z, dtype=torch.float32)
        if z.ndim == 3:
            z = z[None]
        if z.ndim != 4 or z.shape[1] != LATENT_CHANNELS:
            raise PreconditionError(f"expected latent of shape (N, {LATENT_CHANNELS}, h, w), got {tuple(z.shape)}")
        return self.decoder(z * self.latent_scale)

    def state_groups(self) -> dict:
        return {
            "encoder": {k: v for k, v in self.encoder.state_dict().items()},
            "decoder": {k: v for k, v in self.decoder.state_dict().items()},
        }

    def encoder_hash(self) -> str:
        return io.hash_arrays(self.encoder.state_dict())


def as_batch(x) -> torch.Tensor:
    """Accept HxW, NxHxW or Nx1xHxW arrays/tensors; return float32 Nx1xHxW."""
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=torch.float32)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def kl_standard_normal(mean, logvar) -> torch.Tensor:
    return 0.5 * torch.mean(mean**2 + logvar.exp() - 1.0 - logvar)


def save_vae(vae: LatentAutoencoder, stem, meta: dict | None = None) -> None:
    info = {
        "kind": "vae",
        "widths": list(vae.widths),
        "latent_scale": float(vae.latent_scale),
        "version": 1,
        **(meta or {}),
    }
    io.save_checkpoint(stem, vae.state_groups(), info)


def load_vae(stem) -> LatentAutoencoder:
    stem = Path(stem)
    if stem.is_dir():
        stem = stem / "vae"
    try:
        groups, meta = io.load_checkpoint(stem)
    except FileNotFoundError as exc:
        raise StateError(f"no VAE checkpoint at {stem}") from exc
    vae = LatentAutoencoder(tuple(meta.get("widths", (32, 64))))
    vae.encoder.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in groups["encoder"].items()})
    vae.decoder.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in groups["decoder"].items()})
    vae.latent_scale.fill_(float(meta["latent_scale"]))
    vae.requires_grad_(False)
    vae.eval()
    vae.trained = True
    vae.meta = meta
    return vae


def trainable_encoder_copy(vae: LatentAutoencoder) -> Encoder:
    enc = copy.deepcopy(vae.encoder)
    for p in enc.parameters():
        p.requires_grad_(True)
    return enc


@torch.no_grad()
def encode_all(vae: LatentAutoencoder, images, batch: int = 32, encoder=None) -> torch.Tensor:
    chunks = [vae.encode(images[i : i + batch], "mean", encoder=encoder) for i in range(0, len(images), batch)]
    return torch.cat(chunks)


def train_vae(images: np.ndarray, cfg: dict, out_dir, seed: int = 0) -> LatentAutoencoder:
    """Fit the autoencoder on ``images`` (N x H x W in [0, 1]).

    Trains on random crops with random flips; minimises MSE plus
    ``kl_weight`` times the KL to a standard normal. A checkpoint and the loss
    curve are written every epoch, and the global latent scale is fixed at the
    end from the mean-mode latents of the full training images.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iterations = int(cfg["iterations"])
    batch_size = int(cfg["batch_size"])
    crop = int(cfg.get("crop", images.shape[-1]))
    kl_weight = float(cfg["kl_weight"])
    n, size = len(images), images.shape[-1]

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "vae-init"))
        vae = LatentAutoencoder(tuple(cfg.get("widths", (32, 64))))
    opt = torch.optim.Adam(list(vae.encoder.parameters()) + list(vae.decoder.parameters()), lr=float(cfg["lr"]))
    warm = max(1, iterations // 20)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: min(1.0, (k + 1) / warm) * 0.5 * (1.0 + math.cos(math.pi * min(k, iterations) / iterations))
    )
    epoch_len = max(1, math.ceil(n / batch_size))
    curve = []
    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    vae.train()
    for k in range(iterations):
        rng = numpy_rng(seed, "vae-iter", k)
        idx = rng.integers(0, n, batch_size)
        ys = rng.integers(0, size - crop + 1, batch_size)
        xs = rng.integers(0, size - crop + 1, batch_size)
        flips = rng.random((batch_size, 2)) < 0.5
        crops = []
        for j in range(batch_size):
            c = data[idx[j], ys[j] : ys[j] + crop, xs[j] : xs[j] + crop]
            if flips[j, 0]:
                c = c.flip(0)
            if flips[j, 1]:
                c = c.flip(1)
            crops.append(c)
        x = torch.stack(crops)[:, None]
        mean, logvar = vae.encoder(x)
        gen = torch_generator(seed, "vae-eps", k)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
        rec = vae.decoder(z)
        mse = F.mse_loss(rec, x)
        kl = kl_standard_normal(mean, logvar)
        loss = mse + kl_weight * kl
        if not torch.isfinite(loss):
            raise NumericError(f"VAE loss diverged at iteration {k}: mse={mse.item()}, kl={kl.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        curve.append({"iteration": k, "loss": loss.item(), "mse": mse.item(), "kl": kl.item()})
        if (k + 1) % epoch_len == 0 or k + 1 == iterations:
            vae.trained = True
            save_vae(vae, out_dir / "vae_latest", {"iteration": k + 1})
            io.write_json(out_dir / "vae_loss.json", curve)
            log.info("vae iter %d/%d loss %.5f", k + 1, iterations, loss.item())
    vae.eval()
    vae.trained = True
    with torch.no_grad():
        vae.latent_scale.fill_(1.0)
        raw = encode_all(vae, data)
        vae.latent_scale.fill_(float(raw.std()))
    save_vae(vae, out_dir / "vae", {"iterations": iterations, "config_hash": io.hash_json(cfg), "seed": seed})
    io.write_json(out_dir / "vae_loss.json", curve)
    return vae
