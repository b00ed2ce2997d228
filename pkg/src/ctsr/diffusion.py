"""DDPM machinery: schedule, closed-form forward process, eps-loss and spaced ancestral sampling.

Timesteps are 1-indexed throughout (t in 1..T); the tables are stored 0-indexed,
so ``alpha_bar[t - 1]`` is the cumulative product up to and including step t.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, PreconditionError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    def ab(self, t) -> np.ndarray:
        """alpha_bar at 1-indexed ``t``; ``t = 0`` maps to 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_1": float(self.beta[0]), "beta_T": float(self.beta[-1]), "kind": self.kind}


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r}")
    beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not alpha_bar[-1] > 0.0 or np.any(np.diff(alpha_bar) >= 0):
        raise ConfigError(f"schedule underflows: alpha_bar reaches {alpha_bar[-1]:.3g} before t = {T}")
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, kind)


def _check_t(t, T: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > T:
        raise PreconditionError(f"timestep out of range 1..{T}: {t.tolist()}")
    return t


def _per_item(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(values, dtype=like.dtype)[t]
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` is an int or a per-item tensor."""
    if eps.shape != z0.shape:
        raise PreconditionError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t = _check_t(t, sched.T)
    ab = sched.ab(np.arange(sched.T + 1))
    return _per_item(np.sqrt(ab), t, z0) * z0 + _per_item(np.sqrt(1.0 - ab), t, z0) * eps


def q_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One forward transition q(z_t | z_{t-1})."""
    beta = float(sched.beta[t - 1])
    return math.sqrt(1.0 - beta) * z_prev + math.sqrt(beta) * eps


def sample_timestep(gen: torch.Generator, sched: NoiseSchedule, n: int = 1) -> torch.Tensor:
    """Uniform draws on {1..T} from ``gen``."""
    return torch.randint(1, sched.T + 1, (n,), generator=gen)


def training_loss(model, z0, f_lr, f_p, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between injected noise and the model's noise prediction."""
    z_t = forward_diffuse(z0, t, eps, sched)
    pred = model(z_t, torch.as_tensor(t, dtype=torch.long), f_p, f_lr)
    if pred.shape != eps.shape:
        raise PreconditionError(f"model output {tuple(pred.shape)} != latent shape {tuple(eps.shape)}")
    if not torch.isfinite(pred).all():
        bad = (~torch.isfinite(pred)).sum().item()
        raise NumericError(f"model produced {bad} non-finite values (t={torch.as_tensor(t).tolist()})")
    return torch.mean((eps - pred) ** 2)


@dataclass(frozen=True)
class SpacedSteps:
    taus: tuple  # strictly increasing, ends at T
    alpha_bar: np.ndarray  # ab at each tau
    alpha_bar_prev: np.ndarray  # ab at the previous tau (1 before the first)
    betas: np.ndarray  # effective betas

    def __len__(self) -> int:
        return len(self.taus)


def spaced_subsequence(sched: NoiseSchedule, S: int) -> SpacedSteps:
    T = sched.T
    if not 1 <= S <= T:
        raise PreconditionError(f"need 1 <= S <= T, got S={S}, T={T}")
    raw = np.floor(np.arange(1, S + 1) * T / S + 0.5).astype(int)
    taus = sorted(set(int(x) for x in np.clip(raw, 1, T)))
    if taus[-1] != T:
        taus.append(T)
    ab = sched.ab(taus)
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / ab_prev
    return SpacedSteps(tuple(taus), ab, ab_prev, betas)


def _noise_like(z: torch.Tensor, gens) -> torch.Tensor:
    if isinstance(gens, torch.Generator):
        return torch.randn(z.shape, generator=gens, dtype=z.dtype)
    return torch.stack([torch.randn(z.shape[1:], generator=g, dtype=z.dtype) for g in gens])


def _generators(seed):
    if isinstance(seed, torch.Generator):
        return seed
    if isinstance(seed, (list, tuple)):
        out = []
        for s in seed:
            if isinstance(s, torch.Generator):
                out.append(s)
            else:
                g = torch.Generator()
                g.manual_seed(int(s))
                out.append(g)
        return out
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _posterior_var(beta: float, ab: float, ab_prev: float, variance: str) -> float:
    if variance == "beta":
        return beta
    if variance == "posterior":
        return beta * (1.0 - ab_prev) / (1.0 - ab)
    raise ConfigError(f"unknown variance choice {variance!r}")


@torch.no_grad()
def ddpm_sample(model, sched: NoiseSchedule, steps: SpacedSteps, f_lr, f_p, seed, shape=None,
                variance: str = "posterior", trajectory: list | None = None) -> torch.Tensor:
    """Ancestral sampling over the spaced subsequence, in reverse.

    ``seed`` may be an int, a generator, or a list of per-item seeds or
    generators (batch results then do not depend on batch composition).
    The last update (to step 0) adds no noise.
    """
    gens = _generators(seed)
    if shape is None:
        if f_lr is None:
            raise PreconditionError("need an explicit latent shape when f_lr is absent")
        shape = tuple(f_lr.shape)
    z = _noise_like(torch.empty(shape), gens)
    if trajectory is not None:
        trajectory.append(z.clone())
    n = shape[0]
    for i in reversed(range(len(steps))):
        t = steps.taus[i]
        ab, ab_prev, beta = float(steps.alpha_bar[i]), float(steps.alpha_bar_prev[i]), float(steps.betas[i])
        eps = model(z, torch.full((n,), t, dtype=torch.long), f_p, f_lr)
        z = (z - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if i > 0:
            z = z + math.sqrt(_posterior_var(beta, ab, ab_prev, variance)) * _noise_like(z, gens)
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite latent at sampler step {len(steps) - i} (t={t})")
        if trajectory is not None:
            trajectory.append(z.clone())
    return z


@torch.no_grad()
def ancestral_sample(model, sched: NoiseSchedule, f_lr, f_p, seed, shape=None,
                     variance: str = "posterior", trajectory: list | None = None) -> torch.Tensor:
    """Plain full-length DDPM sampler over t = T..1 using the schedule's own betas."""
    gens = _generators(seed)
    if shape is None:
        shape = tuple(f_lr.shape)
    z = _noise_like(torch.empty(shape), gens)
    if trajectory is not None:
        trajectory.append(z.clone())
    n = shape[0]
    for t in range(sched.T, 0, -1):
        beta, alpha = float(sched.beta[t - 1]), float(sched.alpha[t - 1])
        ab = float(sched.alpha_bar[t - 1])
        ab_prev = float(sched.alpha_bar[t - 2]) if t > 1 else 1.0
        eps = model(z, torch.full((n,), t, dtype=torch.long), f_p, f_lr)
        z = (z - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            z = z + math.sqrt(_posterior_var(beta, ab, ab_prev, variance)) * _noise_like(z, gens)
        if trajectory is not None:
            trajectory.append(z.clone())
    return z
