"""Noise schedules, forward corruption, multi-step stacks and posterior sampling.

The forward process corrupts a clean patch x0 in closed form,

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,      abar_t = prod_{i<=t} (1 - beta_i)

with the convention abar_0 = 1 (t = 0 returns x0 unchanged). Model inputs are
channel concatenations of the same patch corrupted at several steps. The
reverse path draws from the Gaussian posterior q(z_{t'} | z_t, z0), whose mean
and variance follow from Bayes' rule on the Gaussian chain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

DEFAULT_STEPS = 500
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_FUSE_STEPS = (0, 50, 100, 200, 400)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha-bar tables, index 0 reserved (abar_0 = 1)."""

    beta: np.ndarray       # [T+1] float64, beta[0] unused (0)
    alpha: np.ndarray      # [T+1], alpha[0] = 1
    alpha_bar: np.ndarray  # [T+1], alpha_bar[0] = 1

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        """Build tables from explicit per-step betas (degenerate values allowed for tests)."""
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("need at least one beta")
        if np.any(b < 0) or np.any(b >= 1):
            raise ValueError("betas must lie in [0, 1)")
        beta = np.concatenate([[0.0], b])
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def build_schedule(T: int, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end over T steps (64-bit tables)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.full(T, beta_start) if T == 1 else np.linspace(beta_start, beta_end, T)
    return NoiseSchedule.from_betas(betas)


def schedule_to_csv(sched: NoiseSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "alpha", "alpha_bar"])
        for t in range(1, sched.T + 1):
            writer.writerow([t, repr(sched.beta[t]), repr(sched.alpha[t]), repr(sched.alpha_bar[t])])


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption at step t; t = 0 returns x0 exactly."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"step {t} outside schedule range 0..{sched.T}")
    x0 = np.asarray(x0)
    if t == 0:
        return x0.copy()
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar[t]
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


@dataclass
class FusedStack:
    """Channel concatenation of the same batch corrupted at several steps."""

    data: np.ndarray        # [B, P, P, C * S]
    steps: tuple[int, ...]
    eps_seeds: np.ndarray   # [B] per-sample seeds used for the noise draws


def fuse_steps(x0: np.ndarray, steps, sched: NoiseSchedule, rng: np.random.Generator) -> FusedStack:
    """Corrupt ``x0`` [B,P,P,C] at each step and concatenate along channels.

    Noise is drawn independently per (sample, step) from per-sample child
    generators, so a given ``rng`` state reproduces the stack exactly.
    """
    steps = tuple(int(s) for s in steps)
    if list(steps) != sorted(steps):
        raise ValueError(f"steps must be ascending, got {steps}")
    if steps and steps[-1] > sched.T:
        raise ValueError(f"step {steps[-1]} exceeds schedule T={sched.T}")
    x0 = np.asarray(x0)
    if x0.ndim != 4:
        raise ShapeError(f"expected [B,P,P,C], got {x0.shape}")
    b = x0.shape[0]
    seeds = rng.integers(0, 2**63 - 1, size=b, dtype=np.int64)
    blocks = []
    for si, t in enumerate(steps):
        if t == 0:
            blocks.append(x0.copy())
            continue
        eps = np.empty_like(x0, dtype=np.float64)
        for i in range(b):
            eps[i] = np.random.default_rng([int(seeds[i]), si]).standard_normal(x0.shape[1:])
        blocks.append(forward_noise(x0.astype(np.float64), t, eps, sched).astype(x0.dtype))
    return FusedStack(data=np.concatenate(blocks, axis=-1), steps=steps, eps_seeds=seeds)


def fuse_steps_seeded(x0: np.ndarray, steps, sched: NoiseSchedule, seeds: np.ndarray) -> FusedStack:
    """Like fuse_steps but with caller-fixed per-sample seeds (stable features)."""
    steps = tuple(int(s) for s in steps)
    x0 = np.asarray(x0)
    blocks = []
    for si, t in enumerate(steps):
        if t == 0:
            blocks.append(x0.copy())
            continue
        eps = np.empty_like(x0, dtype=np.float64)
        for i in range(x0.shape[0]):
            eps[i] = np.random.default_rng([int(seeds[i]), si]).standard_normal(x0.shape[1:])
        blocks.append(forward_noise(x0.astype(np.float64), t, eps, sched).astype(x0.dtype))
    return FusedStack(data=np.concatenate(blocks, axis=-1), steps=steps, eps_seeds=np.asarray(seeds))


@dataclass
class PosteriorParams:
    mean: np.ndarray
    var: float


def _strided_posterior(z0, zt, t: int, t_prev: int, sched: NoiseSchedule) -> PosteriorParams:
    """Gaussian posterior of z_{t_prev} given (z_t, z0) on the corruption chain."""
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    one_minus = 1.0 - ab_t
    if one_minus <= 0.0:
        # no noise has been injected up to t: the chain is deterministic
        return PosteriorParams(mean=np.array(zt, dtype=np.float64, copy=True), var=0.0)
    ratio = ab_t / ab_p
    coef0 = np.sqrt(ab_p) * (1.0 - ratio) / one_minus
    coeft = np.sqrt(ratio) * (1.0 - ab_p) / one_minus
    var = (1.0 - ab_p) / one_minus * (1.0 - ratio)
    mean = coef0 * np.asarray(z0, dtype=np.float64) + coeft * np.asarray(zt, dtype=np.float64)
    return PosteriorParams(mean=mean, var=float(max(var, 0.0)))


def posterior_params(z0, zt, t: int, sched: NoiseSchedule) -> PosteriorParams:
    """Posterior mean and variance of z_{t-1} given (z_t, z0); defined for t >= 1."""
    if t < 1 or t > sched.T:
        raise ValueError(f"posterior needs 1 <= t <= {sched.T}, got {t}")
    z0, zt = np.asarray(z0), np.asarray(zt)
    if z0.shape != zt.shape:
        raise ShapeError(f"z0 shape {z0.shape} != zt shape {zt.shape}")
    return _strided_posterior(z0, zt, t, t - 1, sched)


def denoise_loss(model_out: Tensor, target: Tensor) -> Tensor:
    """Half mean squared error over all elements (reconstruction objective)."""
    if model_out.shape != target.shape:
        raise ShapeError(f"output {model_out.shape} != target {target.shape}")
    diff = model_out - target
    return (diff * diff).mean() * 0.5


def reverse_sample(
    denoiser,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    stride: int = 1,
) -> np.ndarray:
    """Iterative reverse chain z_T -> z_{T-stride} -> ... -> z_0.

    ``denoiser(z_t, t)`` returns an estimate of the clean signal; it is clamped
    to [-1, 2] as a divergence guard on normalized data. Each visited step
    draws from the strided posterior; the final step returns its mean.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    z = rng.standard_normal(shape)
    t = sched.T
    while t > 0:
        t_prev = max(t - stride, 0)
        x0 = np.clip(np.asarray(denoiser(z, t), dtype=np.float64), -1.0, 2.0)
        if x0.shape != z.shape:
            raise ShapeError(f"denoiser returned {x0.shape}, expected {z.shape}")
        post = _strided_posterior(x0, z, t, t_prev, sched)
        if t_prev == 0 or post.var == 0.0:
            z = post.mean
        else:
            z = post.mean + np.sqrt(post.var) * rng.standard_normal(shape)
        if not np.all(np.isfinite(z)):
            raise ArithmeticError(f"reverse sampling diverged at step {t_prev} (non-finite values)")
        t = t_prev
    return z
