"""DDPM schedules, corruption, reverse transitions and the ancestral sampler.

Steps are 1-based: ``t = 1..T``.  ``alpha_bar(0)`` is defined as 1 so the
final reverse step carries no noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadRange, ShapeMismatch, StepOutOfRange

DEFAULT_TRAIN_BETAS = (1e-4, 0.05, 200)
DEFAULT_INFER_BETAS = (1e-4, 1e-3, 1e-2, 5e-2, 2e-1, 5e-1)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance schedule.

    ``net_steps`` maps each step of this schedule to the step index fed to
    the denoiser.  For a training schedule it is ``1..T``; for a short
    inference grid it points at the training step with the nearest
    ``alpha_bar``.
    """

    betas: np.ndarray
    net_steps: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64).ravel()
        if b.size < 1:
            raise BadRange("schedule needs at least one step")
        if np.any(b <= 0) or np.any(b >= 1):
            raise BadRange(f"betas must lie in (0, 1), got range [{b.min()}, {b.max()}]")
        if np.any(np.diff(b) < 0):
            raise BadRange("betas must be non-decreasing")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)
        steps = np.arange(1, b.size + 1) if self.net_steps is None else np.asarray(self.net_steps, np.int64)
        if steps.shape != b.shape:
            raise BadRange("net_steps must have one entry per step")
        steps.setflags(write=False)
        object.__setattr__(self, "net_steps", steps)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside 1..{self.T}")
        return t

    def beta(self, t):
        return self.betas[self.check_step(t) - 1]

    def alpha(self, t):
        return self.alphas[self.check_step(t) - 1]

    def alpha_bar(self, t):
        t = int(t)
        if t == 0:
            return 1.0
        return self.alpha_bars[self.check_step(t) - 1]

    def posterior_variance(self, t) -> float:
        """(1 - alpha_bar(t-1)) / (1 - alpha_bar(t)) * beta(t)."""
        t = self.check_step(t)
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)


def make_schedule(kind: str = "linear", T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    if kind != "linear":
        raise BadRange(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise BadRange(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise BadRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def align_inference_schedule(betas, train: NoiseSchedule) -> NoiseSchedule:
    """Short inference grid whose steps reuse the nearest-alpha_bar training step."""
    infer = NoiseSchedule(betas)
    abar_train = train.alpha_bars
    steps = [int(np.argmin(np.abs(abar_train - a))) + 1 for a in infer.alpha_bars]
    return NoiseSchedule(infer.betas, steps)


def _match(a, b, what):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def forward_sample(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    z0, eps = _match(z0, eps, "forward_sample")
    ab = schedule.alpha_bar(schedule.check_step(t))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def recover_x0(z_t, t, eps, schedule: NoiseSchedule):
    z_t, eps = _match(z_t, eps, "recover_x0")
    ab = schedule.alpha_bar(schedule.check_step(t))
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def posterior_mean(z_t, t, eps_pred, schedule: NoiseSchedule):
    """mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)."""
    z_t, eps_pred = _match(z_t, eps_pred, "posterior_mean")
    t = schedule.check_step(t)
    coef = schedule.beta(t) / np.sqrt(1.0 - schedule.alpha_bar(t))
    return (z_t - coef * eps_pred) / np.sqrt(schedule.alpha(t))


def reverse_step(z_t, t, eps_pred, schedule: NoiseSchedule, noise):
    t = schedule.check_step(t)
    mu = posterior_mean(z_t, t, eps_pred, schedule)
    if t == 1:
        return mu
    _match(mu, noise, "reverse_step noise")
    return mu + np.sqrt(schedule.posterior_variance(t)) * np.asarray(noise, float)


def training_loss(eps, eps_pred) -> float:
    eps, eps_pred = _match(eps, eps_pred, "training_loss")
    return float(np.mean((eps - eps_pred) ** 2))


def sample(denoiser, condition, schedule: NoiseSchedule, shape, rng: np.random.Generator):
    """Ancestral sampling from pure noise.

    ``denoiser(z_t, net_step, condition)`` must return a noise prediction of
    the same shape as ``z_t``; ``net_step`` comes from ``schedule.net_steps``.
    """
    z = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        eps_pred = np.asarray(denoiser(z, int(schedule.net_steps[t - 1]), condition), float)
        if eps_pred.shape != z.shape:
            raise ShapeMismatch(f"denoiser returned {eps_pred.shape}, expected {z.shape}")
        noise = rng.standard_normal(shape) if t > 1 else None
        z = reverse_step(z, t, eps_pred, schedule, noise)
    return z
