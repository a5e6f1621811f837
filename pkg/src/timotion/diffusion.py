"""Cosine noise schedule, forward noising, DDPM/DDIM steps, guidance and samplers.

Tables are indexed by diffusion step with index 0 standing for clean data
(alpha_bar[0] == 1), so ``alpha_bar[t]`` is the value at step t for t in 1..T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import MotionPair
from .errors import UsageError
from .seeding import stream


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def coef(self, t, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), shaped to broadcast over ``ndim``-d data.

        A vector ``t`` indexes the leading (batch) axis.
        """
        ab = self.alpha_bar[np.asarray(t)]
        if ab.ndim:
            ab = ab.reshape(ab.shape + (1,) * (ndim - ab.ndim))
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def cosine_alpha_bar(t, T: int, s: float = 0.008) -> np.ndarray:
    f = lambda u: np.cos((u / T + s) / (1 + s) * np.pi / 2) ** 2
    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 2:
        raise UsageError(f"T must be >= 2, got {T}")
    ab = cosine_alpha_bar(np.arange(T + 1), T, s)
    betas = np.zeros(T + 1)
    betas[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    if np.shape(eps) != x0.shape:
        raise UsageError(f"noise shape {np.shape(eps)} differs from data shape {x0.shape}")
    a, b = schedule.coef(t, x0.ndim)
    return a * x0 + b * eps


def eps_from_x0(schedule: NoiseSchedule, x_t: np.ndarray, x0: np.ndarray, t) -> np.ndarray:
    a, b = schedule.coef(t, np.ndim(x_t))
    return (x_t - a * x0) / b


def x0_from_eps(schedule: NoiseSchedule, x_t: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    a, b = schedule.coef(t, np.ndim(x_t))
    return (x_t - b * eps) / a


def ddpm_variance(schedule: NoiseSchedule, t: int) -> float:
    ab = schedule.alpha_bar
    return float((1.0 - ab[t - 1]) / (1.0 - ab[t]) * schedule.betas[t])


def ddpm_step(schedule: NoiseSchedule, x_t: np.ndarray, x0_hat: np.ndarray, t: int, rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Ancestral step t -> t-1; noise is skipped at t = 1 or when neither rng nor noise is given."""
    if t < 1:
        raise UsageError(f"t must be >= 1, got {t}")
    eps = eps_from_x0(schedule, x_t, x0_hat, t)
    beta, alpha, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bar[t]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
    if t == 1:
        return mean
    if noise is None:
        if rng is None:
            return mean
        noise = rng.standard_normal(np.shape(x_t))
    return mean + np.sqrt(ddpm_variance(schedule, t)) * noise


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t, ab_p = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    return float(eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p))


def ddim_moments(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> tuple[float, float, float]:
    """(coefficient on x0, coefficient on x_t, variance) of the DDIM update."""
    ab_t, ab_p = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    k = np.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) / np.sqrt(1.0 - ab_t)
    return float(np.sqrt(ab_p) - k * np.sqrt(ab_t)), float(k), sigma**2


def ddpm_moments(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(coefficient on x0, coefficient on x_t, variance) of the posterior q(x_{t-1} | x_t, x0)."""
    ab_t, ab_p = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    beta, alpha = schedule.betas[t], schedule.alphas[t]
    return (
        float(np.sqrt(ab_p) * beta / (1.0 - ab_t)),
        float(np.sqrt(alpha) * (1.0 - ab_p) / (1.0 - ab_t)),
        ddpm_variance(schedule, t),
    )


def ddim_step(schedule: NoiseSchedule, x_t: np.ndarray, x0_hat: np.ndarray, t: int, t_prev: int, eta: float = 0.0, rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    if not 0 <= t_prev < t:
        raise UsageError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    eps = eps_from_x0(schedule, x_t, x0_hat, t)
    ab_p = schedule.alpha_bar[t_prev]
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    out = np.sqrt(ab_p) * x0_hat + np.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps
    if sigma > 0:
        if noise is None:
            if rng is None:
                raise UsageError("eta > 0 needs an rng or explicit noise")
            noise = rng.standard_normal(np.shape(x_t))
        out = out + sigma * noise
    return out


def cfg_combine(pred_cond: np.ndarray, pred_uncond: np.ndarray, w: float) -> np.ndarray:
    if np.shape(pred_cond) != np.shape(pred_uncond):
        raise UsageError(f"prediction shapes differ: {np.shape(pred_cond)} vs {np.shape(pred_uncond)}")
    # the endpoints are returned exactly rather than through rounding
    if w == 1.0:
        return np.array(pred_cond, dtype=np.float64)
    if w == 0.0:
        return np.array(pred_uncond, dtype=np.float64)
    return pred_uncond + w * (pred_cond - pred_uncond)


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    eta: float = 0.0
    guidance: float = 3.5
    seed: int = 0
    shared_noise: bool = True

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise UsageError(f"steps must lie in [1, {T}], got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise UsageError(f"eta must lie in [0, 1], got {self.eta}")


def ddim_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs on a uniform grid over [1, T] that includes T, ending at 0."""
    if not 1 <= steps <= T:
        raise UsageError(f"steps must lie in [1, {T}], got {steps}")
    grid = np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1] if steps > 1 else np.array([T])
    ts = [int(t) for t in grid]
    return list(zip(ts, ts[1:] + [0]))


def guided_x0(denoiser, schedule: NoiseSchedule, x_a, x_b, t, tokens, w: float) -> tuple[np.ndarray, np.ndarray]:
    """Classifier-free guided x0 estimate; the combination happens in noise space."""
    batch = x_a.shape[0]
    t_vec = np.full(batch, t)
    if w == 1.0:
        return denoiser.predict_x0(x_a, x_b, t_vec, tokens)
    if w == 0.0:
        return denoiser.predict_x0(x_a, x_b, t_vec, tokens, null=True)
    # one batched call: conditional rows first, then the null rows
    both_a = np.concatenate([x_a, x_a])
    both_b = np.concatenate([x_b, x_b])
    null = np.repeat([False, True], batch)
    pa, pb = denoiser.predict_x0(both_a, both_b, np.full(2 * batch, t), list(tokens) * 2, null=null)
    out = []
    for x_t, pred in ((x_a, pa), (x_b, pb)):
        eps = cfg_combine(eps_from_x0(schedule, x_t, pred[:batch], t), eps_from_x0(schedule, x_t, pred[batch:], t), w)
        out.append(x0_from_eps(schedule, x_t, eps, t))
    return out[0], out[1]


def _initial_noise(config: SamplerConfig, indices: Sequence[int], shape: tuple) -> tuple[np.ndarray, np.ndarray, list]:
    rngs = [stream(config.seed, i) for i in indices]
    x_a = np.stack([r.standard_normal(shape) for r in rngs])
    x_b = np.stack([r.standard_normal(shape) for r in rngs])
    return x_a, x_b, rngs


def sample_batch(denoiser, schedule: NoiseSchedule, tokens: Sequence[Sequence[int]], length: int, config: SamplerConfig = SamplerConfig(), start_index: int = 0) -> list[MotionPair]:
    """Guided DDIM sampling of ``len(tokens)`` pairs; sample i uses stream (seed, start_index + i)."""
    config.validate(schedule.T)
    tokens = [tuple(int(x) for x in seq) for seq in tokens]
    shape = (length, denoiser.config.frame_dim)
    x_a, x_b, rngs = _initial_noise(config, range(start_index, start_index + len(tokens)), shape)
    for t, t_prev in ddim_timesteps(schedule.T, config.steps):
        x0_a, x0_b = guided_x0(denoiser, schedule, x_a, x_b, t, tokens, config.guidance)
        if ddim_sigma(schedule, t, t_prev, config.eta) > 0:
            n_a = np.stack([r.standard_normal(shape) for r in rngs])
            n_b = np.stack([r.standard_normal(shape) for r in rngs])
        else:
            n_a = n_b = None
        x_a = ddim_step(schedule, x_a, x0_a, t, t_prev, config.eta, noise=n_a)
        x_b = ddim_step(schedule, x_b, x0_b, t, t_prev, config.eta, noise=n_b)
    return [MotionPair(a, b, tok) for a, b, tok in zip(x_a, x_b, tokens)]


def sample(denoiser, schedule: NoiseSchedule, tokens: Sequence[int], length: int, config: SamplerConfig = SamplerConfig(), index: int = 0) -> MotionPair:
    return sample_batch(denoiser, schedule, [tokens], length, config, index)[0]


def fixed_frame_count(length: int, alpha: float) -> int:
    """Frames held at each end: L * alpha rounded up (at least one)."""
    return max(1, int(np.ceil(length * alpha - 1e-9)))


def inbetween_mask(length: int, alpha: float) -> np.ndarray:
    n = fixed_frame_count(length, alpha)
    idx = np.arange(length)
    return (idx < n) | (idx >= length - n)


def inbetween_sample(denoiser, schedule: NoiseSchedule, gt: MotionPair, alpha: float, config: SamplerConfig = SamplerConfig(), index: int = 0) -> MotionPair:
    """Generate the middle of ``gt`` while its first and last frames stay fixed.

    Each step predicts x0 for both persons, overwrites the held frames with
    ground truth and renoises to the next step with fresh noise that is shared
    by the two persons unless ``config.shared_noise`` is off.
    """
    if not 0.0 < alpha < 0.5:
        raise UsageError(f"alpha must lie in (0, 0.5), got {alpha}")
    config.validate(schedule.T)
    length = gt.length
    fixed = inbetween_mask(length, alpha)
    shape = (length, gt.x_a.shape[1])
    x_a, x_b, (rng,) = _initial_noise(config, [index], shape)
    tokens = [gt.tokens]
    for t, t_prev in ddim_timesteps(schedule.T, config.steps):
        x0_a, x0_b = guided_x0(denoiser, schedule, x_a, x_b, t, tokens, config.guidance)
        x0_a[:, fixed] = gt.x_a[fixed]
        x0_b[:, fixed] = gt.x_b[fixed]
        eps_a = rng.standard_normal((1,) + shape)
        eps_b = eps_a if config.shared_noise else rng.standard_normal((1,) + shape)
        a, b = np.sqrt(schedule.alpha_bar[t_prev]), np.sqrt(1.0 - schedule.alpha_bar[t_prev])
        x_a = a * x0_a + b * eps_a
        x_b = a * x0_b + b * eps_b
    return MotionPair(x_a[0], x_b[0], gt.tokens, gt.frame_rate)
