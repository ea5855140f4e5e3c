"""Noise schedule, training loss, DDIM sampling with guidance, and domain shifting at inference."""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

from .adapters import DomainId, shifters
from .backbone import AttentionMode, Backbone
from .errors import ContractError, DimensionError
from .numerics import Tensor, as_tensor, mse_loss, no_grad


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Linear betas.  ``alpha_bar[0] == 1`` is the clean image; noise starts at t=1."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @property
    def betas(self) -> np.ndarray:
        b = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        b[0] = 0.0
        return b

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def ab(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ContractError(f"timestep outside [0, {self.T})")
        return self.alpha_bar[t]


DEFAULT_SCHEDULE = NoiseSchedule()


def noise_mix(x0: np.ndarray, eps: np.ndarray, alpha_bar) -> np.ndarray:
    """sqrt(ab) * x0 + sqrt(1 - ab) * eps, with ``alpha_bar`` broadcast per sample."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != image shape {x0.shape}")
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    t = np.asarray(t)
    ab = schedule.ab(t if t.ndim else np.full(np.shape(x0)[0], t))
    return noise_mix(x0, eps, ab)


def diffusion_loss(
    model: Callable,
    images: np.ndarray,
    prompt_ids,
    control: np.ndarray | None,
    domain: DomainId,
    plan: Sequence[DomainId] | None,
    mode: AttentionMode,
    rng: np.random.Generator | None = None,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
    t=None,
    eps: np.ndarray | None = None,
    switch_domain: DomainId | None = None,
) -> Tensor:
    """MSE between the injected noise and the model's prediction of it."""
    if DomainId.parse(domain) is DomainId.REAL and control is not None:
        raise ContractError("real-domain batches never carry a control map")
    b = images.shape[0]
    if t is None:
        t = rng.integers(0, schedule.T, size=b)
    if eps is None:
        eps = rng.standard_normal(images.shape)
    t = np.broadcast_to(np.asarray(t), (b,))
    dtype = images.dtype
    x_t = q_sample(images, t, eps, schedule).astype(dtype)
    pred = model(x_t, t, prompt_ids, control, mode=mode, plan=plan, switch_domain=switch_domain)
    return mse_loss(as_tensor(pred), Tensor(np.asarray(eps, dtype=dtype)))


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule = DEFAULT_SCHEDULE,
              clip: float | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update; ``t_prev == t`` is the identity."""
    if t_prev > t:
        raise ContractError(f"ddim_step must move backwards in time, got {t} -> {t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    if t_prev == t:
        return x_t.copy()
    ab_t, ab_prev = float(schedule.ab(t)), float(schedule.ab(t_prev))
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0 = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if clip is not None:
        x0 = np.clip(x0, -clip, clip)
        # keep the direction term consistent with the clipped estimate
        eps_hat = (x_t - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(steps: int = 50, T: int = 1000) -> list[int]:
    """Evaluation times, descending; the trajectory ends at the clean index 0."""
    if not 1 <= steps < T:
        raise ContractError(f"need 1 <= steps < T, got {steps}")
    return [int(k * T // steps) - 1 for k in range(steps, 0, -1)]


def cfg_combine(eps_uncond, eps_cond, s: float):
    eps_uncond, eps_cond = np.asarray(eps_uncond), np.asarray(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise DimensionError(f"guidance shapes differ: {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + s * (eps_cond - eps_uncond)


@dataclasses.dataclass(frozen=True)
class ShiftSchedule:
    """Blocks ``<= b_max`` and timesteps ``>= t_max`` run in SYN mode.

    ``b_max = -1`` disables layer shifting; ``t_max = inf`` disables time shifting.
    """

    b_max: int = -1
    t_max: float = math.inf

    @staticmethod
    def none() -> "ShiftSchedule":
        return ShiftSchedule()

    @staticmethod
    def from_fraction(b_frac: float, t_max: float, n_blocks: int) -> "ShiftSchedule":
        if not 0.0 <= b_frac <= 1.0:
            raise ContractError(f"block fraction {b_frac} outside [0, 1]")
        return ShiftSchedule(block_cutoff(b_frac, n_blocks), t_max)

    def validate(self, n_blocks: int) -> None:
        if not -1 <= self.b_max < n_blocks:
            raise ContractError(f"b_max {self.b_max} outside [-1, {n_blocks})")
        if not self.t_max >= 0:
            raise ContractError(f"t_max {self.t_max} must be >= 0")

    def plan(self, t: int, base: DomainId, n_blocks: int) -> list[DomainId]:
        base = DomainId.parse(base)
        if t >= self.t_max:
            return [DomainId.SYN] * n_blocks
        return [DomainId.SYN if b <= self.b_max else base for b in range(n_blocks)]


def block_cutoff(fraction: float, n_blocks: int) -> int:
    """Largest block index covered by ``fraction`` of the stack; -1 for none.

    30% of 12 blocks covers 3.6 blocks, rounded up to blocks 0..3.
    """
    return int(math.ceil(round(fraction * n_blocks, 9))) - 1


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 3.0
    shift: ShiftSchedule = ShiftSchedule()
    mode: AttentionMode = AttentionMode.GRID_FULL
    clip: float | None = 1.0


def _has_shifters(model) -> bool:
    return isinstance(model, Backbone) and bool(shifters(model))


def predict_eps(model, x: np.ndarray, t: int, prompt_ids: np.ndarray, control, cfg_scale: float,
                mode: AttentionMode, plan, switch_domain) -> np.ndarray:
    """One guided noise prediction; unconditional and conditional passes share a batch."""
    b = x.shape[0]
    dtype = model.patch_embed.weight.dtype
    null = model.config.null_prompt
    ts = np.full(b, t)
    if cfg_scale == 1.0:
        out = model(x.astype(dtype), ts, prompt_ids, control, mode=mode, plan=plan, switch_domain=switch_domain)
        return out.data.astype(np.float64)
    xx = np.concatenate([x, x]).astype(dtype)
    ids = np.concatenate([np.full(b, null), prompt_ids])
    cc = None if control is None else np.concatenate([control, control])
    out = model(xx, np.concatenate([ts, ts]), ids, cc, mode=mode, plan=plan, switch_domain=switch_domain)
    eps = out.data.astype(np.float64)
    return cfg_combine(eps[:b], eps[b:], cfg_scale)


def sample(
    model: Backbone,
    prompt_ids,
    control: np.ndarray | None = None,
    base_domain: DomainId | None = DomainId.REAL,
    config: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
    switch_domain: DomainId | None = None,
) -> np.ndarray:
    """DDIM from pure noise.  Returns float64 grids of shape (B, 3, 2S, 2S).

    When the model carries Domain Shifters, every step resolves a per-block
    plan from ``config.shift`` and ``base_domain``; models without shifters
    ignore both.
    """
    cfg = model.config
    ids = np.atleast_1d(np.asarray(prompt_ids))
    b = ids.shape[0]
    side = cfg.grid_side
    use_plan = _has_shifters(model) and base_domain is not None
    if use_plan:
        config.shift.validate(cfg.n_blocks)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, cfg.channels_image, side, side))
    ts = ddim_timesteps(config.steps, schedule.T)
    with no_grad():
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            plan = config.shift.plan(t, base_domain, cfg.n_blocks) if use_plan else None
            eps = predict_eps(model, x, t, ids, control, config.cfg_scale, config.mode, plan, switch_domain)
            x = ddim_step(x, eps, t, t_prev, schedule, clip=config.clip)
    return x


def sdedit(
    images: np.ndarray,
    model: Backbone,
    prompt_ids,
    seed: int = 0,
    t_inject: int = 500,
    steps: int = 50,
    cfg_scale: float = 3.0,
    shared_noise: bool = True,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
    clip: float | None = 1.0,
) -> np.ndarray:
    """Noise ``images`` to ``t_inject`` and denoise each view independently."""
    if not 0 <= t_inject < schedule.T:
        raise ContractError(f"t_inject {t_inject} outside [0, {schedule.T})")
    images = np.asarray(images, dtype=np.float64)
    if t_inject == 0:
        return images.copy()
    x = sdedit_noise(images, t_inject, seed, shared_noise, schedule)
    ts = [t for t in ddim_timesteps(steps, schedule.T) if t < t_inject]
    ts = [t_inject] + ts
    ids = np.atleast_1d(np.asarray(prompt_ids))
    with no_grad():
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            eps_hat = predict_eps(model, x, t, ids, None, cfg_scale, AttentionMode.SINGLE_IMAGE, None, None)
            x = ddim_step(x, eps_hat, t, t_prev, schedule, clip=clip)
    return x


def sdedit_noise(images: np.ndarray, t_inject: int, seed: int = 0, shared_noise: bool = True,
                 schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Forward-noise grids to ``t_inject``; with ``shared_noise`` all four views get one draw."""
    images = np.asarray(images, dtype=np.float64)
    b, c, h, w = images.shape
    rng = np.random.default_rng(seed)
    if shared_noise:
        s = h // 2
        eps = np.tile(rng.standard_normal((b, c, s, s)), (1, 1, 2, 2))
    else:
        eps = rng.standard_normal(images.shape)
    return q_sample(images, t_inject, eps, schedule)


# -- choosing the inference shift ------------------------------------------

B_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4)
T_MAX_VALUES = (1000, 950, 900, 850, 800)


@dataclasses.dataclass
class ShiftSearch:
    b_fraction: float
    t_max: int
    schedule: ShiftSchedule
    trials: list[dict]


def tune_shift(
    evaluate: Callable[[ShiftSchedule], tuple[float, float]],
    n_blocks: int,
    max_realism_drop: float = 0.1,
    b_fractions: Sequence[float] = B_FRACTIONS,
    t_values: Sequence[int] = T_MAX_VALUES,
) -> ShiftSearch:
    """Two-pass search: pick the block cutoff, then the time cutoff.

    ``evaluate`` returns ``(realism_distance, control_score)`` for a schedule;
    lower distance is more realistic, higher control is better.  A candidate
    is admissible while its distance stays within ``(1 + max_realism_drop)``
    of the unshifted reference; among admissible candidates the best control
    score wins, ties going to the milder shift.
    """
    trials: list[dict] = []

    def run(frac: float, t_max: float) -> tuple[float, float]:
        sched = ShiftSchedule.from_fraction(frac, t_max, n_blocks)
        realism, control = evaluate(sched)
        trials.append({"b_fraction": frac, "t_max": t_max, "realism": realism, "control": control})
        return realism, control

    ref_real, _ = run(0.0, math.inf)
    limit = ref_real * (1.0 + max_realism_drop)

    def pick(cands):
        best = None
        for key, (realism, control) in cands:
            if realism <= limit and (best is None or control > best[1]):
                best = (key, control)
        return best[0] if best is not None else None

    b_results = [(f, run(f, math.inf)) for f in b_fractions]
    frac = pick(b_results)
    frac = 0.0 if frac is None else frac
    t_results = [(t, run(frac, t)) for t in t_values]
    t_max = pick(t_results)
    t_max = max(t_values) if t_max is None else t_max
    return ShiftSearch(frac, int(t_max), ShiftSchedule.from_fraction(frac, t_max, n_blocks), trials)
