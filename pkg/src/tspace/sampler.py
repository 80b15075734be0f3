"""Reverse processes: ancestral DDPM, generalized, subsequence DDIM, disentangled.

Every sampler walks a list of ``(t, t_prev)`` pairs from the noisiest state
down to the pseudo-timestep ``-1`` (clean data, ``alpha_bar = 1``). With
``t_prev = -1`` each update collapses to the clean-data predictor
``(x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import FingerprintMismatchError, InvalidRangeError, OrderError, SubsequenceError
from .schedule import CLEAN, LatentSubsequence, NoiseSchedule, ddpm_sigma_from_alphas

MODES = ("ddpm-full", "generalized-full", "ddim-subseq", "disentangled")
SIGMA_RULES = ("zero", "ddpm-match", "eta")
DEFAULT_SHARD = 4096
# slack for sigma^2 <= 1 - alpha_prev when sigma is the DDPM-matching value
_ADMISSIBLE_RTOL = 1e-12


@dataclass(frozen=True)
class SamplerSpec:
    mode: str = "ddim-subseq"
    inference_taus: tuple[int, ...] | None = None
    noise_seed: int = 0
    n_samples: int = 1000
    label: int | None = None
    sigma_rule: str = "zero"
    eta: float = 0.0
    shard_size: int = DEFAULT_SHARD

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidRangeError(f"unknown sampler mode {self.mode!r}")
        if self.sigma_rule not in SIGMA_RULES:
            raise InvalidRangeError(f"unknown sigma rule {self.sigma_rule!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidRangeError(f"eta must lie in [0, 1], got {self.eta}")
        if self.n_samples < 1 or self.shard_size < 1:
            raise InvalidRangeError("n_samples and shard_size must be positive")
        if self.inference_taus is not None:
            taus = self.inference_taus
            if isinstance(taus, LatentSubsequence):
                taus = taus.taus
            object.__setattr__(self, "inference_taus", tuple(int(t) for t in taus))
        if self.mode in ("ddim-subseq", "disentangled") and not self.inference_taus:
            raise InvalidRangeError(f"{self.mode} sampling needs inference_taus")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inference_taus"] = None if self.inference_taus is None else list(self.inference_taus)
        return d


def ddpm_update(x_t, alpha_t: float, alpha_prev: float, eps_hat, noise):
    """Ancestral step written exactly in its textbook form."""
    drift_coef = (alpha_prev - alpha_t) / (alpha_prev * math.sqrt(1.0 - alpha_t))
    noise_coef = math.sqrt((1.0 - alpha_prev) / (1.0 - alpha_t) * (1.0 - alpha_t / alpha_prev))
    return math.sqrt(alpha_prev / alpha_t) * (x_t - drift_coef * eps_hat) + noise_coef * noise


def generalized_update(x_t, alpha_t: float, alpha_prev: float, eps_hat, sigma: float, noise):
    """Non-Markovian step with free noise scale ``sigma``; ``sigma = 0`` is DDIM."""
    resid = 1.0 - alpha_prev - sigma * sigma
    if resid < 0.0:
        if resid < -_ADMISSIBLE_RTOL * max(1.0 - alpha_prev, 1e-300):
            raise InvalidRangeError(
                f"sigma={sigma} inadmissible: sigma^2 exceeds 1 - alpha_prev = {1.0 - alpha_prev}"
            )
        resid = 0.0
    x0_hat = (x_t - math.sqrt(1.0 - alpha_t) * eps_hat) / math.sqrt(alpha_t)
    out = math.sqrt(alpha_prev) * x0_hat + math.sqrt(resid) * eps_hat
    if sigma:
        out = out + sigma * noise
    return out


def subsequence_update(x_t, alpha_t: float, alpha_prev: float, eps_hat):
    """Deterministic accelerated step between two states of a subsequence."""
    return (x_t - math.sqrt(1.0 - alpha_t) * eps_hat) / math.sqrt(
        alpha_t / alpha_prev
    ) + eps_hat * math.sqrt(1.0 - alpha_prev)


def _check_order(t: int, t_prev: int) -> None:
    if t_prev >= t:
        raise OrderError(f"need t_prev < t, got t_prev={t_prev}, t={t}")


def step_ddpm(x_t, t: int, t_prev: int, eps_hat, noise, schedule: NoiseSchedule):
    _check_order(t, t_prev)
    return ddpm_update(x_t, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), eps_hat, noise)


def step_generalized(x_t, t: int, t_prev: int, eps_hat, sigma: float, noise, schedule: NoiseSchedule):
    _check_order(t, t_prev)
    return generalized_update(
        x_t, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), eps_hat, sigma, noise
    )


def step_ddim(x_t, t: int, t_prev: int, eps_hat, schedule: NoiseSchedule):
    _check_order(t, t_prev)
    return subsequence_update(x_t, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), eps_hat)


def step_pairs(taus: Sequence[int]) -> list[tuple[int, int]]:
    """Descending ``(t, t_prev)`` pairs ending in a step to clean data."""
    taus = sorted(int(t) for t in taus)
    prevs = [CLEAN] + taus[:-1]
    return list(zip(reversed(taus), reversed(prevs)))


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def _run_shard(eps_fn, steps, update, needs_noise, x_shape, rng):
    x = rng.standard_normal(x_shape)
    for t, t_prev in steps:
        eps_hat = eps_fn(x, t)
        noise = rng.standard_normal(x_shape) if needs_noise and t_prev != CLEAN else None
        x = update(x, t, t_prev, eps_hat, noise)
    return x


def run_chain(
    eps_fn: EpsFn,
    steps: Sequence[tuple[int, int]],
    update,
    spec: SamplerSpec,
    *,
    needs_noise: bool,
    data_dim: int = 2,
    workers: int = 1,
) -> np.ndarray:
    """Run a reverse chain shard by shard.

    Shard ``i`` draws its initial state and step noise from
    ``default_rng([noise_seed, i])``, so output does not depend on ``workers``.
    """
    n, size = spec.n_samples, spec.shard_size
    bounds = [(i, lo, min(lo + size, n)) for i, lo in enumerate(range(0, n, size))]

    def one(b):
        i, lo, hi = b
        rng = np.random.default_rng([spec.noise_seed, i])
        return _run_shard(eps_fn, steps, update, needs_noise, (hi - lo, data_dim), rng)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, bounds))
    else:
        parts = [one(b) for b in bounds]
    return np.concatenate(parts, axis=0)


def _model_eps(model, label) -> EpsFn:
    """Wrap a denoiser; a plain ``eps(x, t)`` callable (e.g. an oracle) passes through."""
    from .denoiser import DenoiserModel, forward

    if not isinstance(model, DenoiserModel) and callable(model):
        return model

    def eps_fn(x, t):
        return forward(model, x, t, label)

    return eps_fn


def check_subsequence(inference_taus: Sequence[int], trained: Sequence[int] | None, T: int) -> None:
    bad = [t for t in inference_taus if not 0 <= t < T]
    if not bad and trained is not None:
        allowed = set(trained)
        bad = [t for t in inference_taus if t not in allowed]
    if bad:
        raise SubsequenceError(
            f"inference timesteps {bad} are not in the model's training subsequence"
        )


def sample_ddim(model, schedule: NoiseSchedule, spec: SamplerSpec, *, workers: int = 1) -> np.ndarray:
    """Accelerated sampling over ``spec.inference_taus`` with one shared model.

    ``sigma_rule`` other than ``zero`` switches to the generalized update with
    ``sigma = eta * sigma_ddpm`` (or the full DDPM-matching value).
    """
    taus = spec.inference_taus
    check_subsequence(taus, getattr(model, "trained_taus", None), schedule.T)
    return _subsequence_chain(_model_eps(model, spec.label), schedule, spec, taus, workers)


def _sigma_for(spec: SamplerSpec, alpha_t: float, alpha_prev: float) -> float:
    if spec.sigma_rule == "zero":
        return 0.0
    s = ddpm_sigma_from_alphas(alpha_prev, alpha_t)
    return s if spec.sigma_rule == "ddpm-match" else spec.eta * s


def _subsequence_chain(eps_fn, schedule, spec, taus, workers):
    steps = step_pairs(taus)
    stochastic = spec.sigma_rule != "zero" and not (spec.sigma_rule == "eta" and spec.eta == 0.0)
    if not stochastic:
        def update(x, t, t_prev, eps_hat, noise):
            return subsequence_update(x, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), eps_hat)
    else:
        def update(x, t, t_prev, eps_hat, noise):
            a_t, a_p = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
            sigma = _sigma_for(spec, a_t, a_p)
            return generalized_update(x, a_t, a_p, eps_hat, sigma, 0.0 if noise is None else noise)
    return run_chain(eps_fn, steps, update, spec, needs_noise=stochastic, workers=workers)


def sample_disentangled(
    registry,
    schedule: NoiseSchedule,
    spec: SamplerSpec,
    *,
    allow_fingerprint_mismatch: bool = False,
    workers: int = 1,
) -> np.ndarray:
    """Accelerated sampling where step ``tau`` uses the registry's model for ``tau``."""
    if registry.fingerprint != schedule.fingerprint and not allow_fingerprint_mismatch:
        raise FingerprintMismatchError(schedule.fingerprint, registry.fingerprint)
    taus = spec.inference_taus
    check_subsequence(taus, None, schedule.T)
    eps_fns = {tau: _model_eps(registry.resolve(tau), spec.label) for tau in taus}

    def eps_fn(x, t):
        return eps_fns[t](x, t)

    return _subsequence_chain(eps_fn, schedule, spec, taus, workers)


def _full_steps(schedule: NoiseSchedule):
    return step_pairs(range(schedule.T))


def sample_ddpm_full(model, schedule: NoiseSchedule, spec: SamplerSpec, *, workers: int = 1) -> np.ndarray:
    """T-step ancestral sampling; the final step into clean data adds no noise."""
    check_subsequence(range(schedule.T), getattr(model, "trained_taus", None), schedule.T)

    def update(x, t, t_prev, eps_hat, noise):
        if noise is None:
            noise = 0.0
        return ddpm_update(x, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), eps_hat, noise)

    return run_chain(
        _model_eps(model, spec.label), _full_steps(schedule), update, spec,
        needs_noise=True, workers=workers,
    )


def sample_generalized_full(model, schedule: NoiseSchedule, spec: SamplerSpec, *, workers: int = 1) -> np.ndarray:
    """T-step generalized sampling under ``spec.sigma_rule``."""
    check_subsequence(range(schedule.T), getattr(model, "trained_taus", None), schedule.T)
    stochastic = spec.sigma_rule != "zero"

    def update(x, t, t_prev, eps_hat, noise):
        a_t, a_p = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
        return generalized_update(
            x, a_t, a_p, eps_hat, _sigma_for(spec, a_t, a_p), 0.0 if noise is None else noise
        )

    return run_chain(
        _model_eps(model, spec.label), _full_steps(schedule), update, spec,
        needs_noise=stochastic, workers=workers,
    )


def sample(source, schedule: NoiseSchedule, spec: SamplerSpec, **kw) -> np.ndarray:
    """Dispatch on ``spec.mode``; ``source`` is a model or, for ``disentangled``, a registry."""
    if spec.mode == "disentangled":
        return sample_disentangled(source, schedule, spec, **kw)
    kw.pop("allow_fingerprint_mismatch", None)
    if spec.mode == "ddim-subseq":
        return sample_ddim(source, schedule, spec, **kw)
    if spec.mode == "ddpm-full":
        return sample_ddpm_full(source, schedule, spec, **kw)
    return sample_generalized_full(source, schedule, spec, **kw)
