"""Training regimes: full-T baseline, fewer latent states, and per-timestep models.

Every random stream is derived from ``(run_seed, stream tag)`` through
``numpy.random.SeedSequence``. Disentangled jobs use ``(run_seed, tau)`` only,
so their results do not depend on worker count or completion order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import ToyDistribution, draw, sample_batch
from .denoiser import DEFAULT_HIDDEN, AdamState, DenoiserModel, adam_step, create_model, loss_and_grad
from .errors import ConfigError, DuplicateTauError, InvalidRangeError, NumericError
from .evalmetrics import DEFAULT_PROJECTIONS, evaluate
from .registry import ModelRegistry, load_checkpoint, save_checkpoint
from .sampler import SamplerSpec, sample_ddim, sample_disentangled
from .schedule import (
    LatentSubsequence,
    NoiseSchedule,
    schedule_from_spec,
    select_taus,
    snr,
)

log = logging.getLogger(__name__)

REGIMES = ("baseline", "fewer", "disentangled")
PROFILES = ("uniform", "snr-proportional", "snr-inverse")
LOG_FIELDS = ("iteration", "loss", "metric_name", "metric_value", "tau")

# SeedSequence tags keeping independent streams apart
_DATA_STREAM = 0
_INIT_STREAM = 1


def stream_seed(run_seed: int, tag: int, tau: int | None = None) -> np.random.SeedSequence:
    key = [int(run_seed), int(tag)] + ([] if tau is None else [int(tau) + 1])
    return np.random.SeedSequence(key)


def init_seed_for(run_seed: int, tau: int | None = None) -> int:
    """Initialization seed; each per-timestep model gets its own from ``(run_seed, tau)``."""
    return int(stream_seed(run_seed, _INIT_STREAM, tau).generate_state(1, dtype=np.uint32)[0])


def default_workers() -> int:
    env = os.environ.get("TSPACE_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"TSPACE_WORKERS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("TSPACE_WORKERS must be >= 1")
        return n
    try:
        import psutil

        return psutil.cpu_count(logical=False) or os.cpu_count() or 1
    except ImportError:
        return os.cpu_count() or 1


@dataclass
class EvalSpec:
    n_samples: int = 2000
    n_reference: int | None = None
    n_proj: int = DEFAULT_PROJECTIONS
    metric_seed: int = 0
    sample_seed: int = 1
    reference_seed: int = 2
    S: int = 32


@dataclass
class RunConfig:
    """Declarative description of one training run."""

    name: str = "run"
    regime: str = "baseline"
    dataset: dict = field(default_factory=lambda: {"kind": "ring-mixture"})
    schedule: dict = field(default_factory=lambda: {"kind": "linear-beta", "T": 1000})
    S: int | None = None
    batch_size: int = 256
    iterations: int | list[int] = 1000
    lr: float = 1e-3
    eval_every: int = 0
    checkpoint_every: int = 0
    run_seed: int = 0
    hidden: list[int] = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    activation: str = "silu"
    time_embed_dim: int | None = None
    conditional: bool = False
    allocation: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        try:
            self.dist
            sched = self.noise_schedule()
        except (InvalidRangeError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.regime != "baseline":
            if not isinstance(self.S, int) or self.S < 1:
                raise ConfigError(f"{self.regime} regime needs a positive integer S")
            if self.S > sched.T:
                raise ConfigError(f"S={self.S} exceeds T={sched.T}")
        its = self.iterations
        if isinstance(its, list):
            if self.regime != "disentangled":
                raise ConfigError("a per-tau iteration vector is only valid for disentangled runs")
            if len(its) != self.S:
                raise ConfigError(f"iteration vector has length {len(its)}, expected S={self.S}")
            if any(not isinstance(k, int) or k < 1 for k in its):
                raise ConfigError("every per-tau iteration count must be an integer >= 1")
        elif not isinstance(its, int) or its < 1:
            raise ConfigError(f"iterations must be an integer >= 1, got {its!r}")
        for name in ("batch_size",):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("eval_every and checkpoint_every must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.time_embed_dim is not None and (self.time_embed_dim < 0 or self.time_embed_dim % 2):
            raise ConfigError("time_embed_dim must be even and >= 0")
        if self.conditional and self.dist.num_labels == 0:
            raise ConfigError(f"conditional training needs a labelled dataset, not {self.dist.kind}")
        try:
            EvalSpec(**self.eval)
        except TypeError as exc:
            raise ConfigError(f"bad eval block: {exc}") from exc
        bad = set(self.allocation) - {"profile", "K_min", "K_max", "spread"}
        if bad:
            raise ConfigError(f"unknown allocation keys {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def dist(self) -> ToyDistribution:
        return ToyDistribution.from_dict(self.dataset)

    def noise_schedule(self) -> NoiseSchedule:
        return schedule_from_spec(self.schedule)

    @property
    def eval_spec(self) -> EvalSpec:
        return EvalSpec(**self.eval)

    @property
    def label_dim(self) -> int:
        return self.dist.num_labels if self.conditional else 0

    @property
    def embed_dim(self) -> int:
        if self.time_embed_dim is not None:
            return self.time_embed_dim
        return 0 if self.regime == "disentangled" else 64

    def subsequence(self) -> LatentSubsequence | None:
        if self.regime == "baseline":
            return None
        return select_taus(self.noise_schedule(), self.S)


@dataclass
class BudgetAllocation:
    K: tuple[int, ...]
    K_mean: int
    K_min: int
    K_max: int
    profile: str
    taus: tuple[int, ...] = ()

    def __post_init__(self):
        S = len(self.K)
        if sum(self.K) != S * self.K_mean:
            raise InvalidRangeError("allocation does not conserve the total budget")
        if any(k < self.K_min or k > self.K_max for k in self.K):
            raise InvalidRangeError("allocation violates its bounds")

    @property
    def S(self) -> int:
        return len(self.K)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["K"] = list(self.K)
        d["taus"] = list(self.taus)
        return d


def _largest_remainder(values: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(values).astype(np.int64)
    short = total - int(base.sum())
    if short:
        rem = values - base
        # stable sort keeps earlier (higher-SNR) entries first among ties
        order = np.argsort(-rem, kind="stable")
        base[order[:short]] += 1
    return base


def allocate_budget(
    subseq: LatentSubsequence | Sequence[int],
    schedule: NoiseSchedule,
    K_mean: int,
    K_min: int,
    K_max: int,
    profile: str = "uniform",
    spread: float = 2.0,
) -> BudgetAllocation:
    """Split ``S * K_mean`` training iterations across the states of ``subseq``.

    ``snr-proportional`` gives more iterations to high-SNR (small t) states:
    an affine ramp in SNR rank whose unclipped span is
    ``spread * (K_max - K_min)``, clipped to the bounds, shifted so the real
    values sum to the budget, then rounded by largest remainder.
    ``snr-inverse`` mirrors the ramp.
    """
    taus = tuple(subseq.taus if isinstance(subseq, LatentSubsequence) else subseq)
    S = len(taus)
    if profile not in PROFILES:
        raise InvalidRangeError(f"profile must be one of {PROFILES}")
    K_mean, K_min, K_max = int(K_mean), int(K_min), int(K_max)
    if S < 1:
        raise InvalidRangeError("empty subsequence")
    if K_min < 0 or S * K_min > S * K_mean or S * K_max < S * K_mean:
        raise InvalidRangeError(
            f"infeasible budget: need 0 <= K_min <= K_mean <= K_max, got {K_min}, {K_mean}, {K_max}"
        )
    total = S * K_mean
    if profile == "uniform" or S == 1 or K_min == K_max:
        return BudgetAllocation((K_mean,) * S, K_mean, K_min, K_max, profile, taus)

    snrs = np.array([snr(schedule, t) for t in taus])
    rank = np.argsort(np.argsort(snrs, kind="stable"), kind="stable")
    u = rank / (S - 1) - 0.5
    if profile == "snr-inverse":
        u = -u
    ramp = K_mean + spread * (K_max - K_min) * u

    def clipped(shift):
        return np.clip(ramp + shift, K_min, K_max)

    lo, hi = K_min - ramp.max(), K_max - ramp.min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if clipped(mid).sum() < total:
            lo = mid
        else:
            hi = mid
    values = clipped(0.5 * (lo + hi))
    values *= total / values.sum()
    values = np.clip(values, K_min, K_max)
    K = _largest_remainder(values, total)
    # residual from the final clip, if any, goes to entries with headroom
    diff = total - int(K.sum())
    step = 1 if diff > 0 else -1
    i = 0
    while diff:
        j = i % S
        if K_min <= K[j] + step <= K_max:
            K[j] += step
            diff -= step
        i += 1
    return BudgetAllocation(tuple(int(k) for k in K), K_mean, K_min, K_max, profile, taus)


def allocation_from_config(config: RunConfig, schedule: NoiseSchedule) -> BudgetAllocation:
    subseq = config.subsequence()
    if isinstance(config.iterations, list):
        K = tuple(config.iterations)
        total = sum(K)
        if total % len(K):
            raise ConfigError("per-tau iteration vector must sum to a multiple of S")
        return BudgetAllocation(K, total // len(K), min(K), max(K), "explicit", subseq.taus)
    a = config.allocation
    K_mean = config.iterations
    return allocate_budget(
        subseq,
        schedule,
        K_mean,
        a.get("K_min", K_mean),
        a.get("K_max", K_mean),
        a.get("profile", "uniform"),
        a.get("spread", 2.0),
    )


def training_alphas(schedule: NoiseSchedule, t: np.ndarray) -> np.ndarray:
    """The ``alpha_bar`` values a training step consumes: entries of the full schedule."""
    return schedule.alphas[t]


def _noisy_batch(dist, schedule, batch_size, rng, t_sampler):
    batch = draw(dist, batch_size, rng)
    t = t_sampler(rng)
    eps = rng.standard_normal(batch.x0.shape)
    a = training_alphas(schedule, t)[:, None]
    x_t = np.sqrt(a) * batch.x0 + np.sqrt(1.0 - a) * eps
    return x_t, t, eps, batch.labels


class ConvergenceLog:
    """Rows ``iteration, loss, metric_name, metric_value, tau``."""

    def __init__(self, rows=None):
        self.rows: list[dict] = list(rows or [])

    def add(self, iteration, loss, metrics=None, tau=None):
        tau = "" if tau is None else tau
        if not metrics:
            self.rows.append(dict(iteration=iteration, loss=loss, metric_name="", metric_value="", tau=tau))
            return
        for name, value in metrics.items():
            self.rows.append(
                dict(iteration=iteration, loss=loss, metric_name=name, metric_value=value, tau=tau)
            )

    def extend(self, other: "ConvergenceLog"):
        self.rows.extend(other.rows)

    def metric(self, name: str):
        """``[(iteration, value)]`` for one metric."""
        return [(r["iteration"], r["metric_value"]) for r in self.rows if r["metric_name"] == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())

    def __eq__(self, other):
        return isinstance(other, ConvergenceLog) and self.rows == other.rows

    def __len__(self):
        return len(self.rows)


class Evaluator:
    """Samples a model (or registry) and scores it against a fixed reference set."""

    def __init__(self, config: RunConfig, schedule: NoiseSchedule):
        self.spec = config.eval_spec
        self.dist = config.dist
        self.schedule = schedule
        n_ref = self.spec.n_reference or self.spec.n_samples
        self.reference = sample_batch(self.dist, n_ref, self.spec.reference_seed).x0
        subseq = config.subsequence()
        if subseq is None:
            self.taus = select_taus(schedule, min(self.spec.S, schedule.T)).taus
        else:
            self.taus = subseq.taus
        self.label = 0 if config.label_dim else None

    def sampler_spec(self, mode="ddim-subseq") -> SamplerSpec:
        return SamplerSpec(
            mode=mode,
            inference_taus=self.taus,
            noise_seed=self.spec.sample_seed,
            n_samples=self.spec.n_samples,
            label=self.label,
        )

    def metrics(self, samples: np.ndarray) -> dict:
        if not np.all(np.isfinite(samples)):
            return {"sliced_w1": float("inf")}
        rep = evaluate(
            samples, self.reference,
            self.dist if self.label is None else None,
            n_proj=self.spec.n_proj, metric_seed=self.spec.metric_seed,
        )
        out = {"sliced_w1": rep.sliced_wasserstein, "energy": rep.energy_distance}
        if rep.mode_coverage is not None:
            out["mode_coverage"] = rep.mode_coverage
            out["min_mode_mass"] = rep.min_mode_mass
        return out

    def __call__(self, model: DenoiserModel) -> dict:
        return self.metrics(sample_ddim(model, self.schedule, self.sampler_spec()))

    def registry(self, registry: ModelRegistry) -> dict:
        return self.metrics(sample_disentangled(registry, self.schedule, self.sampler_spec("disentangled")))


def _should_log(it: int, total: int, every: int) -> bool:
    return it == total or (every > 0 and it % every == 0)


def _train_loop(
    model: DenoiserModel,
    config: RunConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    t_sampler,
    iterations: int,
    *,
    tau=None,
    on_log=None,
    on_snapshot=None,
    snapshot_every: int = 0,
):
    dist = config.dist
    state = AdamState.for_model(model, lr=config.lr)
    log_rows = ConvergenceLog()
    acc, count = 0.0, 0
    use_labels = model.label_dim > 0
    for it in range(1, iterations + 1):
        x_t, t, eps, labels = _noisy_batch(dist, schedule, config.batch_size, rng, t_sampler)
        loss, grad = loss_and_grad(model, x_t, t, eps, labels if use_labels else None)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            where = "" if tau is None else f" tau={tau}"
            raise NumericError(f"non-finite loss at iteration {it}{where}", tau=tau, iteration=it)
        adam_step(model, state, grad)
        acc += loss
        count += 1
        if _should_log(it, iterations, config.eval_every):
            metrics = on_log(model, it) if on_log is not None else None
            log_rows.add(it, acc / count, metrics, tau)
            acc, count = 0.0, 0
        if on_snapshot is not None and snapshot_every and it % snapshot_every == 0:
            on_snapshot(model, it)
    return log_rows


def _new_model(config: RunConfig, schedule: NoiseSchedule, tau=None) -> DenoiserModel:
    return create_model(
        config.hidden,
        time_embed_dim=config.embed_dim,
        label_dim=config.label_dim,
        activation=config.activation,
        T=schedule.T,
        init_seed=init_seed_for(config.run_seed, tau),
    )


def _train_shared(config: RunConfig, subseq: LatentSubsequence | None, *, evaluate_model=True, run_dir=None):
    schedule = config.noise_schedule()
    model = _new_model(config, schedule)
    model.trained_taus = None if subseq is None else subseq.taus
    rng = np.random.default_rng(stream_seed(config.run_seed, _DATA_STREAM))
    B = config.batch_size
    if subseq is None:
        T = schedule.T

        def t_sampler(r):
            return r.integers(0, T, size=B)
    else:
        taus = np.asarray(subseq.taus, dtype=np.int64)

        def t_sampler(r):
            return taus[r.integers(0, taus.size, size=B)]

    evaluator = Evaluator(config, schedule) if evaluate_model and config.eval_every >= 0 else None
    on_log = None
    if evaluator is not None and config.eval_every > 0:
        on_log = lambda m, it: evaluator(m)  # noqa: E731

    on_snapshot = None
    if run_dir is not None and config.checkpoint_every:
        def on_snapshot(m, it):
            save_checkpoint(
                m, Path(run_dir) / "checkpoints" / f"it{it:07d}", tau="all",
                fingerprint=schedule.fingerprint, regime=config.regime, iterations=it,
                run_seed=config.run_seed,
            )

    with threadpool_limits(1):
        conv = _train_loop(
            model, config, schedule, rng, t_sampler, config.iterations,
            on_log=on_log, on_snapshot=on_snapshot, snapshot_every=config.checkpoint_every,
        )
    if evaluator is not None and config.eval_every == 0:
        last = conv.rows.pop()
        conv.add(last["iteration"], last["loss"], evaluator(model))
    return model, conv


def train_baseline(config: RunConfig, *, run_dir=None, evaluate_model: bool = True):
    """Full-T training: each batch element draws ``t`` uniformly from all states."""
    if config.regime != "baseline":
        raise ConfigError(f"train_baseline needs regime=baseline, got {config.regime}")
    return _train_shared(config, None, evaluate_model=evaluate_model, run_dir=run_dir)


def train_fewer(config: RunConfig, *, run_dir=None, evaluate_model: bool = True):
    """One shared model trained only on the states of ``select_taus(schedule, S)``."""
    if config.regime != "fewer":
        raise ConfigError(f"train_fewer needs regime=fewer, got {config.regime}")
    return _train_shared(config, config.subsequence(), evaluate_model=evaluate_model, run_dir=run_dir)


@dataclass
class _Job:
    config: dict
    tau: int
    iterations: int
    snapshot_dir: str | None
    snapshot_every: int


def _run_job(job: _Job):
    """Train one single-state model. Depends only on the config and ``tau``."""
    config = RunConfig.from_dict(job.config)
    schedule = config.noise_schedule()
    model = _new_model(config, schedule, job.tau)
    model.trained_taus = (job.tau,)
    rng = np.random.default_rng(stream_seed(config.run_seed, _DATA_STREAM, job.tau))
    t_fixed = np.full(config.batch_size, job.tau, dtype=np.int64)

    on_snapshot = None
    if job.snapshot_dir is not None and job.snapshot_every:
        def on_snapshot(m, it):
            save_checkpoint(
                m, Path(job.snapshot_dir) / f"it{it:07d}", tau=job.tau,
                fingerprint=schedule.fingerprint, regime="disentangled", iterations=it,
                run_seed=config.run_seed,
            )

    with threadpool_limits(1):
        conv = _train_loop(
            model, config, schedule, rng, lambda r: t_fixed, job.iterations, tau=job.tau,
            on_snapshot=on_snapshot, snapshot_every=job.snapshot_every,
        )
    return job.tau, model.params, conv.rows


def _snapshot_iterations(allocation: BudgetAllocation, every: int) -> list[int]:
    if not every:
        return []
    return list(range(every, max(allocation.K) + 1, every))


def train_disentangled(
    config: RunConfig,
    allocation: BudgetAllocation | None = None,
    *,
    workers: int | None = None,
    run_dir=None,
    evaluate_model: bool = True,
):
    """Train one time-agnostic model per state, ``K_i`` iterations each, in parallel.

    Returns ``(registry, log)``. Per-model loss rows carry their ``tau``; when
    ``eval_every > 0`` the combined model is also scored at every multiple of
    ``eval_every`` using, for each state, its snapshot at
    ``min(iteration, K_i)``. Those rows have an empty ``tau``.
    """
    if config.regime != "disentangled":
        raise ConfigError(f"train_disentangled needs regime=disentangled, got {config.regime}")
    schedule = config.noise_schedule()
    subseq = config.subsequence()
    if allocation is None:
        allocation = allocation_from_config(config, schedule)
    if allocation.S != subseq.S:
        raise ConfigError(f"allocation has {allocation.S} entries, expected S={subseq.S}")
    taus = allocation.taus or subseq.taus
    if len(set(taus)) != len(taus):
        raise DuplicateTauError(f"duplicate timesteps in {taus}")
    if workers is None:
        workers = default_workers()

    every = config.eval_every if evaluate_model else 0
    snap_every = math.gcd(every, config.checkpoint_every) if (every and config.checkpoint_every) else (
        every or config.checkpoint_every
    )
    tmp = None
    snap_root = None
    if snap_every:
        if run_dir is not None:
            snap_root = Path(run_dir) / "checkpoints"
        else:
            tmp = tempfile.mkdtemp(prefix="tspace-snap-")
            snap_root = Path(tmp)
    jobs = [
        _Job(config.to_dict(), int(tau), int(k), None if snap_root is None else str(snap_root), snap_every)
        for tau, k in zip(taus, allocation.K)
    ]
    try:
        if workers <= 1 or len(jobs) == 1:
            results = [_run_job(j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
                results = list(pool.map(_run_job, jobs))
        models = {}
        conv = ConvergenceLog()
        for (tau, params, rows), k in zip(results, allocation.K):
            m = _new_model(config, schedule, tau)
            m.params[:] = params
            m.trained_taus = (tau,)
            models[tau] = m
            conv.rows.extend(rows)
        registry = ModelRegistry.from_models(models, schedule.fingerprint)
        if evaluate_model:
            evaluator = Evaluator(config, schedule)
            points = _snapshot_iterations(allocation, every) if every else []
            for it in points:
                snap = {}
                for tau, k in zip(taus, allocation.K):
                    j = min(it, k)
                    if j == k:
                        snap[tau] = models[tau]
                    else:
                        snap[tau] = load_checkpoint(snap_root / f"it{j:07d}", tau)[0]
                reg = ModelRegistry.from_models(snap, schedule.fingerprint)
                conv.add(it, _mean_loss_at(conv, it), evaluator.registry(reg))
            if not points or points[-1] != max(allocation.K):
                conv.add(max(allocation.K), _mean_loss_at(conv, max(allocation.K)), evaluator.registry(registry))
        if snap_root is not None and run_dir is not None:
            _prune_snapshots(snap_root, config.checkpoint_every)
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    return registry, conv


def _mean_loss_at(conv: ConvergenceLog, it: int) -> float:
    """Mean over states of each state's most recent logged loss at or before ``it``."""
    latest: dict = {}
    for r in conv.rows:
        if r["tau"] != "" and r["iteration"] <= it:
            latest[r["tau"]] = r["loss"]
    return float(np.mean(list(latest.values()))) if latest else float("nan")


def _prune_snapshots(root: Path, keep_every: int) -> None:
    for d in sorted(root.glob("it*")):
        it = int(d.name[2:])
        if not keep_every or it % keep_every:
            shutil.rmtree(d, ignore_errors=True)
    if root.exists() and not any(root.iterdir()):
        root.rmdir()


def train(config: RunConfig, **kw):
    """Dispatch on ``config.regime``."""
    if config.regime == "baseline":
        kw.pop("workers", None)
        return train_baseline(config, **kw)
    if config.regime == "fewer":
        kw.pop("workers", None)
        return train_fewer(config, **kw)
    return train_disentangled(config, **kw)
