"""Noise schedules over T base timesteps and latent-state subsequences.

Timesteps are 0-based: a schedule with ``T`` states covers ``t = 0 .. T-1``.
The pseudo-timestep ``-1`` denotes clean data (``alpha_bar = 1``); samplers
use it as the target of their terminal step.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidRangeError, OrderError

SCHEDULE_KINDS = ("linear-beta", "scaled-linear-beta")
_KIND_ALIASES = {
    "linear": "linear-beta",
    "linear-beta": "linear-beta",
    "scaled-linear": "scaled-linear-beta",
    "scaled-linear-beta": "scaled-linear-beta",
}

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

CLEAN = -1

# Published subsequences for T=1000.
PUBLISHED_TAUS: dict[int, tuple[int, ...]] = {
    4: (249, 499, 749, 999),
    8: (124, 249, 374, 499, 624, 749, 874, 999),
    16: (62, 124, 186, 249, 311, 374, 436, 499, 561, 624, 686, 749, 811, 874, 936, 999),
    32: (
        31, 62, 93, 124, 155, 186, 217, 249, 280, 311, 342, 374, 405, 436, 467, 499,
        530, 561, 592, 624, 655, 686, 717, 749, 780, 811, 842, 874, 905, 936, 967, 999,
    ),
    # 264 and 514 are absent from the printed list of 62 values; restored at
    # the midpoints of the two gaps that are twice the regular spacing.
    64: (
        16, 31, 46, 62, 77, 93, 108, 124, 139, 155, 170, 186, 201, 217, 233, 249,
        264, 280, 295, 311, 326, 342, 358, 374, 389, 405, 420, 436, 451, 467, 483, 499,
        514, 530, 545, 561, 576, 592, 608, 624, 639, 655, 670, 686, 701, 717, 733, 749,
        764, 780, 795, 811, 826, 842, 858, 874, 889, 905, 920, 936, 951, 967, 983, 999,
    ),
}
RECONSTRUCTED_TAUS: dict[int, tuple[int, ...]] = {64: (264, 514)}
PUBLISHED_TABLE_T = 1000


def normalize_kind(kind: str) -> str:
    try:
        return _KIND_ALIASES[kind]
    except KeyError:
        raise InvalidRangeError(
            f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}"
        ) from None


def schedule_fingerprint(kind: str, T: int, beta_start: float, beta_end: float) -> int:
    """64-bit hash of the parameters that fully determine a schedule."""
    key = f"{normalize_kind(kind)}|{int(T)}|{float(beta_start).hex()}|{float(beta_end).hex()}"
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "big")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step betas and their cumulative retention products ``alpha_bar``.

    ``alphas[t] = prod_{i <= t} (1 - betas[i])``. Arrays are read-only.
    """

    kind: str
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    fingerprint: int

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at ``t``; ``t = -1`` is clean data with value 1."""
        if t == CLEAN:
            return 1.0
        self.check_timestep(t)
        return float(self.alphas[t])

    def alpha_bars(self, ts: Iterable[int]) -> np.ndarray:
        return np.array([self.alpha_bar(int(t)) for t in ts], dtype=np.float64)

    def check_timestep(self, t: int) -> None:
        if not 0 <= int(t) < self.T:
            raise InvalidRangeError(f"timestep {t} outside [0, {self.T - 1}]")

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


@dataclass(frozen=True)
class LatentSubsequence:
    """Strictly ascending timesteps ``tau_1 < ... < tau_S`` ending at ``T-1``."""

    taus: tuple[int, ...]
    T: int
    source: str = "generated"
    reconstructed: tuple[int, ...] = ()

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if not taus:
            raise InvalidRangeError("a latent subsequence needs at least one timestep")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise InvalidRangeError(f"timesteps must be strictly ascending: {taus}")
        if taus[0] < 0 or taus[-1] != self.T - 1:
            raise InvalidRangeError(
                f"timesteps must lie in [0, {self.T - 1}] and end at {self.T - 1}"
            )

    @property
    def S(self) -> int:
        return len(self.taus)

    def __iter__(self):
        return iter(self.taus)

    def __len__(self):
        return len(self.taus)

    def issubset(self, other: "LatentSubsequence | Iterable[int]") -> bool:
        return set(self.taus) <= set(other)


def build_schedule(
    kind: str = "linear-beta",
    T: int = 1000,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a linear or scaled-linear beta schedule in 64-bit arithmetic.

    ``scaled-linear-beta`` interpolates ``sqrt(beta)`` linearly and squares.
    """
    kind = normalize_kind(kind)
    if int(T) != T or T < 1:
        raise InvalidRangeError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    beta_start = float(beta_start)
    beta_end = float(beta_end)
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear-beta":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    alphas = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alphas.setflags(write=False)
    return NoiseSchedule(
        kind=kind,
        T=T,
        beta_start=beta_start,
        beta_end=beta_end,
        betas=betas,
        alphas=alphas,
        fingerprint=schedule_fingerprint(kind, T, beta_start, beta_end),
    )


def schedule_from_spec(spec: dict) -> NoiseSchedule:
    return build_schedule(
        spec.get("kind", "linear-beta"),
        spec.get("T", 1000),
        spec.get("beta_start", DEFAULT_BETA_START),
        spec.get("beta_end", DEFAULT_BETA_END),
    )


def generated_taus(T: int, S: int) -> tuple[int, ...]:
    """Evenly spaced ``floor(k*T/S + 1/2) - 1`` for ``k = 1..S``.

    Spacing ``T/S >= 1`` keeps the values distinct; ``S = T`` yields every state.
    """
    return tuple(int(math.floor(k * T / S + 0.5)) - 1 for k in range(1, S + 1))


def select_taus(schedule: NoiseSchedule | int, S: int) -> LatentSubsequence:
    """Latent-state subsequence of length ``S`` ending at the noisiest state."""
    T = schedule if isinstance(schedule, int) else schedule.T
    if int(S) != S or S < 1:
        raise InvalidRangeError(f"S must be a positive integer, got {S!r}")
    if S > T:
        raise InvalidRangeError(f"S={S} exceeds T={T}")
    S = int(S)
    if T == PUBLISHED_TABLE_T and S in PUBLISHED_TAUS:
        return LatentSubsequence(
            PUBLISHED_TAUS[S], T, source="published-table", reconstructed=RECONSTRUCTED_TAUS.get(S, ())
        )
    return LatentSubsequence(generated_taus(T, S), T, source="generated")


def taus_from_list(schedule: NoiseSchedule, taus: Sequence[int]) -> LatentSubsequence:
    return LatentSubsequence(tuple(sorted(int(t) for t in taus)), schedule.T, source="explicit")


def snr_from_alpha(alpha_bar: float) -> float:
    return alpha_bar / (1.0 - alpha_bar)


def snr(schedule: NoiseSchedule, t: int) -> float:
    """Signal-to-noise ratio ``alpha_bar / (1 - alpha_bar)`` at timestep ``t``."""
    schedule.check_timestep(t)
    return snr_from_alpha(float(schedule.alphas[t]))


def ddpm_sigma_from_alphas(alpha_prev: float, alpha_t: float) -> float:
    """Noise scale under which the generalized step reduces to ancestral DDPM."""
    var = (1.0 - alpha_prev) / (1.0 - alpha_t) * (1.0 - alpha_t / alpha_prev)
    return math.sqrt(max(var, 0.0))


def sigma_ddpm(schedule: NoiseSchedule, t_prev: int, t: int) -> float:
    if t_prev >= t:
        raise OrderError(f"need t_prev < t, got t_prev={t_prev}, t={t}")
    return ddpm_sigma_from_alphas(schedule.alpha_bar(t_prev), schedule.alpha_bar(t))


def dump_csv(schedule: NoiseSchedule, timesteps: Iterable[int] | None = None) -> str:
    """CSV ``t,beta,alpha_bar,snr`` with shortest round-trip float formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "beta", "alpha_bar", "snr"])
    for t in range(schedule.T) if timesteps is None else timesteps:
        a = float(schedule.alphas[t])
        writer.writerow([t, repr(float(schedule.betas[t])), repr(a), repr(snr_from_alpha(a))])
    return buf.getvalue()
