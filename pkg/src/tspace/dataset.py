"""Seeded 2-D toy distributions standing in for image data."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidRangeError
from .schedule import NoiseSchedule

DIST_KINDS = ("std-gaussian", "ring-mixture", "swiss-roll", "checkerboard")


@dataclass(frozen=True)
class ToyDistribution:
    """Parameters of a 2-D toy law. Fields not used by ``kind`` are ignored."""

    kind: str = "ring-mixture"
    k: int = 8
    radius: float = 4.0
    std: float = 0.15
    noise: float = 0.25
    cells: int = 4

    dim = 2

    def __post_init__(self):
        if self.kind not in DIST_KINDS:
            raise InvalidRangeError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "ring-mixture" and (self.k < 1 or self.radius <= 0 or self.std <= 0):
            raise InvalidRangeError("ring-mixture needs k >= 1, radius > 0, std > 0")
        if self.kind == "swiss-roll" and self.noise < 0:
            raise InvalidRangeError("swiss-roll noise must be non-negative")
        if self.kind == "checkerboard" and self.cells < 1:
            raise InvalidRangeError("checkerboard needs at least one cell per side")

    @property
    def num_labels(self) -> int:
        return self.k if self.kind == "ring-mixture" else 0

    def means(self) -> np.ndarray:
        """Component means of a ring mixture, equally spaced on the circle."""
        if self.kind != "ring-mixture":
            raise InvalidRangeError(f"{self.kind} has no mixture components")
        angles = 2.0 * np.pi * np.arange(self.k) / self.k
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, spec: dict) -> "ToyDistribution":
        return cls(**spec)


class Batch(NamedTuple):
    x0: np.ndarray
    labels: np.ndarray | None


def draw(dist: ToyDistribution, n: int, rng: np.random.Generator) -> Batch:
    """Draw ``n`` points from ``dist`` using an existing generator."""
    if n < 1:
        raise InvalidRangeError(f"n must be >= 1, got {n}")
    if dist.kind == "std-gaussian":
        return Batch(rng.standard_normal((n, 2)), None)
    if dist.kind == "ring-mixture":
        labels = rng.integers(0, dist.k, size=n)
        x = dist.means()[labels] + dist.std * rng.standard_normal((n, 2))
        return Batch(x, labels)
    if dist.kind == "swiss-roll":
        theta = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
        x = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1) / 3.0
        return Batch(x + dist.noise * rng.standard_normal((n, 2)), None)
    # checkerboard on [-c, c]^2 with c = cells / 2, alternating cells filled
    c = dist.cells
    i = rng.integers(0, c, size=n)
    parity = i % 2
    count = (c - parity + 1) // 2
    j = parity + 2 * np.floor(rng.random(n) * count).astype(np.int64)
    x = np.stack([i, j], axis=1) + rng.random((n, 2)) - c / 2.0
    return Batch(x, None)


def sample_batch(dist: ToyDistribution, n: int, seed: int) -> Batch:
    """Deterministic draw of ``n`` points for a fixed ``(dist, n, seed)``."""
    return draw(dist, n, np.random.default_rng(seed))


def gaussian_oracle_eps(x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Optimal noise prediction for standard-normal data: ``sqrt(1 - alpha_bar) * x_t``.

    With ``x_0 ~ N(0, I)`` the pair ``(x_t, eps)`` is jointly Gaussian with
    ``Cov(eps, x_t) = sqrt(1 - alpha_bar) I`` and ``Var(x_t) = I``, so the
    conditional mean is linear in ``x_t``.
    """
    schedule.check_timestep(t)
    return math.sqrt(1.0 - float(schedule.alphas[t])) * np.asarray(x_t, dtype=np.float64)


def dump_csv(batch: Batch) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "label"])
    for i, (x, y) in enumerate(batch.x0):
        label = "" if batch.labels is None else int(batch.labels[i])
        writer.writerow([repr(float(x)), repr(float(y)), label])
    return buf.getvalue()
