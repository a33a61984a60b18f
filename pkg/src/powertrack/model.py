"""Problem data: scalar switched plants, packet-success model, channel drift.

All types are frozen dataclasses; channel sampling is a pure function of
``(seed, stream, epoch, attempt)`` so any epoch's draws can be regenerated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateModelError, DomainError, ScheduleError

# Independent random streams; each is keyed separately from the seed.
STREAM_PILOT = 0
STREAM_SLOTS = 1
STREAM_PROXY = 2
STREAM_DIAG = 3


@dataclass(frozen=True)
class PlantParams:
    """Scalar plant switching between open-loop and closed-loop gains."""

    a_open: float
    a_closed: float
    noise_var: float

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ValueError(f"noise_var must be positive, got {self.noise_var}")
        if not abs(self.a_closed) < 1:
            raise ValueError(f"|a_closed| must be < 1, got {self.a_closed}")
        # closing the loop must shrink the variance, otherwise J is not increasing
        if not self.a_open ** 2 > self.a_closed ** 2:
            raise DegenerateModelError(
                f"need a_open**2 > a_closed**2, got a_open={self.a_open}, "
                f"a_closed={self.a_closed}")

    @property
    def gain_gap(self) -> float:
        """a_open**2 - a_closed**2, the variance reduction bought by one success."""
        return self.a_open ** 2 - self.a_closed ** 2


@dataclass(frozen=True)
class SuccessModel:
    kind: str = "negexp"
    p_max_per_agent: float = 1.0

    def __post_init__(self):
        if self.kind != "negexp":
            raise ValueError(f"unknown success model kind {self.kind!r}")
        if not self.p_max_per_agent > 0:
            raise ValueError("p_max_per_agent must be positive")

    def q(self, h, p):
        """Decoding probability 1 - exp(-h p)."""
        return -np.expm1(-np.multiply(h, p))


@dataclass(frozen=True)
class ChannelSchedule:
    """Exponential fading whose mean drifts by ``drift_rate`` per epoch.

    ``drift_mode="bounce"`` reflects the mean between ``bounds``;
    ``"linear"`` moves it without limit and fails once it reaches zero.
    """

    m: int
    mean_init: float = 1.0
    drift_rate: float = 0.0
    drift_mode: str = "bounce"
    bounds: tuple[float, float] | None = None
    family: str = "exponential"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not self.mean_init > 0:
            raise ValueError("mean_init must be positive")
        if self.drift_mode not in ("bounce", "linear"):
            raise ValueError(f"unknown drift_mode {self.drift_mode!r}")
        if self.family not in _SAMPLERS:
            raise ValueError(f"unknown channel family {self.family!r}")
        if self.drift_mode == "bounce":
            lo, hi = self.resolved_bounds
            if not 0 < lo < hi:
                raise ValueError(f"bounce bounds must satisfy 0 < lo < hi, got {(lo, hi)}")
            if not lo <= self.mean_init <= hi:
                raise ValueError("mean_init must lie inside the bounce bounds")

    @property
    def resolved_bounds(self) -> tuple[float, float]:
        if self.bounds is not None:
            return (float(self.bounds[0]), float(self.bounds[1]))
        return (0.5 * self.mean_init, 1.5 * self.mean_init)

    def mean(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if self.drift_mode == "linear":
            u = self.mean_init + self.drift_rate * epoch
            if not u > 0:
                raise ScheduleError(f"channel mean {u} at epoch {epoch} is not positive")
            return u
        lo, hi = self.resolved_bounds
        width = hi - lo
        x = (self.mean_init - lo + self.drift_rate * epoch) % (2.0 * width)
        if x > width:
            x = 2.0 * width - x
        return lo + x


@dataclass(frozen=True)
class SystemModel:
    plants: tuple[PlantParams, ...]
    success: SuccessModel
    schedule: ChannelSchedule
    budget: float

    def __post_init__(self):
        object.__setattr__(self, "plants", tuple(self.plants))
        if len(self.plants) == 0:
            raise ValueError("at least one plant is required")
        if self.schedule.m != len(self.plants):
            raise ValueError(
                f"schedule.m={self.schedule.m} but {len(self.plants)} plants given")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if self.budget >= self.m * self.success.p_max_per_agent:
            warnings.warn("budget >= m * p_max_per_agent: the power constraint is vacuous",
                          stacklevel=2)
        for i, plant in enumerate(self.plants):
            if stability_threshold(plant) >= 1:
                raise ValueError(f"plant {i} cannot be stabilized")

    @property
    def m(self) -> int:
        return len(self.plants)

    @property
    def p0(self) -> float:
        return self.success.p_max_per_agent

    # Per-agent parameter vectors used by the vectorized dual evaluations.
    @cached_property
    def a_open_sq(self) -> np.ndarray:
        return np.array([p.a_open ** 2 for p in self.plants])

    @cached_property
    def a_closed_sq(self) -> np.ndarray:
        return np.array([p.a_closed ** 2 for p in self.plants])

    @cached_property
    def gain_gap(self) -> np.ndarray:
        return self.a_open_sq - self.a_closed_sq

    @cached_property
    def noise_var(self) -> np.ndarray:
        return np.array([p.noise_var for p in self.plants])

    @cached_property
    def y_min(self) -> np.ndarray:
        return np.array([stability_threshold(p) for p in self.plants])


def stability_threshold(plant: PlantParams) -> float:
    """Smallest success rate keeping the state variance bounded.

    Solves ``y a_closed^2 + (1 - y) a_open^2 = 1``; zero for plants that are
    already stable in open loop.
    """
    y = (plant.a_open ** 2 - 1.0) / plant.gain_gap
    return float(min(max(y, 0.0), np.nextafter(1.0, 0.0)))


def stability_margin(plant_or_model, y):
    """omega = y a_closed^2 + (1 - y) a_open^2; the variance is bounded iff omega < 1."""
    if isinstance(plant_or_model, SystemModel):
        ao2, ac2 = plant_or_model.a_open_sq, plant_or_model.a_closed_sq
    else:
        ao2, ac2 = plant_or_model.a_open ** 2, plant_or_model.a_closed ** 2
    y = np.asarray(y, dtype=float)
    return y * ac2 + (1.0 - y) * ao2


def perf_fn(plant: PlantParams, y):
    """Negative asymptotic state variance -W / (1 - omega(y)).

    Raises DomainError where the variance diverges.
    """
    y = np.asarray(y, dtype=float)
    denom = 1.0 - stability_margin(plant, y)
    if np.any(denom <= 0) or np.any(y < 0) or np.any(y > 1):
        raise DomainError("success rate outside the stable range "
                          f"(y_min={stability_threshold(plant):.6g})")
    out = -plant.noise_var / denom
    return float(out) if out.ndim == 0 else out


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def _exponential(rng: np.random.Generator, mean: float, shape) -> np.ndarray:
    return rng.exponential(mean, size=shape)


_SAMPLERS: dict[str, Callable[[np.random.Generator, float, tuple], np.ndarray]] = {
    "exponential": _exponential,
}


def sample_channel(schedule: ChannelSchedule, epoch: int, count: int, seed: int,
                   attempt: int = 0, stream: int = STREAM_PILOT) -> np.ndarray:
    """Draw ``count`` i.i.d. channel vectors (shape ``(count, m)``) for ``epoch``.

    Identical arguments always return identical values.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    u = schedule.mean(epoch)
    rng = make_rng(seed, stream, epoch, attempt)
    out = _SAMPLERS[schedule.family](rng, u, (int(count), schedule.m))
    out.setflags(write=False)
    return out


# Reference scenario. Noise variance and power limits are not fixed by the
# problem statement; these keep every agent stable over the whole drift range.
DEFAULT_NOISE_VAR = 0.05
DEFAULT_P_MAX = 2.5
DEFAULT_BUDGET = 7.0
DEFAULT_BOUNDS = (0.7, 1.5)


def default_plants(noise_var: float = DEFAULT_NOISE_VAR) -> list[PlantParams]:
    """Four unstable plants with open-loop gains in [1.1, 1.5], closed-loop in [0, 0.8].

    The least stable open-loop plant gets the most effective controller.
    """
    return [PlantParams(1.1, 0.8, noise_var), PlantParams(1.2, 0.5, noise_var),
            PlantParams(1.35, 0.3, noise_var), PlantParams(1.5, 0.0, noise_var)]


def default_model(drift_rate: float = 0.02, drift_mode: str = "bounce") -> SystemModel:
    """Reference scenario; ``drift_rate`` is per epoch, 2% of the initial mean by default."""
    return build_model(default_plants(), DEFAULT_P_MAX, DEFAULT_BUDGET, mean_init=1.0,
                       drift_rate=drift_rate, drift_mode=drift_mode,
                       bounds=DEFAULT_BOUNDS if drift_mode == "bounce" else None)


def build_model(plants: Sequence[PlantParams], p_max_per_agent: float, budget: float,
                mean_init: float = 1.0, drift_rate: float = 0.0, drift_mode: str = "bounce",
                bounds=None) -> SystemModel:
    plants = tuple(plants)
    return SystemModel(
        plants=plants,
        success=SuccessModel("negexp", p_max_per_agent),
        schedule=ChannelSchedule(len(plants), mean_init, drift_rate, drift_mode,
                                 None if bounds is None else tuple(bounds)),
        budget=budget)
