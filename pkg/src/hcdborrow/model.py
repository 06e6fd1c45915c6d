"""Data types and the beta-binomial data-generating process used in the simulations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .distributions import RngStream, sample_beta, sample_binomial


class InvalidScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ControlGroup:
    events: int
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"group size must be >= 1, got {self.size}")
        if not 0 <= self.events <= self.size:
            raise ValueError(f"events must lie in [0, size], got {self.events}/{self.size}")

    @property
    def rate(self) -> float:
        return self.events / self.size


@dataclass(frozen=True)
class HistoricalControlSet:
    groups: Tuple[ControlGroup, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) < 1:
            raise ValueError("need at least one historical group")

    @classmethod
    def from_counts(cls, events: Sequence[int], sizes: Sequence[int]) -> "HistoricalControlSet":
        if len(events) != len(sizes):
            raise ValueError("events and sizes differ in length")
        return cls(tuple(ControlGroup(int(y), int(n)) for y, n in zip(events, sizes)))

    @property
    def H(self) -> int:
        return len(self.groups)

    @property
    def events(self) -> np.ndarray:
        return np.array([g.events for g in self.groups], dtype=np.int64)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups], dtype=np.int64)


@dataclass(frozen=True)
class CurrentTrial:
    control: ControlGroup
    treatments: Tuple[ControlGroup, ...]

    def __post_init__(self):
        object.__setattr__(self, "treatments", tuple(self.treatments))
        if len(self.treatments) < 1:
            raise ValueError("at least one treatment arm is required")

    @classmethod
    def from_counts(cls, y0: int, n0: int, events: Sequence[int], sizes: Sequence[int]) -> "CurrentTrial":
        arms = tuple(ControlGroup(int(y), int(n)) for y, n in zip(events, sizes))
        return cls(ControlGroup(int(y0), int(n0)), arms)

    @property
    def M(self) -> int:
        return len(self.treatments)


@dataclass(frozen=True)
class Population:
    """Beta law of the control probabilities, parameterised by mean and ICC."""

    pi: float
    rho: float

    def __post_init__(self):
        if not 0 < self.pi < 1:
            raise ValueError("pi must lie in (0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")

    @property
    def precision(self) -> float:
        return 1.0 / self.rho - 1.0

    @property
    def a(self) -> float:
        return self.pi * self.precision

    @property
    def b(self) -> float:
        return (1.0 - self.pi) * self.precision

    @classmethod
    def from_ab(cls, a: float, b: float) -> "Population":
        return cls(a / (a + b), 1.0 / (1.0 + a + b))


@dataclass(frozen=True)
class ScenarioConfig:
    H: int
    population: Population
    n_h: int
    M: int
    n0: int
    n_m: int
    delta: float = 1.0
    Delta_M: float = 1.0

    def __post_init__(self):
        for name in ("H", "n_h", "M", "n0", "n_m"):
            if getattr(self, name) < 1:
                raise InvalidScenarioError(f"{name} must be >= 1")
        if self.delta < 0:
            raise InvalidScenarioError("delta must be non-negative")
        if self.Delta_M < 1:
            raise InvalidScenarioError("Delta_M must be >= 1")
        if not 0 < self.delta * self.population.pi < 1:
            raise InvalidScenarioError("drifted control mean delta*pi must lie in (0, 1)")

    @classmethod
    def make(cls, H=20, pi=0.1, rho=0.01, n_h=50, M=4, n0=50, n_m=50, delta=1.0, Delta_M=1.0):
        return cls(int(H), Population(float(pi), float(rho)), int(n_h), int(M), int(n0), int(n_m),
                   float(delta), float(Delta_M))

    @property
    def pi(self) -> float:
        return self.population.pi

    @property
    def rho(self) -> float:
        return self.population.rho

    @property
    def control_ab(self) -> Tuple[float, float]:
        """(a0, b0) of the current-control law: same a+b, mean shifted to delta*pi."""
        s = self.population.precision
        m = self.delta * self.population.pi
        return m * s, (1.0 - m) * s

    def as_dict(self) -> dict:
        return dict(H=self.H, pi=self.pi, rho=self.rho, n_h=self.n_h, M=self.M, n0=self.n0,
                    n_m=self.n_m, delta=self.delta, Delta_M=self.Delta_M)


def effect_vector(M: int, Delta_M: float) -> np.ndarray:
    """Equidistant multipliers 1 + (m/M)(Delta_M - 1), m = 1..M."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if Delta_M < 1:
        raise ValueError("Delta_M must be >= 1")
    m = np.arange(1, M + 1)
    return 1.0 + (m / M) * (Delta_M - 1.0)


def arm_probabilities(pi0, effects) -> np.ndarray:
    return np.minimum(1.0, np.multiply.outer(pi0, effects))


def sample_historical_set(cfg: ScenarioConfig, stream: RngStream) -> HistoricalControlSet:
    pi_h = sample_beta(stream, cfg.population.a, cfg.population.b, size=cfg.H)
    y = sample_binomial(stream, cfg.n_h, pi_h)
    return HistoricalControlSet.from_counts(y, [cfg.n_h] * cfg.H)


def sample_current_trial(cfg: ScenarioConfig, stream: RngStream) -> CurrentTrial:
    a0, b0 = cfg.control_ab
    pi0 = float(sample_beta(stream, a0, b0))
    y0 = int(sample_binomial(stream, cfg.n0, pi0))
    p_arm = arm_probabilities(pi0, effect_vector(cfg.M, cfg.Delta_M))
    y = sample_binomial(stream, cfg.n_m, p_arm)
    return CurrentTrial.from_counts(y0, cfg.n0, y, [cfg.n_m] * cfg.M)


def sample_dataset(cfg: ScenarioConfig, stream: RngStream):
    """One replicate: historical controls then the current trial, from a single stream."""
    return sample_historical_set(cfg, stream), sample_current_trial(cfg, stream)
