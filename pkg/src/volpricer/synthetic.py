"""Synthetic arbitrage-free volatility surfaces from SVI slices.

Each maturity on the fixed grid gets a raw-SVI total-variance smile
w(k) = a + b*(rho*(k-m) + sqrt((k-m)^2 + s^2)). Per surface, the slope
and level terms grow with maturity so total variance increases in T
pointwise (no calendar arbitrage by construction); every draw is still
rejection-tested against the full static checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .errors import DomainError, GenerationError
from .market_data import (
    SurfaceDataset,
    VolSurface,
    check_arbitrage,
    default_k_axis,
    default_t_axis,
    split_dataset,
)

SYNTH_EPOCH = date(2018, 1, 2)
MAX_DRAWS_PER_SURFACE = 200


@dataclass(frozen=True)
class SviSlice:
    """Raw SVI parameters for one maturity's total-variance smile."""

    a: float
    b: float
    rho: float
    m: float
    s: float

    def __post_init__(self):
        if self.b < 0:
            raise DomainError(f"SVI b must be >= 0, got {self.b}")
        if not -1 < self.rho < 1:
            raise DomainError(f"SVI rho must be in (-1, 1), got {self.rho}")
        if self.s <= 0:
            raise DomainError(f"SVI s must be > 0, got {self.s}")
        if self.a + self.b * self.s * math.sqrt(1 - self.rho ** 2) < 0:
            raise DomainError("SVI minimum total variance is negative")

    def total_variance(self, k: np.ndarray) -> np.ndarray:
        d = np.asarray(k) - self.m
        return self.a + self.b * (self.rho * d + np.sqrt(d ** 2 + self.s ** 2))


def svi_surface(slices: list[SviSlice], quote_date: date) -> VolSurface:
    """Evaluate 20 SVI slices (one per grid maturity) into a VolSurface.

    Adjacent slices whose total variance crosses anywhere on the k grid
    raise a GenerationError naming the offending pair.
    """
    k_axis, t_axis = default_k_axis(), default_t_axis()
    if len(slices) != len(t_axis):
        raise DomainError(f"need {len(t_axis)} slices, got {len(slices)}")
    w = np.vstack([sl.total_variance(k_axis) for sl in slices]).T  # [N_K, N_T]
    dw = np.diff(w, axis=1)
    bad = np.where(dw.min(axis=0) < 0)[0]
    if bad.size:
        j = int(bad[0])
        raise GenerationError(
            f"calendar violation between slices {j} and {j + 1} "
            f"(T={t_axis[j]:.4g} -> {t_axis[j + 1]:.4g})"
        )
    vols = np.sqrt(w / t_axis[None, :])
    return VolSurface(quote_date=quote_date, vols=vols, k_axis=k_axis, t_axis=t_axis)


def _draw_slices(rng: np.random.Generator) -> list[SviSlice]:
    """One surface's parameter draw: level, skew, curvature, and a term
    slope that keeps a_j = v_j * T_j increasing in maturity."""
    t_axis = default_t_axis()
    base_vol = rng.uniform(0.10, 0.50)
    term_slope = rng.uniform(-0.4, 0.6)
    rho = rng.uniform(-0.8, 0.2)
    m = rng.uniform(-0.10, 0.10)
    s = rng.uniform(0.05, 0.30)
    beta = rng.uniform(0.02, 0.35)

    v = base_vol ** 2 * (1.0 + term_slope * (t_axis / t_axis[-1] - 0.5))
    a = v * t_axis
    if np.any(np.diff(a) <= 0) or np.any(v <= 0):
        raise GenerationError("term structure draw not increasing")
    return [SviSlice(a=float(a[j]), b=float(beta * t_axis[j]), rho=float(rho),
                     m=float(m), s=float(s)) for j in range(len(t_axis))]


def generate_surfaces(n_surfaces: int, seed: int) -> list[VolSurface]:
    """n distinct arbitrage-free surfaces; draw i uses its own
    (seed, i)-keyed stream so generation parallelizes bit-reproducibly."""
    if n_surfaces < 1:
        raise DomainError(f"n_surfaces must be >= 1, got {n_surfaces}")
    out = []
    for i in range(n_surfaces):
        rng = np.random.default_rng((seed, i))
        quote_date = SYNTH_EPOCH + timedelta(days=i)
        for _ in range(MAX_DRAWS_PER_SURFACE):
            try:
                surface = svi_surface(_draw_slices(rng), quote_date)
            except GenerationError:
                continue
            if check_arbitrage(surface).arbitrage_free:
                out.append(surface)
                break
        else:
            raise GenerationError(
                f"surface {i}: no arbitrage-free draw in {MAX_DRAWS_PER_SURFACE} tries"
            )
    return out


def make_dataset(n_surfaces: int, seed: int,
                 train_fraction: float = 0.8) -> SurfaceDataset:
    """Generated surfaces plus the seeded train/test split."""
    if n_surfaces < 2:
        raise DomainError(f"need n_surfaces >= 2, got {n_surfaces}")
    return split_dataset(generate_surfaces(n_surfaces, seed), train_fraction, seed)
