"""Ground-truth numerical pricers consuming a VolSurface.

American puts price on a Cox-Ross-Rubinstein lattice (averaged over
n_steps and n_steps + 1 to damp the odd/even oscillation). Arithmetic
Asian options price by Monte Carlo with antithetic pairs and a
geometric-average control variate whose discrete closed form is exact.
Both use the single implied vol interpolated at the option's own (k, T);
spot is normalized to 1 and strikes enter as K = e^k.

Monte Carlo streams use the counter-based Philox generator keyed per
record, so dataset generation is order-independent and bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from .errors import DomainError
from .market_data import VolSurface, SurfaceDataset, bs_price
from .price_mlp import KINDS, PriceRecord

_DEGENERATE_VOL = 1e-10


@dataclass(frozen=True)
class PricingRequest:
    """One pricing job: instrument (kind, k, T, rate) against a surface."""

    surface: VolSurface
    k: float
    expiry: float
    rate: float
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.expiry <= 0:
            raise DomainError(f"expiry must be positive, got {self.expiry}")
        _check_domain(self.surface, self.k, self.expiry)


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 100_000
    n_observations: int = 50
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.n_paths < 1000:
            raise DomainError(f"n_paths must be >= 1000, got {self.n_paths}")
        if self.n_observations < 2:
            raise DomainError(f"n_observations must be >= 2, "
                              f"got {self.n_observations}")


def _check_domain(surface: VolSurface, k: float, expiry: float) -> None:
    tol = 1e-12
    if not (surface.k_axis[0] - tol <= k <= surface.k_axis[-1] + tol):
        raise DomainError(f"k={k} outside the surface grid "
                          f"[{surface.k_axis[0]}, {surface.k_axis[-1]}]")
    if not (surface.t_axis[0] - tol <= expiry <= surface.t_axis[-1] + tol):
        raise DomainError(f"T={expiry} outside the surface grid "
                          f"[{surface.t_axis[0]}, {surface.t_axis[-1]}]")


def surface_vol_at(surface: VolSurface, k: float, expiry: float) -> float:
    """Implied vol at (k, T) by bilinear interpolation of total variance
    (same scheme surfaces are built with); exact at grid nodes."""
    _check_domain(surface, k, expiry)
    kx, tx = surface.k_axis, surface.t_axis
    w = surface.total_variance()

    ik = int(np.clip(np.searchsorted(kx, k) - 1, 0, len(kx) - 2))
    it = int(np.clip(np.searchsorted(tx, expiry) - 1, 0, len(tx) - 2))
    fk = (k - kx[ik]) / (kx[ik + 1] - kx[ik])
    ft = (expiry - tx[it]) / (tx[it + 1] - tx[it])
    fk, ft = float(np.clip(fk, 0.0, 1.0)), float(np.clip(ft, 0.0, 1.0))
    w_interp = ((1 - fk) * (1 - ft) * w[ik, it]
                + fk * (1 - ft) * w[ik + 1, it]
                + (1 - fk) * ft * w[ik, it + 1]
                + fk * ft * w[ik + 1, it + 1])
    return math.sqrt(w_interp / expiry)


# ---------------------------------------------------------------------------
# American put on a CRR lattice
# ---------------------------------------------------------------------------

def _crr_american_put(vol: float, rate: float, strike: float, expiry: float,
                      n_steps: int) -> float:
    dt = expiry / n_steps
    step = vol * math.sqrt(dt)
    disc = math.exp(-rate * dt)
    if step < 1e-12:
        # Deterministic limit: exercise now or at the horizon.
        fwd_intrinsic = max(strike * math.exp(-rate * expiry) - 1.0, 0.0)
        return max(strike - 1.0, fwd_intrinsic)
    u = math.exp(step)
    d = 1.0 / u
    p = min(max((math.exp(rate * dt) - d) / (u - d), 0.0), 1.0)

    j = np.arange(n_steps + 1)
    prices = np.exp(step * (2.0 * j - n_steps))
    values = np.maximum(strike - prices, 0.0)
    for _ in range(n_steps):
        prices = prices[:-1] * u
        values = disc * (p * values[1:] + (1.0 - p) * values[:-1])
        values = np.maximum(values, strike - prices)
    return float(values[0])


def american_put(request: PricingRequest, n_steps: int = 800) -> float:
    """CRR binomial price (spot 1, strike e^k), averaged over n_steps
    and n_steps + 1 trees."""
    if request.kind != "american_put":
        raise DomainError(f"american_put cannot price kind {request.kind!r}")
    if n_steps < 1:
        raise DomainError(f"n_steps must be >= 1, got {n_steps}")
    vol = surface_vol_at(request.surface, request.k, request.expiry)
    strike = math.exp(request.k)
    a = _crr_american_put(vol, request.rate, strike, request.expiry, n_steps)
    b = _crr_american_put(vol, request.rate, strike, request.expiry, n_steps + 1)
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Asian options
# ---------------------------------------------------------------------------

def geometric_asian_closed_form(vol: float, rate: float, k: float, expiry: float,
                                n_observations: int, right: str) -> float:
    """Discrete geometric-average Asian price under Black-Scholes.

    With m observations at t_i = i*T/m the log-average is normal with
    mean (r - vol^2/2) * T(m+1)/(2m) and variance
    vol^2 * T * (m+1)(2m+1) / (6 m^2); the price is the lognormal
    expectation of the payoff, discounted from T.
    """
    if vol < 0:
        raise DomainError(f"vol must be >= 0, got {vol}")
    if expiry <= 0 or n_observations < 1:
        raise DomainError("need expiry > 0 and n_observations >= 1")
    if right not in ("call", "put"):
        raise DomainError(f"right must be 'call' or 'put', got {right!r}")
    m = n_observations
    strike = math.exp(k)
    t_bar = expiry * (m + 1) / (2 * m)
    var_g = vol ** 2 * expiry * (m + 1) * (2 * m + 1) / (6 * m ** 2)
    mu_g = (rate - 0.5 * vol ** 2) * t_bar
    disc = math.exp(-rate * expiry)
    sg = math.sqrt(var_g)
    if sg < 1e-12:
        g = math.exp(mu_g)
        payoff = g - strike if right == "call" else strike - g
        return disc * max(payoff, 0.0)
    fwd = math.exp(mu_g + 0.5 * var_g)
    d1 = (mu_g + var_g - math.log(strike)) / sg
    d2 = d1 - sg
    if right == "call":
        return disc * (fwd * norm.cdf(d1) - strike * norm.cdf(d2))
    return disc * (strike * norm.cdf(-d2) - fwd * norm.cdf(-d1))


def simulate_path_averages(vol: float, rate: float, expiry: float,
                           n_observations: int, n_paths: int,
                           rng: np.random.Generator,
                           antithetic: bool = True
                           ) -> tuple[np.ndarray, np.ndarray]:
    """GBM path averages at the observation dates (spot 1).

    Returns (arithmetic averages, geometric averages); with antithetic
    sampling the two halves are stacked, mirrored draws second.
    """
    m = n_observations
    dt = expiry / m
    drift = (rate - 0.5 * vol ** 2) * dt
    step = vol * math.sqrt(dt)
    n_base = n_paths // 2 if antithetic else n_paths
    z = rng.standard_normal((n_base, m))
    halves = (z, -z) if antithetic else (z,)
    ariths, geos = [], []
    for draws in halves:
        log_s = np.cumsum(drift + step * draws, axis=1)
        ariths.append(np.exp(log_s).mean(axis=1))
        geos.append(np.exp(log_s.mean(axis=1)))
    return np.concatenate(ariths), np.concatenate(geos)


def asian_arithmetic(request: PricingRequest,
                     config: McConfig) -> tuple[float, float]:
    """Arithmetic-average Asian price and its standard error.

    Antithetic pairs are averaged per draw; the geometric-average payoff
    on the same paths serves as a regression control variate against its
    closed form. Deterministic given config.seed.
    """
    if request.kind not in ("asian_call", "asian_put"):
        raise DomainError(f"asian_arithmetic cannot price kind {request.kind!r}")
    right = "call" if request.kind == "asian_call" else "put"
    vol = surface_vol_at(request.surface, request.k, request.expiry)
    strike = math.exp(request.k)
    m = config.n_observations
    r, t = request.rate, request.expiry
    disc = math.exp(-r * t)

    if vol < _DEGENERATE_VOL:
        t_obs = np.arange(1, m + 1) * (t / m)
        avg = float(np.exp(r * t_obs).mean())
        payoff = avg - strike if right == "call" else strike - avg
        return disc * max(payoff, 0.0), 0.0

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        (config.seed,))))
    arith, geo = simulate_path_averages(vol, r, t, m, config.n_paths, rng,
                                        config.antithetic)
    sign = 1.0 if right == "call" else -1.0
    pay_a = disc * np.maximum(sign * (arith - strike), 0.0)
    pay_g = disc * np.maximum(sign * (geo - strike), 0.0)
    if config.antithetic:
        n_base = len(pay_a) // 2
        pay_a = 0.5 * (pay_a[:n_base] + pay_a[n_base:])
        pay_g = 0.5 * (pay_g[:n_base] + pay_g[n_base:])

    geo_exact = geometric_asian_closed_form(vol, r, request.k, t, m, right)
    var_g = float(np.var(pay_g, ddof=1)) if len(pay_g) > 1 else 0.0
    if var_g > 1e-20:
        cov = float(np.cov(pay_a, pay_g, ddof=1)[0, 1])
        beta = cov / var_g
    else:
        beta = 0.0
    corrected = pay_a - beta * (pay_g - geo_exact)
    price = float(corrected.mean())
    stderr = float(corrected.std(ddof=1) / math.sqrt(len(corrected)))
    return price, stderr


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def _record_rng(seed: int, split_tag: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        (seed, split_tag, index))))


def generate_price_dataset(dataset: SurfaceDataset, kind: str, n_train: int,
                           n_test: int, seed: int, rate: float,
                           mc: McConfig | None = None, n_steps: int = 800
                           ) -> tuple[list[PriceRecord], list[PriceRecord]]:
    """Oracle-priced records with (k, T) uniform over the grid domain and
    surfaces uniform over the respective split.

    Every record derives its own Philox stream from (seed, split, index),
    so results do not depend on generation order.
    """
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}, got {kind!r}")
    if n_train < 0 or n_test < 0:
        raise DomainError("record counts must be nonnegative")
    mc = mc or McConfig()
    out: list[list[PriceRecord]] = []
    for split_tag, indices, count in ((0, dataset.train_indices, n_train),
                                      (1, dataset.test_indices, n_test)):
        if count > 0 and not indices:
            raise DomainError("cannot draw records from an empty split")
        records = []
        for i in range(count):
            rng = _record_rng(seed, split_tag, i)
            surface_id = int(indices[int(rng.integers(len(indices)))])
            surface = dataset.surfaces[surface_id]
            k = float(rng.uniform(surface.k_axis[0], surface.k_axis[-1]))
            expiry = float(rng.uniform(surface.t_axis[0], surface.t_axis[-1]))
            request = PricingRequest(surface=surface, k=k, expiry=expiry,
                                     rate=rate, kind=kind)
            if kind == "american_put":
                price = american_put(request, n_steps)
            else:
                mc_i = replace(mc, seed=int(rng.integers(2 ** 62)))
                price, _ = asian_arithmetic(request, mc_i)
            records.append(PriceRecord(surface_id=surface_id, kind=kind, k=k,
                                       expiry=expiry, rate=rate,
                                       price=max(price, 0.0)))
        out.append(records)
    return out[0], out[1]


def european_reference(vol: float, rate: float, k: float, expiry: float,
                       right: str) -> float:
    """Black-Scholes European price at spot 1, strike e^k (bound checks)."""
    return bs_price(1.0, math.exp(k), rate, expiry, vol, right)
