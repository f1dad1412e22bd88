"""Option quotes, Black-Scholes implied vol, and surface construction.

The pipeline is spot-normalized: every surface lives on a fixed grid of
log-moneyness k = log(K/S0) in [-0.3, 0.3] (41 nodes) and maturity
T in [0.05, 1.0] years (20 nodes). Interpolation happens in total
implied variance w = sigma^2 * T, which is the natural coordinate for
both smile interpolation and calendar-arbitrage checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import (
    ConvergenceError,
    CoverageError,
    DomainError,
    NoSolutionError,
    ParseError,
)

N_K = 41
N_T = 20
K_MIN, K_MAX = -0.3, 0.3
T_MIN, T_MAX = 0.05, 1.0
K_EXTRAP_MARGIN = 0.05
VOL_LO, VOL_HI = 1e-6, 5.0
ARB_TOL = 1e-7


def default_k_axis() -> np.ndarray:
    return np.linspace(K_MIN, K_MAX, N_K)


def default_t_axis() -> np.ndarray:
    return np.linspace(T_MIN, T_MAX, N_T)


# ---------------------------------------------------------------------------
# Quotes and surfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptionQuote:
    """One European option quote.

    ``expiry`` is a year fraction, ``rate`` the continuously-compounded
    annual rate, ``right`` either "call" or "put". Prices are raw
    (same currency unit as spot/strike).
    """

    quote_date: date
    spot: float
    strike: float
    expiry: float
    right: str
    mid_price: float
    rate: float

    def __post_init__(self):
        vals = (self.spot, self.strike, self.expiry, self.mid_price, self.rate)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"non-finite quote field: {vals}")
        if self.spot <= 0 or self.strike <= 0 or self.expiry <= 0:
            raise DomainError(
                f"spot, strike, expiry must be positive, got "
                f"({self.spot}, {self.strike}, {self.expiry})"
            )
        if self.mid_price < 0:
            raise DomainError(f"negative mid price {self.mid_price}")
        if self.right not in ("call", "put"):
            raise DomainError(f"right must be 'call' or 'put', got {self.right!r}")

    @property
    def log_moneyness(self) -> float:
        return math.log(self.strike / self.spot)

    def price_bounds(self) -> tuple[float, float]:
        """Static no-arbitrage bounds (vol -> 0 and vol -> inf limits)."""
        disc_k = self.strike * math.exp(-self.rate * self.expiry)
        if self.right == "call":
            return max(self.spot - disc_k, 0.0), self.spot
        return max(disc_k - self.spot, 0.0), disc_k


@dataclass
class VolSurface:
    """Implied-vol grid for one quote date: sigma[k_index, t_index]."""

    quote_date: date
    vols: np.ndarray
    k_axis: np.ndarray = field(default_factory=default_k_axis)
    t_axis: np.ndarray = field(default_factory=default_t_axis)

    def __post_init__(self):
        self.vols = np.asarray(self.vols, dtype=np.float64)
        self.k_axis = np.asarray(self.k_axis, dtype=np.float64)
        self.t_axis = np.asarray(self.t_axis, dtype=np.float64)
        if self.vols.shape != (N_K, N_T):
            raise DomainError(f"surface must be {N_K}x{N_T}, got {self.vols.shape}")
        if self.k_axis.shape != (N_K,) or self.t_axis.shape != (N_T,):
            raise DomainError("axis lengths must match the grid shape")
        if not (np.all(np.isfinite(self.vols)) and np.all(self.vols > 0)
                and np.all(self.vols < 5.0)):
            raise DomainError("vols must be finite and in (0, 5)")
        if np.any(np.diff(self.k_axis) <= 0) or np.any(np.diff(self.t_axis) <= 0):
            raise DomainError("axes must be strictly increasing")
        if abs(self.k_axis[0] + self.k_axis[-1]) > 1e-12:
            raise DomainError("k axis must be symmetric about 0")

    def total_variance(self) -> np.ndarray:
        """w(k, T) = sigma^2 * T on the grid."""
        return self.vols ** 2 * self.t_axis[None, :]


@dataclass
class SurfaceDataset:
    """Ordered surfaces plus a disjoint train/test index split."""

    surfaces: list[VolSurface]
    train_indices: list[int]
    test_indices: list[int]

    def __post_init__(self):
        train, test = set(self.train_indices), set(self.test_indices)
        if train & test:
            raise DomainError("train and test indices overlap")
        if train | test != set(range(len(self.surfaces))):
            raise DomainError("split must cover every surface exactly once")

    def train_surfaces(self) -> list[VolSurface]:
        return [self.surfaces[i] for i in self.train_indices]

    def test_surfaces(self) -> list[VolSurface]:
        return [self.surfaces[i] for i in self.test_indices]


# ---------------------------------------------------------------------------
# Black-Scholes pricing and implied vol
# ---------------------------------------------------------------------------

def _bs_price_arrays(spot, strike, rate, expiry, vol, is_call) -> np.ndarray:
    """Vectorized Black-Scholes core; vol = 0 degenerates to the
    discounted forward intrinsic."""
    spot = np.asarray(spot, dtype=np.float64)
    strike = np.asarray(strike, dtype=np.float64)
    vol = np.asarray(vol, dtype=np.float64)
    disc_k = strike * np.exp(-rate * expiry)
    stdev = vol * np.sqrt(expiry)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(spot / strike) + (rate + 0.5 * vol ** 2) * expiry) / stdev
    d2 = d1 - stdev
    if is_call:
        live = spot * norm.cdf(d1) - disc_k * norm.cdf(d2)
        intrinsic = np.maximum(spot - disc_k, 0.0)
    else:
        live = disc_k * norm.cdf(-d2) - spot * norm.cdf(-d1)
        intrinsic = np.maximum(disc_k - spot, 0.0)
    return np.where(stdev > 0, live, intrinsic)


def bs_price(spot: float, strike: float, rate: float, expiry: float,
             vol: float, right: str) -> float:
    """European Black-Scholes price.

    Raises DomainError for non-finite or non-positive spot/strike/expiry
    or negative vol.
    """
    vals = (spot, strike, rate, expiry, vol)
    if not all(math.isfinite(v) for v in vals):
        raise DomainError(f"non-finite pricing input: {vals}")
    if spot <= 0 or strike <= 0 or expiry <= 0:
        raise DomainError("spot, strike, expiry must be positive")
    if vol < 0:
        raise DomainError(f"vol must be nonnegative, got {vol}")
    if right not in ("call", "put"):
        raise DomainError(f"right must be 'call' or 'put', got {right!r}")
    return float(_bs_price_arrays(spot, strike, rate, expiry, vol, right == "call"))


def implied_vol(quote: OptionQuote) -> float:
    """Invert Black-Scholes for the quote's mid price.

    Brent's method on vol in [1e-6, 5]; the quoted price must lie
    strictly inside the prices attainable on that bracket, otherwise a
    NoSolutionError identifies which bound is hit.
    """
    # Normalize by spot so the tolerance is scale-free.
    k_strike = quote.strike / quote.spot
    target = quote.mid_price / quote.spot
    is_call = quote.right == "call"

    def f(sigma: float) -> float:
        return float(_bs_price_arrays(1.0, k_strike, quote.rate, quote.expiry,
                                      sigma, is_call)) - target

    f_lo, f_hi = f(VOL_LO), f(VOL_HI)
    if f_lo >= 0.0:
        bound = f_lo + target
        raise NoSolutionError(
            f"mid price {quote.mid_price} at or below the vol->0 lower bound "
            f"{bound * quote.spot} for this {quote.right}"
        )
    if f_hi <= 0.0:
        bound = f_hi + target
        raise NoSolutionError(
            f"mid price {quote.mid_price} at or above the vol->{VOL_HI} upper bound "
            f"{bound * quote.spot} for this {quote.right}"
        )
    try:
        vol = brentq(f, VOL_LO, VOL_HI, xtol=1e-14, rtol=8.9e-16, maxiter=200)
    except RuntimeError as exc:
        raise ConvergenceError(
            f"implied vol iteration budget exhausted: {exc}",
            bracket=(VOL_LO, VOL_HI),
        ) from exc
    if abs(f(vol)) > 1e-10:
        raise ConvergenceError(
            f"implied vol residual {abs(f(vol)):.3e} exceeds tolerance",
            bracket=(VOL_LO, VOL_HI),
        )
    return float(vol)


# ---------------------------------------------------------------------------
# Surface construction
# ---------------------------------------------------------------------------

def _otm_slice(quotes: list[OptionQuote]) -> tuple[np.ndarray, np.ndarray]:
    """Implied vols of the out-of-the-money side of one expiry slice.

    Puts supply k < 0, calls k > 0; at k = 0 both are averaged when
    quoted. Returns (sorted k values, vols).
    """
    by_k: dict[float, list[float]] = {}
    for q in quotes:
        k = q.log_moneyness
        use = (q.right == "put" and k < 0) or (q.right == "call" and k > 0) or k == 0.0
        if not use:
            continue
        by_k.setdefault(k, []).append(implied_vol(q))
    ks = np.array(sorted(by_k))
    vols = np.array([float(np.mean(by_k[k])) for k in ks])
    return ks, vols


def build_surface(chain: list[OptionQuote], quote_date: date) -> VolSurface:
    """Assemble the fixed-grid surface for one quote date.

    Per quoted expiry, total variance w = sigma^2 T is interpolated
    linearly in k across the OTM quotes (flat extrapolation up to a
    margin of 0.05 in k); then w is interpolated linearly in T between
    bracketing expiries. No extrapolation in T. Grid nodes left
    uncovered raise a CoverageError listing them.
    """
    if not chain:
        raise DomainError("empty chain")
    spot, rate = chain[0].spot, chain[0].rate
    for q in chain:
        if q.quote_date != quote_date:
            raise DomainError(f"quote date {q.quote_date} != {quote_date}")
        if q.spot != spot or q.rate != rate:
            raise DomainError("all quotes in a chain must share spot and rate")
    expiries = sorted({q.expiry for q in chain})
    strikes = {q.strike for q in chain}
    if len(expiries) < 3 or len(strikes) < 5:
        raise DomainError(
            f"need >= 3 expiries and >= 5 strikes, got {len(expiries)}/{len(strikes)}"
        )

    k_axis, t_axis = default_k_axis(), default_t_axis()

    # Per-expiry w(k) on the grid k's; NaN marks nodes beyond the margin.
    slice_ts, slice_ws = [], []
    for t in expiries:
        ks, vols = _otm_slice([q for q in chain if q.expiry == t])
        if ks.size < 2:
            continue
        w = np.interp(k_axis, ks, vols ** 2 * t)  # flat beyond the quoted range
        w[(k_axis < ks[0] - K_EXTRAP_MARGIN) | (k_axis > ks[-1] + K_EXTRAP_MARGIN)] = np.nan
        slice_ts.append(t)
        slice_ws.append(w)
    if len(slice_ts) < 2:
        raise CoverageError(
            "fewer than two usable expiry slices",
            [(i, j) for i in range(N_K) for j in range(N_T)],
        )
    slice_ts_arr = np.array(slice_ts)
    slice_ws_arr = np.vstack(slice_ws)  # [n_slices, N_K]

    w_grid = np.full((N_K, N_T), np.nan)
    for j, t in enumerate(t_axis):
        if t < slice_ts_arr[0] - 1e-12 or t > slice_ts_arr[-1] + 1e-12:
            continue  # no extrapolation in T
        hi = int(np.searchsorted(slice_ts_arr, t))
        if hi == 0:
            w_grid[:, j] = slice_ws_arr[0]
            continue
        if hi == len(slice_ts_arr):
            w_grid[:, j] = slice_ws_arr[-1]
            continue
        lo = hi - 1
        frac = (t - slice_ts_arr[lo]) / (slice_ts_arr[hi] - slice_ts_arr[lo])
        w_grid[:, j] = (1 - frac) * slice_ws_arr[lo] + frac * slice_ws_arr[hi]

    uncovered = [(int(i), int(j)) for i, j in zip(*np.where(~np.isfinite(w_grid)))]
    if uncovered:
        raise CoverageError(
            f"{len(uncovered)} grid nodes uncovered by the chain "
            f"(first few: {uncovered[:5]})",
            uncovered,
        )
    vols = np.sqrt(w_grid / t_axis[None, :])
    return VolSurface(quote_date=quote_date, vols=vols, k_axis=k_axis, t_axis=t_axis)


# ---------------------------------------------------------------------------
# Static arbitrage checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArbViolation:
    k_index: int
    t_index: int
    magnitude: float


@dataclass
class ArbReport:
    """Butterfly and calendar violations found on a surface."""

    butterfly: list[ArbViolation]
    calendar: list[ArbViolation]

    @property
    def arbitrage_free(self) -> bool:
        return not self.butterfly and not self.calendar


def check_arbitrage(surface: VolSurface, tol: float = ARB_TOL) -> ArbReport:
    """Static no-arbitrage report.

    Butterfly: the call price computed at each grid vol (spot 1, rate 0)
    must be convex in strike, i.e. its second divided difference along
    K = e^k must be >= -tol. Calendar: total variance w = sigma^2 T must
    be nondecreasing in T at fixed k, up to tol.
    """
    strikes = np.exp(surface.k_axis)
    butterfly: list[ArbViolation] = []
    for j, t in enumerate(surface.t_axis):
        calls = _bs_price_arrays(1.0, strikes, 0.0, t, surface.vols[:, j], True)
        slopes = np.diff(calls) / np.diff(strikes)
        curv = np.diff(slopes)
        for i in np.where(curv < -tol)[0]:
            butterfly.append(ArbViolation(int(i) + 1, j, float(-curv[i])))

    w = surface.total_variance()
    dw = np.diff(w, axis=1)
    calendar = [
        ArbViolation(int(i), int(j) + 1, float(-dw[i, j]))
        for i, j in zip(*np.where(dw < -tol))
    ]
    return ArbReport(butterfly=butterfly, calendar=calendar)


# ---------------------------------------------------------------------------
# Dataset split
# ---------------------------------------------------------------------------

def split_dataset(surfaces: list[VolSurface], train_fraction: float,
                  seed: int) -> SurfaceDataset:
    """Seeded shuffle split; |train| = round(train_fraction * N)."""
    n = len(surfaces)
    if n < 2:
        raise DomainError(f"need at least 2 surfaces to split, got {n}")
    if not 0 < train_fraction < 1:
        raise DomainError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return SurfaceDataset(
        surfaces=surfaces,
        train_indices=sorted(int(i) for i in perm[:n_train]),
        test_indices=sorted(int(i) for i in perm[n_train:]),
    )


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

CHAIN_HEADER = ["quote_date", "spot", "rate", "strike", "expiry_years", "right", "mid_price"]
_RIGHTS = {"C": "call", "P": "put"}


def read_chain_csv(path: str | Path) -> list[OptionQuote]:
    """Read quotes from a chain CSV; may contain several quote dates."""
    path = Path(path)
    quotes: list[OptionQuote] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CHAIN_HEADER:
            raise ParseError(f"{path}: bad chain header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CHAIN_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(CHAIN_HEADER)} "
                                 f"fields, got {len(row)}", line=lineno)
            try:
                quotes.append(OptionQuote(
                    quote_date=date.fromisoformat(row[0].strip()),
                    spot=float(row[1]),
                    rate=float(row[2]),
                    strike=float(row[3]),
                    expiry=float(row[4]),
                    right=_RIGHTS[row[5].strip()],
                    mid_price=float(row[6]),
                ))
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: right must be C or P, "
                                 f"got {row[5]!r}", line=lineno) from exc
            except (ValueError, DomainError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}", line=lineno) from exc
    return quotes


def write_chain_csv(quotes: list[OptionQuote], path: str | Path) -> None:
    inv_rights = {"call": "C", "put": "P"}
    lines = [",".join(CHAIN_HEADER)]
    for q in quotes:
        lines.append(",".join([
            q.quote_date.isoformat(), repr(q.spot), repr(q.rate), repr(q.strike),
            repr(q.expiry), inv_rights[q.right], repr(q.mid_price),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def surface_filename(quote_date: date) -> str:
    return f"{quote_date.isoformat()}.surface.csv"


def write_grid_csv(grid: np.ndarray, k_axis: np.ndarray, t_axis: np.ndarray,
                   path: str | Path) -> None:
    """Grid CSV layout shared by surfaces, SVD modes, and dump files:
    header row of t values, first column the k values, body at 9
    significant digits."""
    lines = ["k," + ",".join(f"{t:.9g}" for t in t_axis)]
    for i, k in enumerate(k_axis):
        lines.append(f"{k:.9g}," + ",".join(f"{v:.9g}" for v in grid[i]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_surface_csv(surface: VolSurface, path: str | Path) -> None:
    write_grid_csv(surface.vols, surface.k_axis, surface.t_axis, path)


def read_surface_csv(path: str | Path) -> VolSurface:
    """Read a surface written by write_surface_csv; the quote date comes
    from the ``<date>.surface.csv`` filename."""
    path = Path(path)
    name = path.name
    if not name.endswith(".surface.csv"):
        raise ParseError(f"{path}: surface files must be named <date>.surface.csv")
    try:
        quote_date = date.fromisoformat(name[: -len(".surface.csv")])
    except ValueError as exc:
        raise ParseError(f"{path}: cannot parse date from filename") from exc
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "k":
        raise ParseError(f"{path}: missing surface header", line=1)
    try:
        t_axis = np.array([float(x) for x in rows[0][1:]])
        body = np.array([[float(x) for x in row] for row in rows[1:] if row])
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return VolSurface(quote_date=quote_date, vols=body[:, 1:],
                      k_axis=body[:, 0], t_axis=t_axis)
