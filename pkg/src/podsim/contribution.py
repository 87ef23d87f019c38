"""Data-contribution accounting from per-feature Gaussian summaries.

Training nodes summarize their private data as one Gaussian mixture per
feature.  The committee never sees raw rows: it reconstructs an approximate
picture of who holds what by sampling from the claimed mixtures, slicing the
joint value range into bins, and splitting each bin's credit among the users
that populate it.  Unique mass earns full credit, overlapping mass is shared,
so redundant data is tolerated rather than zeroed out.

Shares are computed in exact rational arithmetic so that downstream reward
accounting conserves tokens to the last unit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "GaussianFit",
    "SliceHistogram",
    "Slicing",
    "ContributionVector",
    "fit_gaussian",
    "slice_range",
    "random_samples",
    "expected_histogram",
    "feature_contribution",
    "compute_contribution",
    "analytic_contribution",
    "truncated_interval_moments",
    "uneven_rate",
    "overlap_rate",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)

#: Variance assigned to constant features instead of zero.
VAR_FLOOR = 1e-9


def _phi(z: np.ndarray | float) -> np.ndarray | float:
    """Standard normal density."""
    return np.exp(-0.5 * np.square(z)) / _SQRT2PI


@dataclass(frozen=True)
class GaussianFit:
    """Mixture summary of one feature: (weight, mean, variance) components.

    ``count`` is the number of data rows the fit was computed from; it rides
    along because contribution sampling scales with data volume.
    """

    components: tuple[tuple[float, float, float], ...]
    count: int

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("GaussianFit needs at least one component")
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        total = sum(w for w, _, _ in self.components)
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"component weights sum to {total}, expected 1")
        for w, _, var in self.components:
            if not (0.0 <= w <= 1.0 + 1e-12):
                raise ValueError("component weight outside [0, 1]")
            if var <= 0.0:
                raise ValueError("component variance must be positive")

    @property
    def mean(self) -> float:
        return sum(w * m for w, m, _ in self.components)

    @property
    def variance(self) -> float:
        mu = self.mean
        return sum(w * (v + (m - mu) ** 2) for w, m, v in self.components)

    def support(self, g_r: float) -> tuple[float, float]:
        """Envelope of all components truncated at ``g_r`` standard deviations."""
        lo = min(m - g_r * math.sqrt(v) for _, m, v in self.components)
        hi = max(m + g_r * math.sqrt(v) for _, m, v in self.components)
        return lo, hi


@dataclass(frozen=True)
class Slicing:
    """Uniform partition of [lo, hi] into ``n_slices`` half-open bins."""

    lo: float
    hi: float
    n_slices: int

    def __post_init__(self) -> None:
        if self.n_slices < 1:
            raise ValueError("need at least one slice")
        if not self.hi > self.lo:
            raise ValueError("degenerate slice range")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_slices

    def index_of(self, values: np.ndarray) -> np.ndarray:
        """Bin indices, clipped so boundary values stay inside the range."""
        idx = np.floor((values - self.lo) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.n_slices - 1)

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_slices + 1)


@dataclass(frozen=True)
class SliceHistogram:
    """Sample counts per slice for one user on one feature."""

    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class ContributionVector:
    """Per-node contribution shares, nonnegative and summing to one.

    ``exact`` carries the rational values used for reward settlement;
    ``shares`` is the float view used for metrics and reporting.
    """

    node_ids: tuple[int, ...]
    exact: tuple[Fraction, ...]

    def __post_init__(self) -> None:
        if len(self.node_ids) != len(self.exact):
            raise ValueError("node_ids and exact shares differ in length")
        if any(s < 0 for s in self.exact):
            raise ValueError("negative contribution share")
        if self.exact and sum(self.exact) != 1:
            raise ValueError("shares must sum to exactly 1")

    @property
    def shares(self) -> np.ndarray:
        return np.array([float(s) for s in self.exact])

    def share_of(self, node_id: int) -> Fraction:
        try:
            return self.exact[self.node_ids.index(node_id)]
        except ValueError:
            return Fraction(0)


def fit_gaussian(
    values: Sequence[float] | np.ndarray,
    components: int = 1,
    *,
    max_iter: int = 200,
    tol: float = 1e-6,
    var_floor: float = VAR_FLOOR,
) -> GaussianFit:
    """Fit a one-dimensional Gaussian mixture to ``values`` by EM.

    A single component reduces to the exact sample mean and population
    variance.  Initialization is by quantiles, so the fit is a deterministic
    function of the input.  Constant features get ``var_floor`` instead of a
    zero variance.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D feature column")
    if x.size < 2:
        raise ValueError("need at least 2 samples to fit")
    if components < 1:
        raise ValueError("component count must be >= 1")

    if components == 1:
        mu = float(np.mean(x))
        var = float(np.mean((x - mu) ** 2))
        if var < var_floor:
            warnings.warn("constant feature: flooring variance", stacklevel=2)
            var = var_floor
        return GaussianFit(((1.0, mu, var),), count=int(x.size))

    # Quantile-spread means keep EM deterministic without a seed.
    qs = np.linspace(0.0, 1.0, components + 2)[1:-1]
    means = np.quantile(x, qs)
    var0 = max(float(np.var(x)), var_floor)
    variances = np.full(components, var0)
    weights = np.full(components, 1.0 / components)

    prev_ll = -np.inf
    floored = False
    for _ in range(max_iter):
        # E step in log space for stability.
        log_pdf = (
            -0.5 * np.square(x[:, None] - means[None, :]) / variances[None, :]
            - 0.5 * np.log(2.0 * math.pi * variances[None, :])
        )
        log_w = np.log(np.maximum(weights, 1e-300))
        joint = log_pdf + log_w[None, :]
        norm = np.logaddexp.reduce(joint, axis=1)
        resp = np.exp(joint - norm[:, None])

        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = (resp * np.square(x[:, None] - means[None, :])).sum(axis=0) / nk
        if np.any(variances < var_floor):
            floored = True
            variances = np.maximum(variances, var_floor)

        ll = float(norm.sum())
        if abs(ll - prev_ll) < tol * max(1.0, abs(prev_ll)):
            break
        prev_ll = ll

    if floored:
        warnings.warn("degenerate component: flooring variance", stacklevel=2)
    weights = weights / weights.sum()
    order = np.argsort(means, kind="stable")
    comps = tuple(
        (float(weights[i]), float(means[i]), float(variances[i])) for i in order
    )
    return GaussianFit(comps, count=int(x.size))


def slice_range(
    fits: Sequence[GaussianFit], n_slices: int, g_r: float = 3.0
) -> Slicing:
    """Common slicing spanning all users' truncated mixture supports."""
    if not fits:
        raise ValueError("need at least one fit")
    lo = min(f.support(g_r)[0] for f in fits)
    hi = max(f.support(g_r)[1] for f in fits)
    if not hi > lo:
        raise ValueError("degenerate zero-width range across fits")
    return Slicing(lo, hi, n_slices)


def sample_truncated(
    fit: GaussianFit, g_r: float, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw from the mixture, each component truncated at +-g_r sigma.

    Uses inverse-CDF sampling so the draw is a pure function of the
    generator state.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    weights = np.array([w for w, _, _ in fit.components])
    means = np.array([m for _, m, _ in fit.components])
    sigmas = np.sqrt([v for _, _, v in fit.components])
    which = rng.choice(len(weights), size=n_samples, p=weights / weights.sum())
    u = rng.random(n_samples)
    # Truncation is symmetric, so the CDF window is the same for every component.
    lo_cdf = ndtr(-g_r)
    hi_cdf = ndtr(g_r)
    z = ndtri(lo_cdf + u * (hi_cdf - lo_cdf))
    return means[which] + sigmas[which] * z


def random_samples(
    fit: GaussianFit,
    g_r: float,
    n_samples: int,
    slicing: Slicing,
    rng: np.random.Generator,
) -> SliceHistogram:
    """Sample the claimed mixture and bin the draws into the common slices."""
    draws = sample_truncated(fit, g_r, n_samples, rng)
    idx = slicing.index_of(draws)
    counts = np.bincount(idx, minlength=slicing.n_slices)
    return SliceHistogram(tuple(int(c) for c in counts))


def _truncated_component_mass(
    mean: float, var: float, a: float, b: float, g_r: float
) -> float:
    """Mass of N(mean, var) truncated at +-g_r sigma that falls in [a, b]."""
    sigma = math.sqrt(var)
    lo = max(a, mean - g_r * sigma)
    hi = min(b, mean + g_r * sigma)
    if hi <= lo:
        return 0.0
    z = ndtr((hi - mean) / sigma) - ndtr((lo - mean) / sigma)
    denom = ndtr(g_r) - ndtr(-g_r)
    return float(z / denom)


def expected_histogram(
    fit: GaussianFit, g_r: float, n_samples: float, slicing: Slicing
) -> np.ndarray:
    """Analytic counterpart of :func:`random_samples`: exact expected counts."""
    edges = slicing.edges()
    masses = np.zeros(slicing.n_slices)
    for j in range(slicing.n_slices):
        a, b = float(edges[j]), float(edges[j + 1])
        masses[j] = sum(
            w * _truncated_component_mass(m, v, a, b, g_r)
            for w, m, v in fit.components
        )
    return masses * n_samples


def truncated_interval_moments(
    fit: GaussianFit, a: float, b: float, g_r: float
) -> tuple[float, float, float]:
    """(mass, mean, variance) of the truncated mixture restricted to [a, b].

    Returns mass 0 with NaN moments when the mixture puts nothing there.
    """
    total_mass = 0.0
    acc_mean = 0.0
    acc_m2 = 0.0
    for w, mean, var in fit.components:
        sigma = math.sqrt(var)
        lo = max(a, mean - g_r * sigma)
        hi = min(b, mean + g_r * sigma)
        if hi <= lo:
            continue
        alpha = (lo - mean) / sigma
        beta = (hi - mean) / sigma
        z = ndtr(beta) - ndtr(alpha)
        if z <= 0.0:
            continue
        denom = ndtr(g_r) - ndtr(-g_r)
        mass = w * z / denom
        delta = (_phi(alpha) - _phi(beta)) / z
        cmean = mean + sigma * delta
        cvar = var * (1.0 + (alpha * _phi(alpha) - beta * _phi(beta)) / z - delta**2)
        total_mass += mass
        acc_mean += mass * cmean
        acc_m2 += mass * (cvar + cmean**2)
    if total_mass <= 0.0:
        return 0.0, float("nan"), float("nan")
    mean = acc_mean / total_mass
    var = max(acc_m2 / total_mass - mean**2, 0.0)
    return total_mass, mean, var


def _credit_shares(rows):
    """Split each slice's credit among users in proportion to their mass there.

    ``rows[i][j]`` is user i's mass in slice j; works for Fraction and float
    alike.  A slice's credit is its share of the total mass, and it is divided
    among the users populating it pro rata.
    """
    n_users = len(rows)
    n_slices = len(rows[0])
    col_tot = [sum(rows[i][j] for i in range(n_users)) for j in range(n_slices)]
    grand = sum(col_tot)
    if not grand > 0:
        raise ValueError("all histograms empty")
    shares = []
    for i in range(n_users):
        s = sum(
            (col_tot[j] / grand) * (rows[i][j] / col_tot[j])
            for j in range(n_slices)
            if col_tot[j] > 0
        )
        shares.append(s)
    return shares


def feature_contribution(
    histograms: Sequence[SliceHistogram],
) -> list[Fraction]:
    """Per-user shares on one feature, exact rationals summing to 1."""
    if not histograms:
        raise ValueError("no histograms")
    widths = {len(h.counts) for h in histograms}
    if len(widths) != 1:
        raise ValueError("histograms use different slicings")
    rows = [[Fraction(c) for c in h.counts] for h in histograms]
    return _credit_shares(rows)


def compute_contribution(
    fits: Sequence[Sequence[GaussianFit]],
    counts: Sequence[int],
    *,
    sample_rate: float = 0.1,
    n_slices: int = 16,
    g_r: float = 3.0,
    seed: int = 0,
    node_ids: Sequence[int] | None = None,
) -> ContributionVector:
    """Monte-Carlo contribution shares across users from their claimed fits.

    ``fits[i]`` lists user i's per-feature mixtures.  Each feature is scored
    independently by sampling ``count_i * sample_rate`` points per user into a
    shared slicing; the final share is the mean over features.  Users with
    zero count get share zero.
    """
    n = len(fits)
    if n == 0:
        raise ValueError("no users")
    if len(counts) != n:
        raise ValueError("fits and counts differ in length")
    q_set = {len(f) for f in fits}
    if len(q_set) != 1:
        raise ValueError("users disagree on feature count")
    q = q_set.pop()
    if q == 0:
        raise ValueError("need at least one feature")
    ids = tuple(node_ids) if node_ids is not None else tuple(range(n))

    active = [i for i in range(n) if counts[i] > 0]
    if not active:
        raise ValueError("all users have zero data")

    rng = np.random.default_rng(seed)
    per_user = {i: Fraction(0) for i in range(n)}
    for k in range(q):
        slicing = slice_range([fits[i][k] for i in active], n_slices, g_r)
        hists = []
        for i in active:
            n_samples = max(1, round(counts[i] * sample_rate))
            hists.append(random_samples(fits[i][k], g_r, n_samples, slicing, rng))
        shares_k = feature_contribution(hists)
        for i, s in zip(active, shares_k):
            per_user[i] += s
    exact = []
    for i in range(n):
        exact.append(per_user[i] / q)
    # Zero-count users contribute 0; active shares already sum to 1 per feature.
    return ContributionVector(ids, tuple(exact))


def analytic_contribution(
    fits: Sequence[Sequence[GaussianFit]],
    counts: Sequence[int],
    *,
    sample_rate: float = 0.1,
    n_slices: int = 16,
    g_r: float = 3.0,
    node_ids: Sequence[int] | None = None,
) -> np.ndarray:
    """Noise-free shares: the sampling pipeline with exact expected masses.

    This is the oracle for fairness metrics.  It applies the same slicing and
    credit rule as :func:`compute_contribution` but replaces Monte-Carlo
    histograms with analytic truncated-mixture masses, so symmetric users get
    exactly equal shares.
    """
    n = len(fits)
    if n == 0:
        raise ValueError("no users")
    q = len(fits[0])
    active = [i for i in range(n) if counts[i] > 0]
    if not active:
        raise ValueError("all users have zero data")
    out = np.zeros(n)
    for k in range(q):
        slicing = slice_range([fits[i][k] for i in active], n_slices, g_r)
        rows = []
        for i in active:
            n_samples = counts[i] * sample_rate
            rows.append(list(expected_histogram(fits[i][k], g_r, n_samples, slicing)))
        shares_k = _credit_shares(rows)
        for i, s in zip(active, shares_k):
            out[i] += s / q
    return out


def uneven_rate(counts: Sequence[int]) -> float:
    """Volume-imbalance statistic: (1/n) * sqrt(sum((count_i - avg)^2))."""
    if len(counts) < 1:
        raise ValueError("need at least one count")
    c = np.asarray(counts, dtype=np.float64)
    return float(np.sqrt(np.sum((c - c.mean()) ** 2)) / len(counts))


def overlap_rate(row_id_lists: Sequence[Iterable]) -> float:
    """Fraction of row slots occupied by rows present in two or more datasets.

    Rows shared across users are counted once in the numerator; the
    denominator is the total row count across all users, duplicates included.
    """
    materialized = [list(ids) for ids in row_id_lists]
    sets = [set(ids) for ids in materialized]
    total = sum(len(ids) for ids in materialized)
    if total == 0:
        raise ValueError("no rows")
    seen: dict = {}
    for s in sets:
        for rid in s:
            seen[rid] = seen.get(rid, 0) + 1
    n_overlap = sum(1 for v in seen.values() if v >= 2)
    return n_overlap / total
