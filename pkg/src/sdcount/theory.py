"""Executable checks of the divide-and-conquer error analysis.

Covers the two provable claims and the distribution-divergence tool:

  * division-time bounds: a count C* > c_max needs at least
    ceil(log4(C*/c_max)) dichotomy divisions and at most
    floor(max(log2(H/r), log2(W/r))) + 1, where r x r is the smallest
    region that can hold c_max objects. ``brute_force_min_divisions`` is
    the exhaustive oracle those bounds are checked against.
  * closed-set error bound: after sufficient division, the expected
    absolute error is at most max_{x <= c_max} f(x) * C*, strictly below
    the open-set expectation C* * f(C*) whenever f(C*) exceeds the
    closed-set maximum. ``mc_verify_prop2`` verifies this by simulation.
  * Jensen-Shannon divergence between count histograms (natural log).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr

from sdcount import gridmaps

MC_CHUNK = 10_000


@dataclass(frozen=True)
class DivisionBounds:
    n_min: int
    n_max: int


def min_divisions(c_star, c_max):
    """Smallest N with 4^N sub-regions able to absorb c_star at c_max each."""
    if not (c_star > 0 and c_max > 0):
        raise ValueError("counts must be positive")
    n = 0
    while (4.0**n) * c_max < c_star:
        n += 1
    return n


def max_divisions(h, w, r):
    """Divisions guaranteeing every sub-region side drops below r pixels."""
    if h <= 0 or w <= 0 or r <= 0:
        raise ValueError("dimensions must be positive")
    side = max(h, w)
    n = 0
    while side >= r * (2.0**n):
        n += 1
    return n


def brute_force_min_divisions(fine_counts, c_max):
    """Exhaustive oracle: smallest N whose 2^N x 2^N aggregation of the
    finest count grid keeps every block at or below c_max.

    Raises when even the finest cells overflow (no valid division exists
    at this resolution).
    """
    g = gridmaps.as_count_grid(fine_counts, "fine counts")
    h, w = g.shape
    if h != w or h & (h - 1):
        raise ValueError(f"fine grid must be square power-of-two, got {g.shape}")
    k = h.bit_length() - 1
    for n in range(k + 1):
        block = h >> n
        agg = g.reshape(h // block, block, w // block, block).sum(axis=(1, 3))
        if agg.max() <= c_max:
            return n
    raise ValueError("a finest cell exceeds c_max; no division can succeed")


@dataclass(frozen=True)
class ErrorProfile:
    """Tabulated expected |relative error| as a function of the true count."""

    xs: np.ndarray
    fs: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        fs = np.asarray(self.fs, dtype=np.float64)
        if xs.ndim != 1 or xs.shape != fs.shape or xs.size < 2:
            raise ValueError("profile needs matching 1-D xs/fs with >= 2 knots")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("profile knots must be strictly increasing")
        if not np.all(np.isfinite(fs)) or np.any(fs < 0):
            raise ValueError("profile values must be finite and >= 0")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "fs", fs)

    @classmethod
    def from_function(cls, fn, xs):
        xs = np.asarray(xs, dtype=np.float64)
        return cls(xs, np.array([fn(x) for x in xs]))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < self.xs[0]) or np.any(x > self.xs[-1]):
            raise ValueError("profile evaluated outside its tabulated domain")
        return np.interp(x, self.xs, self.fs)

    def max_on(self, lo, hi):
        """Max of the piecewise-linear profile over [lo, hi]."""
        inside = (self.xs >= lo) & (self.xs <= hi)
        cands = [self(lo), self(hi)]
        if inside.any():
            cands.append(self.fs[inside].max())
        return float(max(cands))


@dataclass(frozen=True)
class SplitInstance:
    """A spatial division outcome: parts c_i summing to the image count."""

    total: float
    parts: tuple
    c_max: float

    def __post_init__(self):
        parts = tuple(float(p) for p in self.parts)
        object.__setattr__(self, "parts", parts)
        if any(p < 0 for p in parts):
            raise ValueError("parts must be >= 0")
        if any(p > self.c_max for p in parts):
            raise ValueError("every part must lie inside the closed set")
        if abs(sum(parts) - self.total) > 1e-9 * max(1.0, abs(self.total)):
            raise ValueError("parts must sum to the total count")


@dataclass
class Prop2Report:
    emp_open: float
    emp_closed: float
    bound: float
    se_open: float
    se_closed: float
    trials: int
    closed_within_bound: bool
    closed_below_open: bool

    @property
    def passed(self):
        return self.closed_within_bound and self.closed_below_open


def _signed_halfnormal(rng, mean_abs, size):
    # |N(0, s)| has mean s*sqrt(2/pi); a random sign keeps it symmetric
    s = mean_abs * math.sqrt(math.pi / 2.0)
    mag = np.abs(rng.normal(0.0, 1.0, size)) * s
    sign = rng.integers(0, 2, size) * 2 - 1
    return sign * mag


def mc_verify_prop2(profile, c_star, c_max, parts, trials=100_000, seed=0,
                    noise_profile=None):
    """Monte Carlo check of the closed-vs-open absolute error ordering.

    Open-set error per trial: c_star * |e|, E|e| = f(c_star). Closed-set
    error: |sum_i c_i e_i| with independent e_i, E|e_i| = f(c_i). The
    report holds both empirical means, the analytic bound
    max_{x <= c_max} f(x) * c_star, and 3-sigma comparisons.

    noise_profile, when given, draws the part errors from a different
    profile than the one the bound is computed from; a negative-control
    hook for exercising bound-violation reporting.
    """
    if c_star <= c_max:
        raise ValueError("the instance must start in the open set (c_star > c_max)")
    inst = SplitInstance(c_star, tuple(parts), c_max)
    f_star = float(profile(c_star))
    f_closed_max = profile.max_on(0.0, c_max)
    if not f_star > f_closed_max:
        raise ValueError(
            "profile violates the premise: f(c_star) must exceed "
            "max f on [0, c_max]"
        )
    bound = f_closed_max * c_star

    ci = np.array(inst.parts)
    f_parts = (noise_profile or profile)(ci)
    ss = np.random.SeedSequence(seed)
    n_chunks = (trials + MC_CHUNK - 1) // MC_CHUNK
    children = ss.spawn(n_chunks)
    open_errs, closed_errs = [], []
    left = trials
    for child in children:
        m = min(MC_CHUNK, left)
        left -= m
        rng = np.random.default_rng(child)
        e_open = _signed_halfnormal(rng, f_star, m)
        open_errs.append(c_star * np.abs(e_open))
        e_parts = _signed_halfnormal(rng, f_parts, (m, ci.size))
        closed_errs.append(np.abs(e_parts @ ci))
    eo = np.concatenate(open_errs)
    ec = np.concatenate(closed_errs)
    emp_open, emp_closed = float(eo.mean()), float(ec.mean())
    se_open = float(eo.std(ddof=1) / math.sqrt(trials))
    se_closed = float(ec.std(ddof=1) / math.sqrt(trials))
    return Prop2Report(
        emp_open=emp_open,
        emp_closed=emp_closed,
        bound=bound,
        se_open=se_open,
        se_closed=se_closed,
        trials=trials,
        closed_within_bound=emp_closed <= bound + 3.0 * se_closed,
        closed_below_open=emp_closed + 3.0 * se_closed < emp_open - 3.0 * se_open,
    )


def js_divergence(p, q):
    """Jensen-Shannon divergence (natural log) of two aligned histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histograms use different binnings: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("histograms must be nonnegative")
    for name, h in (("p", p), ("q", q)):
        if abs(h.sum() - 1.0) > 1e-9:
            raise ValueError(f"histogram {name} must sum to 1")
    m = 0.5 * (p + q)
    return float(0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum())


def division_bounds(c_star, c_max, h, w, r):
    """Analytic lower/upper division-time bounds for one instance."""
    return DivisionBounds(min_divisions(c_star, c_max), max_divisions(h, w, r))


def sweep_division_bounds(n_instances, size=8, c_max=22.0, cell_pixels=64, seed=0):
    """Randomized sandwich check: n_min <= brute-force oracle <= n_max.

    Draws fine grids with cells in [0, c_max] (so a valid division always
    exists), rejecting the degenerate totals that never exceed c_max.
    Returns per-instance rows (id, n_min, oracle, n_max, ok).
    """
    rng = np.random.default_rng(seed)
    h = w = size * cell_pixels
    rows = []
    for i in range(n_instances):
        while True:
            g = rng.uniform(0.0, c_max, (size, size))
            if g.sum() > c_max:
                break
        total = float(g.sum())
        oracle = brute_force_min_divisions(g, c_max)
        n_min = min_divisions(total, c_max)
        n_max = max_divisions(h, w, cell_pixels)
        rows.append(
            {
                "id": i,
                "n_min": n_min,
                "oracle": oracle,
                "n_max": n_max,
                "ok": n_min <= oracle <= n_max,
            }
        )
    return rows
