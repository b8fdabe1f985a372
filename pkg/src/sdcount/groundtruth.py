"""Ground-truth construction: density maps, patch counts, interval classes.

Dot annotations are rendered into density maps (fixed-sigma or
geometry-adaptive Gaussian kernels), integrated into per-patch count grids
at every pyramid level, discretized into count-interval class labels, and
turned into the redistribution maps and division flags that supervise the
divide-and-conquer merge.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from sdcount import gridmaps
from sdcount.backend import kernels

# Geometry-adaptive kernel convention: sigma = beta * mean distance to the
# k nearest annotated neighbours, clamped to [SIGMA_MIN, SIGMA_MAX] pixels.
ADAPTIVE_BETA = 0.3
ADAPTIVE_K = 3
SIGMA_MIN = 1.0
SIGMA_MAX = 32.0


def check_annotations(points, h, w):
    """Validate dot annotations: finite (x, y) pixel coords inside the image."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 2))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"annotations must be (n, 2) x/y pairs, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("annotations contain non-finite coordinates")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x < 0) or np.any(x >= w) or np.any(y < 0) or np.any(y >= h):
        raise ValueError("annotations fall outside the image bounds")
    return pts


def _point_sigmas(pts, sigma, beta, k):
    if sigma is not None:
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        return np.full(len(pts), float(sigma))
    if beta <= 0 or k < 1:
        raise ValueError("adaptive kernel needs beta > 0 and k >= 1")
    n = len(pts)
    sigmas = np.empty(n)
    if n == 1:
        # no neighbour to measure against; the clamp ceiling is the fallback
        sigmas[0] = SIGMA_MAX
        return sigmas
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    kk = min(k, n - 1)
    nearest = np.sort(d, axis=1)[:, :kk]
    sigmas = beta * nearest.mean(axis=1)
    return np.clip(sigmas, SIGMA_MIN, SIGMA_MAX)


def render_density(points, h, w, sigma=None, beta=ADAPTIVE_BETA, k=ADAPTIVE_K):
    """Render dot annotations into a density map of shape (h, w).

    Each point contributes a discrete Gaussian truncated at 4*sigma and
    renormalized to unit sum before border clipping, so the map integrates
    to the number of interior points. Pass ``sigma`` for a fixed kernel or
    leave it None for the geometry-adaptive one.
    """
    if h < 1 or w < 1:
        raise ValueError(f"empty image dimensions ({h}, {w})")
    pts = check_annotations(points, h, w)
    density = np.zeros((h, w))
    if len(pts) == 0:
        return density
    sigmas = _point_sigmas(pts, sigma, beta, k)
    for (x, y), s in zip(pts, sigmas):
        r = max(1, int(math.ceil(4.0 * s)))
        cx, cy = int(round(x)), int(round(y))
        xs = np.arange(cx - r, cx + r + 1)
        ys = np.arange(cy - r, cy + r + 1)
        gx = np.exp(-((xs - x) ** 2) / (2.0 * s * s))
        gy = np.exp(-((ys - y) ** 2) / (2.0 * s * s))
        kern = np.outer(gy, gx)
        kern /= kern.sum()
        y0, y1 = max(0, cy - r), min(h, cy + r + 1)
        x0, x1 = max(0, cx - r), min(w, cx + r + 1)
        density[y0:y1, x0:x1] += kern[
            y0 - (cy - r) : y1 - (cy - r), x0 - (cx - r) : x1 - (cx - r)
        ]
    return density


def patch_counts(density, patch):
    """Integrate a density map over non-overlapping patch x patch tiles."""
    d = gridmaps.as_count_grid(density, "density map")
    if patch < 1:
        raise ValueError("patch size must be positive")
    h, w = d.shape
    if h % patch or w % patch:
        raise ValueError(f"dimensions {d.shape} not divisible by patch {patch}")
    return d.reshape(h // patch, patch, w // patch, patch).sum(axis=(1, 3))


# --- count-interval partitions ----------------------------------------------

ONE_LINEAR = "one-linear"
TWO_LINEAR = "two-linear"
COARSE_STEP = 0.5
FINE_STEP = 0.05


@dataclass(frozen=True)
class IntervalPartition:
    """Discretization of [0, +inf) into count classes.

    Class 0 is the singleton {0}; class m (1 <= m <= M) is the left-open
    interval (boundaries[m-1], boundaries[m]]; class M+1 is the overflow
    (c_max, +inf).
    """

    c_max: float
    boundaries: np.ndarray = field(repr=False)
    scheme: str

    @property
    def n_classes(self):
        return len(self.boundaries) + 1  # {0}, M intervals, overflow

    @property
    def overflow_class(self):
        return self.n_classes - 1


def _is_half_multiple(x):
    return abs(x * 2.0 - round(x * 2.0)) < 1e-9


def build_partition(c_max, scheme=ONE_LINEAR):
    """Build the one-linear (0.5 step) or two-linear (0.05 below 0.5) partition."""
    if not (c_max > 0 and _is_half_multiple(c_max)):
        raise ValueError(f"c_max must be a positive multiple of 0.5, got {c_max}")
    n_coarse = int(round(c_max / COARSE_STEP))
    coarse = COARSE_STEP * np.arange(n_coarse + 1)
    if scheme == ONE_LINEAR:
        boundaries = coarse
    elif scheme == TWO_LINEAR:
        fine = FINE_STEP * np.arange(11)  # 0, 0.05, ..., 0.5
        boundaries = np.concatenate([fine, coarse[2:]]) if n_coarse >= 2 else fine
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    boundaries = boundaries.copy()
    boundaries[-1] = c_max  # guard against accumulated float noise
    return IntervalPartition(float(c_max), boundaries, scheme)


def count_to_class(c, partition):
    """Class index of the interval containing count c (exactly 0 -> class 0)."""
    if not np.isfinite(c) or c < 0:
        raise ValueError(f"count must be finite and >= 0, got {c}")
    if c == 0.0:
        return 0
    if c > partition.c_max:
        return partition.overflow_class
    return int(np.searchsorted(partition.boundaries, c, side="left"))


def class_to_count(m, partition):
    """Representative count of class m: 0, interval midpoint, or c_max."""
    if not 0 <= m < partition.n_classes:
        raise ValueError(f"class index {m} out of range [0, {partition.n_classes})")
    if m == 0:
        return 0.0
    if m == partition.overflow_class:
        return partition.c_max
    b = partition.boundaries
    return 0.5 * (b[m - 1] + b[m])


def class_values(partition):
    """Representative counts for all classes as a vector."""
    return np.array(
        [class_to_count(m, partition) for m in range(partition.n_classes)]
    )


def grid_to_classes(counts, partition):
    """Elementwise count_to_class over a count grid."""
    g = gridmaps.as_count_grid(counts)
    out = np.empty(g.shape, dtype=np.int64)
    flat = g.ravel()
    oflat = out.ravel()
    for i, c in enumerate(flat):
        oflat[i] = count_to_class(c, partition)
    return out


def quantile_cmax(values, q=0.95):
    """Nearest-rank quantile of patch counts, rounded up to a 0.5 multiple."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    rank = int(math.ceil(q * vals.size))  # 1-based nearest rank
    v = np.sort(vals)[rank - 1]
    return math.ceil(round(v / COARSE_STEP, 9)) * COARSE_STEP


def gt_upsampling_map(c_prev, c_cur):
    """Ground-truth redistribution map: c_cur / upsampled c_prev.

    Blocks whose parent count is zero get the uniform weight 0.25; when
    block sums of c_cur equal c_prev, every 2x2 block sums to 1.
    """
    prev = gridmaps.as_count_grid(c_prev, "c_prev")
    cur = gridmaps.as_count_grid(c_cur, "c_cur")
    if cur.shape != (2 * prev.shape[0], 2 * prev.shape[1]):
        raise ValueError(f"c_cur {cur.shape} is not 2x the size of c_prev {prev.shape}")
    return kernels.gt_upsample_map(prev, cur)


def division_labels(c_gt, c_max):
    """Boolean grid marking cells whose count strictly exceeds c_max."""
    g = gridmaps.as_count_grid(c_gt)
    return g > c_max


def count_pyramid(density, base_patch, n_levels):
    """Patch-count grids at levels 0..n_levels (patch size halves per level)."""
    if base_patch % (1 << n_levels):
        raise ValueError(
            f"base patch {base_patch} not divisible by 2^{n_levels}"
        )
    return [patch_counts(density, base_patch >> i) for i in range(n_levels + 1)]


# --- annotation CSV (header "x,y", one point per row) -------------------------


def write_annotations(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y"])
        for x, y in pts:
            writer.writerow([repr(float(x)), repr(float(y))])


def read_annotations(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise ValueError(f"annotation file {path} lacks the 'x,y' header")
        pts = [(float(row[0]), float(row[1])) for row in reader if row]
    return np.array(pts, dtype=np.float64).reshape(-1, 2)
