"""Core grid algebra for count grids, division masks and upsampling maps.

Grids are plain 2-D float64 numpy arrays. A count grid holds nonnegative
local object counts, a division mask holds per-cell weights in [0, 1], and
an upsampling map holds redistribution weights whose disjoint 2x2 blocks
each sum to 1. The merge arithmetic is written in terms of the four operations
below; docs use 1-based block indexing (output block [2j-1..2j, 2k-1..2k]
mirrors cell [j, k]) while code is 0-based.
"""

import json

import numpy as np

from sdcount.backend import kernels

BLOCK_SUM_TOL = 1e-9


def as_grid(values, name="grid"):
    """Coerce to a C-contiguous float64 2-D array; reject empty or non-finite."""
    g = np.ascontiguousarray(values, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {g.shape}")
    if g.shape[0] < 1 or g.shape[1] < 1:
        raise ValueError(f"{name} must have height, width >= 1")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"{name} contains non-finite values")
    return g


def as_count_grid(values, name="count grid"):
    g = as_grid(values, name)
    if np.any(g < 0.0):
        raise ValueError(f"{name} contains negative counts")
    return g


def as_division_mask(values, name="division mask"):
    g = as_grid(values, name)
    if np.any(g < 0.0) or np.any(g > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return g


def as_upsampling_map(values, name="upsampling map", tol=BLOCK_SUM_TOL):
    g = as_grid(values, name)
    if g.shape[0] % 2 or g.shape[1] % 2:
        raise ValueError(f"{name} dimensions must be even, got {g.shape}")
    if np.any(g < 0.0) or np.any(g > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    sums = kernels.block_sum2(g)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise ValueError(f"{name} 2x2 block sums deviate from 1 by more than {tol}")
    return g


def kron_upsample2(g):
    """Upsample a grid by replicating each cell into a 2x2 block.

    Output block [2j-1..2j, 2k-1..2k] (1-based) all equal g[j, k];
    dimensions double.
    """
    g = as_grid(g)
    return kernels.kron_upsample2(g)


def hadamard(a, b):
    """Elementwise product of two equally-shaped grids."""
    a = as_grid(a, "a")
    b = as_grid(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def block_sum2(g):
    """Aggregate each disjoint 2x2 block into its sum (halves dimensions)."""
    g = as_grid(g)
    if g.shape[0] % 2 or g.shape[1] % 2:
        raise ValueError(f"block_sum2 needs even dimensions, got {g.shape}")
    return kernels.block_sum2(g)


def spatial_softmax2(logits):
    """Softmax each disjoint 2x2 block of logits into redistribution weights.

    Every output block sums to 1; adding a constant to one block's logits
    leaves that block's output unchanged. Max-subtraction keeps large
    logits finite.
    """
    z = as_grid(logits, "logits")
    if z.shape[0] % 2 or z.shape[1] % 2:
        raise ValueError(f"spatial_softmax2 needs even dimensions, got {z.shape}")
    return kernels.spatial_softmax2(z)


# --- shared grid file format -------------------------------------------------
#
# One UTF-8 JSON header line {"h":H,"w":W,"dtype":"f64"} terminated by "\n",
# followed by H*W little-endian float64 values, row-major. Round-trips are
# bit-exact.


def write_grid(path, values):
    g = as_grid(values)
    h, w = g.shape
    header = '{"h":%d,"w":%d,"dtype":"f64"}\n' % (h, w)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(g.astype("<f8", copy=False).tobytes())


def read_grid(path):
    with open(path, "rb") as f:
        header = f.readline()
        meta = json.loads(header.decode("utf-8"))
        if meta.get("dtype") != "f64":
            raise ValueError(f"unsupported grid dtype in {path}: {meta.get('dtype')}")
        h, w = int(meta["h"]), int(meta["w"])
        raw = f.read(8 * h * w)
    if len(raw) != 8 * h * w:
        raise ValueError(f"truncated grid file {path}")
    return np.frombuffer(raw, dtype="<f8").reshape(h, w).astype(np.float64)
