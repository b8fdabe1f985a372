"""Counting evaluation metrics and per-count-bin error curves."""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from sdcount import gridmaps


def _paired(preds, gts):
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.size != g.size:
        raise ValueError(f"length mismatch: {p.size} vs {g.size}")
    if p.size == 0:
        raise ValueError("empty inputs")
    return p, g


def mae(preds, gts):
    p, g = _paired(preds, gts)
    return float(np.abs(p - g).mean())


def mse(preds, gts):
    """Root mean squared error (the counting literature's 'MSE')."""
    p, g = _paired(preds, gts)
    return float(math.sqrt(((p - g) ** 2).mean()))


def rmae(preds, gts):
    """Mean |error| / gt; rejects nonpositive ground truths outright."""
    p, g = _paired(preds, gts)
    if np.any(g <= 0):
        raise ValueError("rmae is undefined for ground-truth counts <= 0")
    return float((np.abs(p - g) / g).mean())


def game(pred_map, gt_map, level):
    """Grid Average Mean absolute Error at one level for one image.

    The maps are split into 2^level x 2^level sub-regions; the result is
    the sum of per-region |count error|. level 0 gives the plain absolute
    error of the image total, so its dataset mean equals MAE.
    """
    p = gridmaps.as_grid(pred_map, "pred map")
    g = gridmaps.as_grid(gt_map, "gt map")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if level < 0:
        raise ValueError("level must be >= 0")
    n = 1 << level
    h, w = p.shape
    if h % n or w % n:
        raise ValueError(f"maps of shape {p.shape} not divisible into {n}x{n} regions")
    ps = p.reshape(n, h // n, n, w // n).sum(axis=(1, 3))
    gs = g.reshape(n, h // n, n, w // n).sum(axis=(1, 3))
    return float(np.abs(ps - gs).sum())


@dataclass
class BinRow:
    bin_lo: float
    bin_hi: float
    n: int
    mae: float
    rmae: Optional[float]  # absent when the bin holds any zero ground truth


def bin_curves(per_patch_preds, per_patch_gts, bin_width=1.0):
    """Group patches by ground-truth count and report per-bin MAE / rMAE.

    Bins are [k*w, (k+1)*w); empty bins are omitted; a bin containing any
    zero ground truth reports rmae as None.
    """
    p, g = _paired(per_patch_preds, per_patch_gts)
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    idx = np.floor(g / bin_width).astype(np.int64)
    rows = []
    for k in np.unique(idx):
        sel = idx == k
        gsel, psel = g[sel], p[sel]
        row = BinRow(
            bin_lo=float(k * bin_width),
            bin_hi=float((k + 1) * bin_width),
            n=int(sel.sum()),
            mae=mae(psel, gsel),
            rmae=rmae(psel, gsel) if np.all(gsel > 0) else None,
        )
        rows.append(row)
    return rows


@dataclass
class EvalReport:
    """Image-level metrics plus grid-localized errors and per-bin curves."""

    mae: float
    mse: float
    rmae: float
    game: dict = field(default_factory=dict)
    bins: list = field(default_factory=list)


def write_eval_report(path, report):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "name", "value"])
        writer.writerow(["image", "mae", repr(report.mae)])
        writer.writerow(["image", "mse", repr(report.mse)])
        writer.writerow(["image", "rmae", repr(report.rmae)])
        for level in sorted(report.game):
            writer.writerow(["grid", f"game{level}", repr(report.game[level])])


def write_bin_curves(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "n", "mae", "rmae"])
        for r in rows:
            writer.writerow(
                [
                    repr(r.bin_lo),
                    repr(r.bin_hi),
                    r.n,
                    repr(r.mae),
                    "" if r.rmae is None else repr(r.rmae),
                ]
            )


def read_bin_curves(path):
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(
                BinRow(
                    bin_lo=float(rec["bin_lo"]),
                    bin_hi=float(rec["bin_hi"]),
                    n=int(rec["n"]),
                    mae=float(rec["mae"]),
                    rmae=float(rec["rmae"]) if rec["rmae"] else None,
                )
            )
    return rows
