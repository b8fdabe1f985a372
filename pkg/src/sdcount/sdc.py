"""Multi-stage spatial divide-and-conquer merging.

Stage 0 predicts a coarse count grid. Each later stage i doubles the
resolution: the previous merged grid is redistributed to its four children
by an upsampling map U_i, then blended cellwise with the stage's own count
grid C_i under a soft division mask W_i:

    DIV_0 = C_0
    DIV_i = (1 - W_i) o ((DIV_{i-1} kron 1_{2x2}) o U_i) + W_i o C_i

The engine treats counter / division decider / upsampler as opaque
callables keyed by stage, so the same recursion serves the toy model, the
ground-truth oracle and anything else that honours the shapes.
"""

import os
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from sdcount import gridmaps
from sdcount.backend import kernels

UPMAP_TOL = 1e-6


@dataclass
class StagePrediction:
    """Per-stage head outputs; mask and upmap are absent at stage 0."""

    counts: np.ndarray
    mask: Optional[np.ndarray] = None
    upmap: Optional[np.ndarray] = None


@dataclass
class SdcTrace:
    """All intermediates of one divide-and-conquer run."""

    stages: list
    divs: list

    @property
    def n_stages(self):
        return len(self.stages) - 1


def guided_upsample(div_prev, u):
    """Redistribute each parent count over its 2x2 children with weights u.

    u must be block-normalized (each 2x2 block summing to 1 within 1e-6),
    which makes the total count invariant.
    """
    prev = gridmaps.as_count_grid(div_prev, "div_prev")
    u = gridmaps.as_grid(u, "upsampling map")
    if u.shape != (2 * prev.shape[0], 2 * prev.shape[1]):
        raise ValueError(f"upsampling map {u.shape} is not 2x div_prev {prev.shape}")
    sums = kernels.block_sum2(u)
    if np.max(np.abs(sums - 1.0)) > UPMAP_TOL:
        raise ValueError("upsampling map blocks are not normalized to 1")
    return kernels.guided_upsample(prev, u)


def merge_step(div_prev, c, w, u):
    """One merge: (1 - w) o guided_upsample(div_prev, u) + w o c."""
    prev = gridmaps.as_count_grid(div_prev, "div_prev")
    target = (2 * prev.shape[0], 2 * prev.shape[1])
    c = gridmaps.as_count_grid(c, "stage counts")
    w = gridmaps.as_division_mask(w, "division mask")
    u = gridmaps.as_grid(u, "upsampling map")
    for name, g in (("stage counts", c), ("division mask", w), ("upsampling map", u)):
        if g.shape != target:
            raise ValueError(f"{name} has shape {g.shape}, expected {target}")
    return kernels.merge_step(prev, c, w, u)


def run(model, features, n):
    """Run n division stages and return the full trace.

    model is a (counter, decider, upsampler) triple of callables, each
    invoked as fn(features[i], i). The counter must return a count grid at
    every stage 0..n; decider and upsampler are consulted for stages 1..n
    and must return a mask / block-normalized upsampling map at double the
    previous resolution.
    """
    if n < 0:
        raise ValueError("number of division stages must be >= 0")
    if len(features) < n + 1:
        raise ValueError(f"need features for stages 0..{n}, got {len(features)}")
    counter, decider, upsampler = model
    c0 = gridmaps.as_count_grid(counter(features[0], 0), "stage-0 counts")
    stages = [StagePrediction(counts=c0)]
    divs = [c0]
    for i in range(1, n + 1):
        c = counter(features[i], i)
        w = decider(features[i], i)
        u = upsampler(features[i], i)
        div = merge_step(divs[-1], c, w, u)
        stages.append(
            StagePrediction(
                counts=gridmaps.as_count_grid(c),
                mask=gridmaps.as_division_mask(w),
                upmap=gridmaps.as_grid(u),
            )
        )
        divs.append(div)
    return SdcTrace(stages=stages, divs=divs)


def image_count(trace):
    """Total object count: the integral of the final merged grid."""
    if not trace.divs:
        raise ValueError("empty trace")
    return float(trace.divs[-1].sum())


def save_trace(trace, out_dir):
    """Write a trace as grid files div_<i>/c_<i>/w_<i>/u_<i>.grid."""
    os.makedirs(out_dir, exist_ok=True)
    for i, (stage, div) in enumerate(zip(trace.stages, trace.divs)):
        gridmaps.write_grid(os.path.join(out_dir, f"div_{i}.grid"), div)
        gridmaps.write_grid(os.path.join(out_dir, f"c_{i}.grid"), stage.counts)
        if stage.mask is not None:
            gridmaps.write_grid(os.path.join(out_dir, f"w_{i}.grid"), stage.mask)
        if stage.upmap is not None:
            gridmaps.write_grid(os.path.join(out_dir, f"u_{i}.grid"), stage.upmap)


def load_trace(trace_dir):
    """Load a trace previously written by save_trace."""
    idx = set()
    for name in os.listdir(trace_dir):
        m = re.fullmatch(r"div_(\d+)\.grid", name)
        if m:
            idx.add(int(m.group(1)))
    if not idx or idx != set(range(max(idx) + 1)):
        raise ValueError(f"{trace_dir} does not hold a contiguous div_<i>.grid set")
    stages, divs = [], []
    for i in sorted(idx):
        divs.append(gridmaps.read_grid(os.path.join(trace_dir, f"div_{i}.grid")))
        counts = gridmaps.read_grid(os.path.join(trace_dir, f"c_{i}.grid"))
        mask = upmap = None
        if i > 0:
            mask = gridmaps.read_grid(os.path.join(trace_dir, f"w_{i}.grid"))
            upmap = gridmaps.read_grid(os.path.join(trace_dir, f"u_{i}.grid"))
        stages.append(StagePrediction(counts=counts, mask=mask, upmap=upmap))
    return SdcTrace(stages=stages, divs=divs)
