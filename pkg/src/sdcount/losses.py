"""Supervision terms for divide-and-conquer counting, with analytic gradients.

The scalar losses:

    l_counter_reg  mean l1 between c_max-truncated predicted and true counts
    l_counter_cls  mean cross-entropy of per-cell count-interval classifiers
    l_merge        mean l1 between the final merged grid and its ground truth
    l_div          -log of each 2x2 mask-block max where the parent count
                   exceeds c_max (explicit division supervision)
    l_up           mean l1 between predicted and true upsampling maps
    l_eq           parent-vs-children count consistency where the parent is
                   inside the closed set (regression mode only)

reg totals counter + merge + up + div + eq; cls drops eq (count classes are
discrete, so no consistency gradient exists there).

``gradients`` backpropagates the total through the merge recursion, the
mask logistic and the 2x2 block softmax by hand, returning derivatives with
respect to every count cell (or class logit), mask logit and upsampler
logit. Subgradient conventions are fixed for determinism: l1 at 0 -> 0, the
block max routes to its first-index argmax.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from sdcount.backend import kernels

REG = "reg"
CLS = "cls"


@dataclass
class LossBreakdown:
    l_counter: float
    l_merge: float
    l_up: float
    l_div: float
    l_eq: Optional[float]
    total: float


@dataclass
class HeadOutputs:
    """Raw per-stage head outputs entering the loss.

    reg mode fills ``counts`` (C_i grids, stages 0..N); cls mode fills
    ``class_logits`` ((H, W, K) arrays) plus ``class_values`` (the K
    representative counts used to form differentiable expected counts).
    ``mask_logits`` and ``up_logits`` cover stages 1..N; the mask is
    sigmoid(mask_logits) and the upsampling map the 2x2 block softmax of
    up_logits.
    """

    mask_logits: list
    up_logits: list
    counts: Optional[list] = None
    class_logits: Optional[list] = None
    class_values: Optional[np.ndarray] = None


@dataclass
class GtBundle:
    """Ground truth: count pyramid 0..N, upsampling maps 1..N, labels 0..N."""

    counts: list
    up_maps: list
    c_max: float
    class_labels: Optional[list] = None


@dataclass
class LossGradients:
    d_mask_logits: list
    d_up_logits: list
    d_counts: Optional[list] = None
    d_class_logits: Optional[list] = None


def l_counter_reg(pred, gt, c_max):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(
        np.abs(np.minimum(pred, c_max) - np.minimum(gt, c_max)).mean()
    )


def l_counter_cls(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape[:-1] != y.shape:
        raise ValueError(f"logits {z.shape} do not match labels {y.shape}")
    k = z.shape[-1]
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels must be class indices in [0, {k})")
    zf = z.reshape(-1, k)
    yf = y.reshape(-1)
    m = zf.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(zf - m).sum(axis=1))
    return float((lse - zf[np.arange(len(yf)), yf]).mean())


def l_merge(div_n, gt_n):
    a = np.asarray(div_n, dtype=np.float64)
    b = np.asarray(gt_n, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def l_div(masks, gt_counts, c_max):
    """Sum of -log(block max of W_i) over cells whose parent gt > c_max.

    masks holds W_1..W_N, gt_counts the parent levels C_0^gt..C_{N-1}^gt.
    """
    if len(masks) != len(gt_counts):
        raise ValueError("need one parent gt grid per mask")
    total = 0.0
    for w, gt in zip(masks, gt_counts):
        w = np.asarray(w, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if w.shape != (2 * gt.shape[0], 2 * gt.shape[1]):
            raise ValueError(f"mask {w.shape} is not 2x its parent gt {gt.shape}")
        flagged = gt > c_max
        if not flagged.any():
            continue
        mx, _ = kernels.block_max2(np.ascontiguousarray(w))
        with np.errstate(divide="ignore"):
            total += float(-np.log(mx[flagged]).sum())
    return total


def l_up(upmaps, gt_upmaps):
    """Sum over stages of the mean l1 between U_i and its ground truth."""
    if len(upmaps) != len(gt_upmaps):
        raise ValueError("need one ground-truth map per upsampling map")
    total = 0.0
    for u, g in zip(upmaps, gt_upmaps):
        u = np.asarray(u, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if u.shape != g.shape:
            raise ValueError(f"shape mismatch: {u.shape} vs {g.shape}")
        total += float(np.abs(u - g).mean())
    return total


def l_eq(counts, gt_counts, c_max, mode=REG):
    """Consistency |C_{i-1}[j,k] - sum of its 2x2 block of C_i| where the
    parent ground truth is inside the closed set; summed over cells and
    stages. counts holds C_0..C_N, gt_counts the parent levels 0..N-1.
    """
    if mode == CLS:
        raise ValueError("the consistency loss is dropped in cls mode")
    if len(gt_counts) != len(counts) - 1:
        raise ValueError("need gt for every parent level (one fewer than counts)")
    total = 0.0
    for i in range(1, len(counts)):
        parent = np.asarray(counts[i - 1], dtype=np.float64)
        child = np.ascontiguousarray(counts[i], dtype=np.float64)
        gt = np.asarray(gt_counts[i - 1], dtype=np.float64)
        if child.shape != (2 * parent.shape[0], 2 * parent.shape[1]):
            raise ValueError(f"counts at stage {i} are not 2x stage {i - 1}")
        inside = gt <= c_max
        diff = parent - kernels.block_sum2(child)
        total += float(np.abs(diff[inside]).sum())
    return total


def total_loss(mode, l_counter, l_merge, l_up, l_div, l_eq=None):
    """Combine components into the mode's unweighted sum."""
    if mode == REG:
        if l_eq is None:
            raise ValueError("reg mode requires the consistency component")
        parts = (l_counter, l_merge, l_up, l_div, l_eq)
        return LossBreakdown(l_counter, l_merge, l_up, l_div, l_eq, float(sum(parts)))
    if mode == CLS:
        parts = (l_counter, l_merge, l_up, l_div)
        return LossBreakdown(l_counter, l_merge, l_up, l_div, None, float(sum(parts)))
    raise ValueError(f"unknown mode {mode!r}")


# --- full forward / backward over head outputs --------------------------------


@dataclass
class _Forward:
    counts: list
    masks: list
    upmaps: list
    hats: list
    divs: list
    probs: Optional[list]
    breakdown: LossBreakdown


def _softmax(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _check_bundle(outputs, gt, mode):
    n = len(outputs.mask_logits)
    if len(outputs.up_logits) != n:
        raise ValueError("mask_logits and up_logits must cover the same stages")
    if len(gt.counts) != n + 1:
        raise ValueError(f"ground truth pyramid must have {n + 1} levels")
    if len(gt.up_maps) != n:
        raise ValueError(f"ground truth needs {n} upsampling maps")
    if mode == REG:
        if outputs.counts is None or len(outputs.counts) != n + 1:
            raise ValueError("reg mode needs count grids for stages 0..N")
        per_stage = outputs.counts
    elif mode == CLS:
        if outputs.class_logits is None or len(outputs.class_logits) != n + 1:
            raise ValueError("cls mode needs class logits for stages 0..N")
        if outputs.class_values is None:
            raise ValueError("cls mode needs the class value vector")
        if gt.class_labels is None or len(gt.class_labels) != n + 1:
            raise ValueError("cls mode needs class labels for stages 0..N")
        per_stage = outputs.class_logits
    else:
        raise ValueError(f"unknown mode {mode!r}")

    h0, w0 = np.asarray(gt.counts[0]).shape
    for i in range(n + 1):
        shape = (h0 << i, w0 << i)
        if np.asarray(gt.counts[i]).shape != shape:
            raise ValueError(f"gt counts at level {i} must have shape {shape}")
        if np.asarray(per_stage[i]).shape[:2] != shape:
            raise ValueError(f"stage {i} head output must have leading shape {shape}")
        if i >= 1:
            for name, arr in (
                ("mask logits", outputs.mask_logits[i - 1]),
                ("upsampler logits", outputs.up_logits[i - 1]),
                ("gt upsampling map", gt.up_maps[i - 1]),
            ):
                if np.asarray(arr).shape != shape:
                    raise ValueError(f"{name} at stage {i} must have shape {shape}")
    return n


def _forward(outputs, gt, mode):
    n = _check_bundle(outputs, gt, mode)
    masks = [expit(np.asarray(z, dtype=np.float64)) for z in outputs.mask_logits]
    upmaps = [
        kernels.spatial_softmax2(np.ascontiguousarray(z, dtype=np.float64))
        for z in outputs.up_logits
    ]
    if mode == REG:
        counts = [np.ascontiguousarray(c, dtype=np.float64) for c in outputs.counts]
        probs = None
    else:
        probs = [_softmax(np.asarray(z, dtype=np.float64)) for z in outputs.class_logits]
        counts = [
            np.ascontiguousarray(p @ outputs.class_values) for p in probs
        ]

    divs = [counts[0]]
    hats = [None]
    for i in range(1, n + 1):
        hat = kernels.guided_upsample(divs[-1], upmaps[i - 1])
        hats.append(hat)
        divs.append((1.0 - masks[i - 1]) * hat + masks[i - 1] * counts[i])

    if mode == REG:
        lc = sum(l_counter_reg(counts[i], gt.counts[i], gt.c_max) for i in range(n + 1))
        leq = l_eq(counts, gt.counts[:-1], gt.c_max)
    else:
        lc = sum(
            l_counter_cls(outputs.class_logits[i], gt.class_labels[i])
            for i in range(n + 1)
        )
        leq = None
    lm = l_merge(divs[-1], gt.counts[-1])
    lu = l_up(upmaps, gt.up_maps)
    ld = l_div(masks, gt.counts[:-1], gt.c_max)
    breakdown = total_loss(mode, lc, lm, lu, ld, leq)
    return _Forward(counts, masks, upmaps, hats, divs, probs, breakdown)


def evaluate_losses(outputs, gt, mode):
    """All loss components for one image's head outputs."""
    return _forward(outputs, gt, mode).breakdown


def gradients(outputs, gt, mode, detach_cls_counts=False):
    """Analytic d(total)/d(head outputs); returns (breakdown, grads).

    Derivatives are taken with respect to each count cell (reg) or class
    logit (cls), each mask logit and each upsampler logit, by chain rule
    through the merge recursion, the logistic and the block softmax.

    detach_cls_counts stops the merge-path gradient at the expected counts
    in cls mode, leaving only the cross-entropy term on the class logits
    (classifier count maps are discretizations, so training them through
    the merge is optional; the full chain stays the default and is what
    finite differences of the total reproduce).
    """
    fwd = _forward(outputs, gt, mode)
    n = len(fwd.masks)
    counts, masks, upmaps = fwd.counts, fwd.masks, fwd.upmaps
    c_max = gt.c_max

    d_counts = [np.zeros_like(c) for c in counts]
    d_masks = [np.zeros_like(m) for m in masks]
    d_upmaps = [np.zeros_like(u) for u in upmaps]
    d_divs = [np.zeros_like(d) for d in fwd.divs]

    # merging loss, then the recursion unwound from the finest stage
    gt_n = np.asarray(gt.counts[-1], dtype=np.float64)
    d_divs[n] += np.sign(fwd.divs[n] - gt_n) / gt_n.size
    for i in range(n, 0, -1):
        m = masks[i - 1]
        d_counts[i] += d_divs[i] * m
        d_masks[i - 1] += d_divs[i] * (counts[i] - fwd.hats[i])
        d_hat = d_divs[i] * (1.0 - m)
        d_upmaps[i - 1] += d_hat * kernels.kron_upsample2(fwd.divs[i - 1])
        d_divs[i - 1] += kernels.block_sum2(
            np.ascontiguousarray(d_hat * upmaps[i - 1])
        )
    d_counts[0] += d_divs[0]

    if mode == REG:
        # counter loss with c_max truncation: gradient passes below the cap
        for i in range(n + 1):
            gt_i = np.asarray(gt.counts[i], dtype=np.float64)
            diff = np.minimum(counts[i], c_max) - np.minimum(gt_i, c_max)
            d_counts[i] += (
                np.sign(diff) * (counts[i] < c_max) / gt_i.size
            )
        # consistency loss where the parent gt stays inside the closed set
        for i in range(1, n + 1):
            gt_par = np.asarray(gt.counts[i - 1], dtype=np.float64)
            s = np.sign(counts[i - 1] - kernels.block_sum2(counts[i]))
            s = s * (gt_par <= c_max)
            d_counts[i - 1] += s
            d_counts[i] -= kernels.kron_upsample2(np.ascontiguousarray(s))

    # upsampling loss
    for i in range(n):
        gt_u = np.asarray(gt.up_maps[i], dtype=np.float64)
        d_upmaps[i] += np.sign(upmaps[i] - gt_u) / gt_u.size

    # division loss: gradient lands on each flagged block's argmax cell
    for i in range(n):
        gt_par = np.asarray(gt.counts[i], dtype=np.float64)
        flagged = gt_par > c_max
        if flagged.any():
            mx, arg = kernels.block_max2(masks[i])
            jj, kk = np.nonzero(flagged)
            rows = 2 * jj + arg[jj, kk] // 2
            cols = 2 * kk + arg[jj, kk] % 2
            d_masks[i][rows, cols] -= 1.0 / mx[jj, kk]

    d_mask_logits = [dm * m * (1.0 - m) for dm, m in zip(d_masks, masks)]
    d_up_logits = [
        kernels.spatial_softmax2_backward(u, np.ascontiguousarray(du))
        for u, du in zip(upmaps, d_upmaps)
    ]

    if mode == REG:
        grads = LossGradients(d_mask_logits, d_up_logits, d_counts=d_counts)
    else:
        d_logits = []
        for i in range(n + 1):
            p = fwd.probs[i]
            labels = np.asarray(gt.class_labels[i])
            k = p.shape[-1]
            onehot = np.eye(k)[labels.reshape(-1)].reshape(p.shape)
            dz = (p - onehot) / labels.size
            if not detach_cls_counts:
                dz += d_counts[i][..., None] * p * (
                    outputs.class_values - counts[i][..., None]
                )
            d_logits.append(dz)
        grads = LossGradients(d_mask_logits, d_up_logits, d_class_logits=d_logits)

    for arrs in (grads.d_mask_logits, grads.d_up_logits,
                 grads.d_counts or [], grads.d_class_logits or []):
        for a in arrs:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("non-finite gradient encountered")
    return fwd.breakdown, grads
