"""Pure-numpy implementations of the 2x2 block-grid kernels.

Mirror of the compiled ``sdcount._kernels`` extension; same signatures,
same semantics. All inputs are C-contiguous float64 2-D arrays and are
assumed pre-validated by the caller.
"""

import numpy as np

BACKEND_NAME = "python"


def kron_upsample2(g):
    """Replicate every cell into a 2x2 block (g ⊗ 1_{2x2})."""
    return np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)


def block_sum2(g):
    """Sum each disjoint 2x2 block into one output cell."""
    h, w = g.shape
    return g.reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))


def spatial_softmax2(z):
    """Softmax over each disjoint 2x2 block, max-subtracted for stability."""
    h, w = z.shape
    blocks = z.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(-1, 4)
    e = np.exp(blocks - blocks.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    return (
        e.reshape(h // 2, w // 2, 2, 2).transpose(0, 2, 1, 3).reshape(h, w).copy()
    )


def spatial_softmax2_backward(u, du):
    """Backprop through spatial_softmax2: dz = u * (du - sum_block(u * du))."""
    h, w = u.shape
    ub = u.reshape(h // 2, 2, w // 2, 2)
    dub = du.reshape(h // 2, 2, w // 2, 2)
    dot = (ub * dub).sum(axis=(1, 3), keepdims=True)
    return (ub * (dub - dot)).reshape(h, w)


def guided_upsample(prev, u):
    """(prev ⊗ 1_{2x2}) ∘ u."""
    return kron_upsample2(prev) * u


def merge_step(prev, c, w, u):
    """(1 - w) ∘ ((prev ⊗ 1_{2x2}) ∘ u) + w ∘ c."""
    return (1.0 - w) * guided_upsample(prev, u) + w * c


def gt_upsample_map(prev, cur):
    """cur / (prev ⊗ 1_{2x2}); blocks with a zero parent become uniform 0.25."""
    den = kron_upsample2(prev)
    out = np.empty_like(cur)
    zero = den == 0.0
    np.divide(cur, den, out=out, where=~zero)
    out[zero] = 0.25
    return out


def block_max2(g):
    """Per 2x2 block max and its offset (row-major 0..3, first-index ties)."""
    h, w = g.shape
    blocks = g.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(-1, 4)
    arg = blocks.argmax(axis=1)
    mx = blocks[np.arange(blocks.shape[0]), arg]
    shape = (h // 2, w // 2)
    return mx.reshape(shape), arg.reshape(shape).astype(np.int64)
