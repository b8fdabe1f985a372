"""Synthetic cell-counting images with controlled per-sub-region counts.

Each image is tiled into square sub-regions; every sub-region draws an
independent target count and that many cell centres are placed uniformly
inside it (rejection sampling keeps a minimum separation, falling back to
overlapping placement when the region is too crowded to honour it). Cells
are rendered as isotropic Gaussian intensity blobs on a black background,
clipped to [0, 1]. Generation is deterministic: every image derives its
own integer seed from the dataset seed.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from sdcount import gridmaps, groundtruth

MAX_PLACEMENT_TRIES = 50


@dataclass(frozen=True)
class SynthSpec:
    n_images: int
    image_size: int = 256
    subregion: int = 64
    count_lo: int = 0
    count_hi: int = 10
    blob_sigma: float = 3.0
    blob_peak: float = 0.8
    min_separation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.subregion:
            raise ValueError("image_size must be divisible by subregion")
        if not 0 <= self.count_lo <= self.count_hi:
            raise ValueError("need 0 <= count_lo <= count_hi")
        if self.blob_sigma <= 0 or not 0 < self.blob_peak <= 1:
            raise ValueError("blob needs sigma > 0 and peak in (0, 1]")


def train_default(seed=0):
    """Closed training set: sub-region counts in [0, 10]."""
    return SynthSpec(n_images=500, count_lo=0, count_hi=10, seed=seed)


def test_default(seed=1):
    """Open test set: sub-region counts uniform in [0, 20]."""
    return SynthSpec(n_images=500, count_lo=0, count_hi=20, seed=seed)


def _place_points(rng, x0, y0, size, count, min_sep, existing):
    pts = []
    min_sep2 = min_sep * min_sep
    for _ in range(count):
        placed = None
        for _ in range(MAX_PLACEMENT_TRIES):
            x = x0 + rng.uniform(0.0, size)
            y = y0 + rng.uniform(0.0, size)
            ok = True
            for px, py in existing:
                if (px - x) ** 2 + (py - y) ** 2 < min_sep2:
                    ok = False
                    break
            if ok:
                placed = (x, y)
                break
        if placed is None:
            # too crowded for the separation constraint; accept overlap
            placed = (x0 + rng.uniform(0.0, size), y0 + rng.uniform(0.0, size))
        existing.append(placed)
        pts.append(placed)
    return pts


def _stamp_blob(image, x, y, sigma, peak):
    h, w = image.shape
    r = max(1, int(np.ceil(4.0 * sigma)))
    cx, cy = int(round(x)), int(round(y))
    xs = np.arange(max(0, cx - r), min(w, cx + r + 1))
    ys = np.arange(max(0, cy - r), min(h, cy + r + 1))
    gx = np.exp(-((xs - x) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((ys - y) ** 2) / (2.0 * sigma * sigma))
    image[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1] += peak * np.outer(gy, gx)


def gen_image(spec, rng):
    """One image from its own random stream.

    Returns (image, points, per_subregion_counts); counts are row-major
    over the sub-region tiling.
    """
    n = spec.image_size // spec.subregion
    image = np.zeros((spec.image_size, spec.image_size))
    all_points = []
    counts = np.empty((n, n), dtype=np.int64)
    for j in range(n):
        for k in range(n):
            c = int(rng.integers(spec.count_lo, spec.count_hi + 1))
            counts[j, k] = c
            _place_points(
                rng,
                k * spec.subregion,
                j * spec.subregion,
                spec.subregion,
                c,
                spec.min_separation,
                all_points,
            )
    for x, y in all_points:
        _stamp_blob(image, x, y, spec.blob_sigma, spec.blob_peak)
    np.clip(image, 0.0, 1.0, out=image)
    pts = np.array(all_points, dtype=np.float64).reshape(-1, 2)
    # keep annotations inside the open [0, size) bounds after float rounding
    np.clip(pts, 0.0, np.nextafter(spec.image_size, 0.0), out=pts)
    return image, pts, counts


def _image_seeds(spec):
    return np.random.default_rng(spec.seed).integers(
        0, 2**63 - 1, size=spec.n_images
    )


def _gen_one(spec, split, out_dir, i, seed):
    image, pts, counts = gen_image(spec, np.random.default_rng(int(seed)))
    img_rel = os.path.join(split, f"img_{i:04d}.grid")
    ann_rel = os.path.join(split, f"ann_{i:04d}.csv")
    gridmaps.write_grid(os.path.join(out_dir, img_rel), image)
    groundtruth.write_annotations(os.path.join(out_dir, ann_rel), pts)
    return {
        "split": split,
        "image": img_rel,
        "annotations": ann_rel,
        "seed": int(seed),
        "subregion_counts": counts.ravel().tolist(),
    }


def gen_split(spec, split, out_dir, jobs=1):
    """Generate one split; per-image seeds make the result independent of jobs."""
    os.makedirs(os.path.join(out_dir, split), exist_ok=True)
    seeds = _image_seeds(spec)
    if jobs <= 1:
        return [_gen_one(spec, split, out_dir, i, s) for i, s in enumerate(seeds)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(_gen_one, spec, split, out_dir, i, s)
            for i, s in enumerate(seeds)
        ]
        return [f.result() for f in futures]


def gen_dataset(train_spec, test_spec, out_dir, jobs=1):
    """Write both splits plus manifest.json; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "specs": {"train": asdict(train_spec), "test": asdict(test_spec)},
        "images": gen_split(train_spec, "train", out_dir, jobs)
        + gen_split(test_spec, "test", out_dir, jobs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(path):
    with open(path) as f:
        manifest = json.load(f)
    manifest["_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest


def split_entries(manifest, split):
    entries = [e for e in manifest["images"] if e["split"] == split]
    if not entries:
        raise ValueError(f"manifest holds no {split!r} images")
    return entries
