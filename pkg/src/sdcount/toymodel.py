"""A desk-scale trainable divide-and-conquer counter.

Fixed handcrafted patch features stand in for a learned backbone: the
point under study is the closed-set counter plus the division machinery,
not feature learning. Three shared linear heads (counter, division
decider, upsampler) are applied to the same 19-dim feature vector at every
pyramid level and trained end-to-end with SGD through the merge equations
using the analytic gradients from :mod:`sdcount.losses`.
"""

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from sdcount import gridmaps, groundtruth, losses, metrics, sdc
from sdcount.backend import kernels

FEATURE_DIM = 19
BASE_PATCH = 64
MAXIMA_THRESHOLD = 0.3
INIT_STD = 0.01

# Fixed input preconditioning for the linear heads: one constant per feature,
# identical at every pyramid level so features stay extensive and the shared
# heads remain exactly stage-invariant. Raw intensity sums span three orders
# of magnitude between sparse and dense patches, which vanilla SGD cannot
# serve with a single learning rate.
HEAD_INPUT_SCALE = np.array([1.0 / 16.0] * 16 + [1.0 / 64.0, 1.0, 1.0 / 4.0])


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


# --- features -----------------------------------------------------------------


def _local_maxima(image):
    """Strict 8-neighbourhood maxima above the intensity threshold."""
    p = np.pad(image, 1, constant_values=-np.inf)
    c = p[1:-1, 1:-1]
    best = c > MAXIMA_THRESHOLD
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            best &= c > p[1 + dy : p.shape[0] - 1 + dy, 1 + dx : p.shape[1] - 1 + dx]
    return best


def extract_features(image, level):
    """Per-patch features at pyramid level (patch size 64 / 2^level).

    Each patch yields 19 values: its 4x4 grid of block intensity sums, the
    total intensity, the max intensity, and the count of strict local
    maxima above 0.3. The recipe is identical at every level.
    """
    img = gridmaps.as_grid(image, "image")
    patch = BASE_PATCH >> level
    if patch < 4 or BASE_PATCH % (1 << level):
        raise ValueError(f"level {level} gives unusable patch size {patch}")
    h, w = img.shape
    if h % BASE_PATCH or w % BASE_PATCH:
        raise ValueError(f"image dims {img.shape} not divisible by {BASE_PATCH}")
    gh, gw = h // patch, w // patch
    q = patch // 4
    pooled4 = img.reshape(4 * gh, q, 4 * gw, q).sum(axis=(1, 3))
    pooled = (
        pooled4.reshape(gh, 4, gw, 4).transpose(0, 2, 1, 3).reshape(gh, gw, 16)
    )
    tiles = img.reshape(gh, patch, gw, patch)
    total = pooled.sum(axis=2)
    peak = tiles.max(axis=(1, 3))
    maxima = (
        _local_maxima(img).reshape(gh, patch, gw, patch).sum(axis=(1, 3))
    )
    feats = np.empty((gh, gw, FEATURE_DIM))
    feats[:, :, :16] = pooled
    feats[:, :, 16] = total
    feats[:, :, 17] = peak
    feats[:, :, 18] = maxima
    return feats


# --- model --------------------------------------------------------------------


@dataclass
class SdcModel:
    """Shared linear heads over the fixed features.

    counter_w is (19, 1) in reg mode and (19, K) in cls mode; decider and
    upsampler are (19,) + scalar bias, squashed by a logistic / 2x2 block
    softmax downstream. One parameter block serves every stage.
    """

    mode: str
    stages: int
    c_max: float
    scheme: str
    gt_sigma: float
    partition: Optional[groundtruth.IntervalPartition]
    counter_w: np.ndarray
    counter_b: np.ndarray
    decider_w: np.ndarray
    decider_b: float
    upsampler_w: np.ndarray
    upsampler_b: float

    @property
    def class_values(self):
        return groundtruth.class_values(self.partition)

    def parameters(self):
        return {
            "counter_w": self.counter_w,
            "counter_b": self.counter_b,
            "decider_w": self.decider_w,
            "decider_b": self.decider_b,
            "upsampler_w": self.upsampler_w,
            "upsampler_b": self.upsampler_b,
        }


def init_model(mode, stages, c_max, scheme=groundtruth.TWO_LINEAR,
               seed=0, gt_sigma=2.0, zero=False):
    """Gaussian-initialized model (std 0.01); ``zero`` gives all-zero heads."""
    if mode not in (losses.REG, losses.CLS):
        raise ValueError(f"unknown mode {mode!r}")
    partition = groundtruth.build_partition(c_max, scheme)
    k = 1 if mode == losses.REG else partition.n_classes
    rng = np.random.default_rng(seed)

    def draw(*shape):
        if zero:
            return np.zeros(shape)
        return rng.normal(0.0, INIT_STD, shape)

    return SdcModel(
        mode=mode,
        stages=stages,
        c_max=float(c_max),
        scheme=scheme,
        gt_sigma=float(gt_sigma),
        partition=partition,
        counter_w=draw(FEATURE_DIM, k),
        counter_b=draw(k),
        decider_w=draw(FEATURE_DIM),
        decider_b=float(draw(1)[0]),
        upsampler_w=draw(FEATURE_DIM),
        upsampler_b=float(draw(1)[0]),
    )


def head_outputs(model, feats):
    """Raw head outputs for losses/gradients from per-level feature grids.

    reg counts stay un-clamped here: truncation to c_max lives inside the
    counter loss and the [0, c_max] clamp is an inference-time operation
    (clamping during training gates the gradients and can dead-lock the
    counter against the consistency term).
    """
    scaled = [f * HEAD_INPUT_SCALE for f in feats]
    mask_logits = [f @ model.decider_w + model.decider_b for f in scaled[1:]]
    up_logits = [f @ model.upsampler_w + model.upsampler_b for f in scaled[1:]]
    if model.mode == losses.REG:
        counts = [(f @ model.counter_w)[:, :, 0] + model.counter_b[0] for f in scaled]
        out = losses.HeadOutputs(mask_logits, up_logits, counts=counts)
        return out, counts
    logits = [f @ model.counter_w + model.counter_b for f in scaled]
    out = losses.HeadOutputs(
        mask_logits, up_logits,
        class_logits=logits, class_values=model.class_values,
    )
    return out, logits


def _infer_counts(model, feats_i):
    f = feats_i * HEAD_INPUT_SCALE
    if model.mode == losses.REG:
        lin = (f @ model.counter_w)[:, :, 0] + model.counter_b[0]
        return np.clip(lin, 0.0, model.c_max)
    logits = f @ model.counter_w + model.counter_b
    values = model.class_values
    return values[np.argmax(logits, axis=2)]


def stage_callables(model):
    """(counter, decider, upsampler) for the merge engine, inference flavour."""

    def counter(feats_i, _stage):
        return _infer_counts(model, feats_i)

    def decider(feats_i, _stage):
        return expit((feats_i * HEAD_INPUT_SCALE) @ model.decider_w + model.decider_b)

    def upsampler(feats_i, _stage):
        z = (feats_i * HEAD_INPUT_SCALE) @ model.upsampler_w + model.upsampler_b
        return kernels.spatial_softmax2(np.ascontiguousarray(z))

    return counter, decider, upsampler


def forward(model, image, stages=None):
    """Inference pass: merged trace plus the per-level feature grids."""
    n = model.stages if stages is None else stages
    feats = [extract_features(image, i) for i in range(n + 1)]
    trace = sdc.run(stage_callables(model), feats, n)
    return trace, feats


# --- ground truth prep ----------------------------------------------------------


def image_ground_truth(image_shape, points, model_like):
    """Density-derived gt bundle for one image at the model's stage count."""
    h, w = image_shape
    n = model_like.stages
    density = groundtruth.render_density(points, h, w, sigma=model_like.gt_sigma)
    counts = groundtruth.count_pyramid(density, BASE_PATCH, n)
    upmaps = [
        groundtruth.gt_upsampling_map(counts[i - 1], counts[i])
        for i in range(1, n + 1)
    ]
    labels = None
    if model_like.mode == losses.CLS:
        labels = [groundtruth.grid_to_classes(c, model_like.partition) for c in counts]
    return losses.GtBundle(
        counts=counts, up_maps=upmaps, c_max=model_like.c_max, class_labels=labels
    )


# --- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = losses.CLS
    stages: int = 1
    c_max: float = 10.0
    scheme: str = groundtruth.TWO_LINEAR
    lr: float = 3e-3
    epochs: int = 30
    lr_decay: float = 0.1
    plateau_patience: int = 5
    plateau_tol: float = 1e-3
    seed: int = 0
    gt_sigma: float = 2.0


@dataclass
class EpochStats:
    epoch: int
    lr: float
    breakdown: losses.LossBreakdown


def _prep_example(entry, data_dir, model):
    image = gridmaps.read_grid(os.path.join(data_dir, entry["image"]))
    points = groundtruth.read_annotations(os.path.join(data_dir, entry["annotations"]))
    feats = [extract_features(image, i) for i in range(model.stages + 1)]
    gt = image_ground_truth(image.shape, points, model)
    return {"feats": feats, "gt": gt}


def prepare_examples(entries, data_dir, model, jobs=1):
    """Cache features and ground truth; neither depends on the parameters."""
    if jobs <= 1:
        return [_prep_example(e, data_dir, model) for e in entries]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_prep_example, e, data_dir, model) for e in entries]
        return [f.result() for f in futures]


def _flatten_feats(f):
    return f.reshape(-1, FEATURE_DIM)


def _step(model, example, lr):
    """One SGD step on one image; returns the image's loss breakdown."""
    feats = example["feats"]
    outputs, raw = head_outputs(model, feats)
    try:
        # classifier count maps are discretizations: the merge-path gradient
        # is detached from the class logits and only cross-entropy trains them
        breakdown, grads = losses.gradients(
            outputs, example["gt"], model.mode, detach_cls_counts=True
        )
    except FloatingPointError as e:
        raise NonFiniteLossError(str(e)) from e
    if not math.isfinite(breakdown.total):
        raise NonFiniteLossError(f"non-finite loss: {breakdown}")

    scaled = [f * HEAD_INPUT_SCALE for f in feats]
    d_cw = np.zeros_like(model.counter_w)
    d_cb = np.zeros_like(model.counter_b)
    if model.mode == losses.REG:
        for f, dc in zip(scaled, grads.d_counts):
            dlin = dc.ravel()
            d_cw[:, 0] += _flatten_feats(f).T @ dlin
            d_cb[0] += dlin.sum()
    else:
        for f, dz in zip(scaled, grads.d_class_logits):
            flat = dz.reshape(-1, dz.shape[-1])
            d_cw += _flatten_feats(f).T @ flat
            d_cb += flat.sum(axis=0)

    d_dw = np.zeros_like(model.decider_w)
    d_db = 0.0
    d_uw = np.zeros_like(model.upsampler_w)
    d_ub = 0.0
    for f, dm, du in zip(scaled[1:], grads.d_mask_logits, grads.d_up_logits):
        ff = _flatten_feats(f)
        d_dw += ff.T @ dm.ravel()
        d_db += dm.sum()
        d_uw += ff.T @ du.ravel()
        d_ub += du.sum()

    model.counter_w -= lr * d_cw
    model.counter_b -= lr * d_cb
    model.decider_w -= lr * d_dw
    model.decider_b -= lr * d_db
    model.upsampler_w -= lr * d_uw
    model.upsampler_b -= lr * d_ub
    return breakdown


def train(model, manifest, config, split="train", jobs=1, examples=None):
    """SGD over per-image total losses; deterministic under config.seed.

    The learning rate decays by lr_decay whenever the epoch-mean total
    fails to improve by plateau_tol (relative) for plateau_patience
    consecutive epochs. Returns (model, per-epoch stats).
    """
    from sdcount import synthcells

    if examples is None:
        entries = synthcells.split_entries(manifest, split)
        examples = prepare_examples(entries, manifest["_dir"], model, jobs=jobs)
    rng = np.random.default_rng(config.seed)
    lr = config.lr
    curve = []
    best = math.inf
    stall = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        sums = np.zeros(5)  # counter, merge, up, div, eq
        for idx in order:
            b = _step(model, examples[idx], lr)
            sums += (b.l_counter, b.l_merge, b.l_up, b.l_div, b.l_eq or 0.0)
        means = sums / len(examples)
        total = float(means.sum())
        breakdown = losses.LossBreakdown(
            l_counter=float(means[0]),
            l_merge=float(means[1]),
            l_up=float(means[2]),
            l_div=float(means[3]),
            l_eq=float(means[4]) if model.mode == losses.REG else None,
            total=total,
        )
        curve.append(EpochStats(epoch=epoch, lr=lr, breakdown=breakdown))
        if total < best * (1.0 - config.plateau_tol):
            best = total
            stall = 0
        else:
            stall += 1
            if stall >= config.plateau_patience:
                lr *= config.lr_decay
                stall = 0
    return model, curve


# --- evaluation -----------------------------------------------------------------


@dataclass
class EvalArrays:
    """Raw prediction/gt pairs backing an EvalReport."""

    image_preds: np.ndarray
    image_gts: np.ndarray
    patch_preds: np.ndarray
    patch_gts: np.ndarray


def oracle_callables(gt):
    """Perfect heads reading the ground-truth bundle (engine plumbing check)."""

    def counter(_feats, stage):
        return gt.counts[stage]

    def decider(_feats, stage):
        return np.ones_like(gt.counts[stage])

    def upsampler(_feats, stage):
        return np.full_like(gt.counts[stage], 0.25)

    return counter, decider, upsampler


def _eval_one(model, entry, data_dir, stages, oracle):
    image = gridmaps.read_grid(os.path.join(data_dir, entry["image"]))
    points = groundtruth.read_annotations(os.path.join(data_dir, entry["annotations"]))
    like = model if stages == model.stages else _with_stages(model, stages)
    gt = image_ground_truth(image.shape, points, like)
    feats = [extract_features(image, i) for i in range(stages + 1)]
    calls = oracle_callables(gt) if oracle else stage_callables(model)
    trace = sdc.run(calls, feats, stages)
    pred_fine = trace.divs[-1]
    pred_level0 = pred_fine
    for _ in range(stages):
        pred_level0 = kernels.block_sum2(np.ascontiguousarray(pred_level0))
    return {
        "pred_total": sdc.image_count(trace),
        "gt_total": float(gt.counts[0].sum()),
        "pred_patches": pred_level0.ravel(),
        "gt_patches": gt.counts[0].ravel(),
        "pred_fine": pred_fine,
        "gt_fine": gt.counts[-1],
    }


def _with_stages(model, stages):
    from dataclasses import replace

    return replace(model, stages=stages)


def evaluate(model, manifest, split="test", stages=None, oracle=False,
             jobs=1, bin_width=1.0, game_levels=(0, 1, 2)):
    """Evaluate on one split; returns (EvalReport, EvalArrays)."""
    from sdcount import synthcells

    n = model.stages if stages is None else stages
    entries = synthcells.split_entries(manifest, split)
    data_dir = manifest["_dir"]
    if jobs <= 1:
        results = [_eval_one(model, e, data_dir, n, oracle) for e in entries]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_eval_one, model, e, data_dir, n, oracle)
                for e in entries
            ]
            results = [f.result() for f in futures]

    image_preds = np.array([r["pred_total"] for r in results])
    image_gts = np.array([r["gt_total"] for r in results])
    patch_preds = np.concatenate([r["pred_patches"] for r in results])
    patch_gts = np.concatenate([r["gt_patches"] for r in results])
    game_means = {}
    fine_h, fine_w = results[0]["gt_fine"].shape
    for lvl in game_levels:
        if fine_h % (1 << lvl) or fine_w % (1 << lvl):
            continue  # maps too coarse for this grid level
        vals = [metrics.game(r["pred_fine"], r["gt_fine"], lvl) for r in results]
        game_means[lvl] = float(np.mean(vals))
    # rmae is undefined at zero ground truth; empty images are excluded here
    # rather than inside the strict metric
    pos = image_gts > 0
    report = metrics.EvalReport(
        mae=metrics.mae(image_preds, image_gts),
        mse=metrics.mse(image_preds, image_gts),
        rmae=metrics.rmae(image_preds[pos], image_gts[pos]) if pos.any() else float("nan"),
        game=game_means,
        bins=metrics.bin_curves(patch_preds, patch_gts, bin_width),
    )
    arrays = EvalArrays(image_preds, image_gts, patch_preds, patch_gts)
    return report, arrays


# --- checkpoint and loss-curve files ---------------------------------------------

_CKPT_FORMAT = "sdcount-checkpoint-v1"
_PARAM_ORDER = (
    "counter_w", "counter_b", "decider_w", "decider_b", "upsampler_w", "upsampler_b",
)


def save_checkpoint(path, model):
    """One JSON header line with dims/mode/partition, then fp64 parameters."""
    params = model.parameters()
    header = {
        "format": _CKPT_FORMAT,
        "mode": model.mode,
        "stages": model.stages,
        "c_max": model.c_max,
        "scheme": model.scheme,
        "gt_sigma": model.gt_sigma,
        "feature_dim": FEATURE_DIM,
        "shapes": {k: list(np.shape(params[k])) for k in _PARAM_ORDER},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for k in _PARAM_ORDER:
            f.write(np.asarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != _CKPT_FORMAT:
            raise ValueError(f"{path} is not a model checkpoint")
        blob = f.read()
    arrays = {}
    offset = 0
    for k in _PARAM_ORDER:
        shape = tuple(header["shapes"][k])
        size = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        arrays[k] = chunk.reshape(shape).astype(np.float64) if shape else float(chunk[0])
    partition = groundtruth.build_partition(header["c_max"], header["scheme"])
    return SdcModel(
        mode=header["mode"],
        stages=int(header["stages"]),
        c_max=float(header["c_max"]),
        scheme=header["scheme"],
        gt_sigma=float(header["gt_sigma"]),
        partition=partition,
        counter_w=arrays["counter_w"],
        counter_b=arrays["counter_b"],
        decider_w=arrays["decider_w"],
        decider_b=arrays["decider_b"],
        upsampler_w=arrays["upsampler_w"],
        upsampler_b=arrays["upsampler_b"],
    )


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "l_counter", "l_merge", "l_up",
                         "l_div", "l_eq", "total"])
        for s in curve:
            b = s.breakdown
            writer.writerow([
                s.epoch, repr(s.lr), repr(b.l_counter), repr(b.l_merge),
                repr(b.l_up), repr(b.l_div),
                "" if b.l_eq is None else repr(b.l_eq), repr(b.total),
            ])
