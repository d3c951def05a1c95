"""Multi-quantile lesion segmentation with smoothed binary quantile regression.

A small encoder-decoder with skip connections carries one logit head per
level.  The level-``tau`` head segments the region where the probability of
a positive label is at least ``tau``: that is where the (1 - tau)-quantile of
the binary label equals one, so the head is trained with the BQR objective
at quantile 1 - tau.  Regions therefore shrink as ``tau`` grows, and with
four raters the levels 0.125, 0.375, 0.625, 0.875 pair with "at least 1, 2,
3, 4 raters".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .metrics import dice
from .nn import (Activation, Concat, Conv2D, NetworkSpec, NetworkState, NonFiniteError,
                 Stash, Upsample2D, adam_step, backward, forward, init_params, make_rng)
from .vae import History, TrainingDivergence

DEFAULT_LEVELS = (0.125, 0.375, 0.625, 0.875)


class CollapsedPrediction(RuntimeError):
    """Every logit is negative on every training pixel after warm-up."""


@dataclass
class MultiRaterSample:
    image: np.ndarray  # (H, W)
    rater_masks: np.ndarray  # (R, H, W) bool

    def __post_init__(self):
        self.rater_masks = np.asarray(self.rater_masks)
        if self.rater_masks.ndim != 3 or self.rater_masks.shape[1:] != np.shape(self.image):
            raise ValueError("rater masks must be (R, H, W) matching the image")
        if not np.all((self.rater_masks == 0) | (self.rater_masks == 1)):
            raise ValueError("rater masks must be binary")
        self.rater_masks = self.rater_masks.astype(bool)


@dataclass
class QuantileSegmentation:
    levels: tuple
    regions: np.ndarray  # (L, H, W) bool, region(levels[n+1]) within region(levels[n])


def head_name(level: float) -> str:
    return f"tau_{level:.4f}"


def _check_levels(levels):
    levels = tuple(float(t) for t in levels)
    if not levels or any(not 0.0 < t < 1.0 for t in levels):
        raise ValueError("levels must lie in (0, 1)")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    return levels


def agreement_map(rater_masks) -> np.ndarray:
    """Fraction of raters marking each pixel; accepts (R, H, W) masks or a
    :class:`MultiRaterSample`."""
    if isinstance(rater_masks, MultiRaterSample):
        rater_masks = rater_masks.rater_masks
    m = np.asarray(rater_masks)
    if m.ndim < 2 or m.shape[0] < 1:
        raise ValueError("need at least one rater mask")
    return m.astype(np.float64).mean(axis=0)


def rater_quantile_regions(agreement, tau: float) -> np.ndarray:
    """Ground-truth region for level ``tau``: pixels with agreement >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return np.asarray(agreement) >= tau


def seg_net(image_shape, levels=DEFAULT_LEVELS, channels=(8, 16), seed: int = 0):
    """Encoder-decoder with two stride-2 downsampling blocks, two upsampling
    blocks with skip connections and one 1x1 logit head per level."""
    levels = _check_levels(levels)
    c_in, h, w = image_shape
    c1, c2 = channels
    if h % 4 or w % 4:
        raise ValueError("image size must be divisible by 4")
    trunk = [
        Conv2D(c_in, c1, 3, 1, 1), Activation("relu"), Stash("full"),
        Conv2D(c1, c2, 3, 2, 1), Activation("relu"), Stash("half"),
        Conv2D(c2, c2, 3, 2, 1), Activation("relu"),
        Upsample2D(2), Concat("half"), Conv2D(2 * c2, c2, 3, 1, 1), Activation("relu"),
        Upsample2D(2), Concat("full"), Conv2D(c2 + c1, c1, 3, 1, 1), Activation("relu"),
    ]
    heads = {head_name(t): [Conv2D(c1, 1, 1)] for t in levels}
    spec = NetworkSpec(tuple(image_shape), trunk, heads)
    return spec, init_params(spec, make_rng(seed))


@dataclass(frozen=True)
class BqrConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-3
    warmup_epochs: int = 1
    seed: int = 0
    on_collapse: str = "raise"  # or "warn"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.warmup_epochs < 0:
            raise ValueError("invalid BQR training configuration")
        if self.on_collapse not in ("raise", "warn"):
            raise ValueError("on_collapse must be 'raise' or 'warn'")


def flatten_raters(images, rater_masks):
    """One (image, mask) training pair per rater."""
    images = np.asarray(images, dtype=np.float64)
    rater_masks = np.asarray(rater_masks)
    n, r = rater_masks.shape[:2]
    x = np.repeat(images, r, axis=0)
    y = rater_masks.reshape((n * r, 1) + rater_masks.shape[2:]).astype(np.float64)
    return x, y


def positive_weight(labels) -> float:
    """Ratio of negative to positive labels (the warm-up class weight)."""
    pos = float(np.sum(labels))
    if pos == 0:
        raise ValueError("training labels contain no positives")
    return (np.size(labels) - pos) / pos


def logits(spec: NetworkSpec, state: NetworkState, images, levels=DEFAULT_LEVELS):
    """(n, L, H, W) head logits ordered by level."""
    out, _ = forward(spec, state, images)
    return np.concatenate([out[head_name(t)] for t in _check_levels(levels)], axis=1)


def train_bqr(images, rater_masks, spec: NetworkSpec, state: NetworkState,
              cfg: BqrConfig = BqrConfig(), levels=DEFAULT_LEVELS):
    """Train all level heads jointly; returns ``(state, history)``.

    The first ``cfg.warmup_epochs`` epochs minimise class-weighted binary
    cross-entropy on every head (positive weight = negatives / positives of
    the training labels).  Later epochs minimise the summed negated BQR
    objectives.
    """
    levels = _check_levels(levels)
    names = [head_name(t) for t in levels]
    if sorted(names) != spec.head_names():
        raise ValueError("network heads do not match the quantile levels")
    x, y = flatten_raters(images, rater_masks)
    w_pos = positive_weight(y)
    rng = make_rng(cfg.seed)
    state = state.copy()
    history = History()
    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= cfg.warmup_epochs
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            try:
                out, cache = forward(spec, state, xb)
            except NonFiniteError as exc:
                raise TrainingDivergence(epoch, str(exc)) from exc
            grads = {}
            for t, name in zip(levels, names):
                if warm:
                    lv = losses.weighted_bce(out[name], yb, w_pos)
                else:
                    lv = losses.bqr_objective(out[name], yb, 1.0 - t)
                total += lv.value
                grads[name] = lv.grad / len(idx)
            pgrads, _ = backward(spec, state, cache, grads)
            try:
                state = adam_step(state, pgrads, cfg.lr)
            except NonFiniteError as exc:
                raise TrainingDivergence(epoch, str(exc)) from exc
        history.rows.append({"epoch": epoch, "phase": "warmup" if warm else "bqr",
                             "loss": total / n})
        if epoch == cfg.warmup_epochs and cfg.warmup_epochs < cfg.epochs:
            _check_collapse(spec, state, x, levels, cfg, epoch)
    return state, history


def _check_collapse(spec, state, x, levels, cfg, epoch):
    peak = max(float(logits(spec, state, x[i:i + 64], levels).max())
               for i in range(0, len(x), 64))
    if peak < 0.0:
        msg = f"all logits negative on every training pixel after warm-up (epoch {epoch})"
        if cfg.on_collapse == "raise":
            raise CollapsedPrediction(msg)
        warnings.warn(msg)


def enforce_nesting(regions):
    """Intersect each level's region with all lower levels' regions."""
    regions = np.array(regions, dtype=bool)
    for n in range(1, regions.shape[-3]):
        regions[..., n, :, :] &= regions[..., n - 1, :, :]
    return regions


def regions_from_logits(logit_maps):
    """Threshold (..., L, H, W) logits at 0 (inclusive) and enforce nesting."""
    return enforce_nesting(np.asarray(logit_maps) >= 0.0)


def predict_regions(spec: NetworkSpec, state: NetworkState, image,
                    levels=DEFAULT_LEVELS) -> QuantileSegmentation:
    """Nested regions for one (C, H, W) or (H, W) image."""
    levels = _check_levels(levels)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    f = logits(spec, state, image[None], levels)[0]
    return QuantileSegmentation(levels, regions_from_logits(f))


def level_dice(pred_regions, agreements, levels=DEFAULT_LEVELS):
    """Per-level Dice against rater regions, skipping images whose rater
    region is empty at that level.  Returns a list (one array per level)."""
    out = [[] for _ in levels]
    for regions, agreement in zip(pred_regions, agreements):
        for n, t in enumerate(levels):
            truth = rater_quantile_regions(agreement, t)
            if truth.any():
                out[n].append(dice(regions[n], truth))
    return [np.array(d) for d in out]
