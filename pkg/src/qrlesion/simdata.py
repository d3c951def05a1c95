"""Synthetic data: the two-moon 4-D simulation, lesion images, multi-rater
masks, and a k-nearest-neighbour KL divergence estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .nn import make_rng


@dataclass(frozen=True)
class TwoMoonConfig:
    n: int = 500
    noise_std: float = 0.05
    seed: int = 0


def moon_point(t, moon: int):
    """Noise-free point on moon 0 ``(cos t, sin t)`` or moon 1
    ``(1 - cos t, 0.5 - sin t)``."""
    t = np.asarray(t, dtype=np.float64)
    if moon == 0:
        return np.stack([np.cos(t), np.sin(t)], axis=-1)
    if moon == 1:
        return np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=-1)
    raise ValueError("moon must be 0 or 1")


def two_moon_latent(cfg: TwoMoonConfig) -> np.ndarray:
    """``cfg.n`` latent points, the first ceil(n/2) on moon 0, the rest on
    moon 1, with t ~ U[0, pi] and isotropic Gaussian jitter."""
    if cfg.n < 0:
        raise ValueError("n must be nonnegative")
    rng = make_rng(cfg.seed)
    n_a = cfg.n - cfg.n // 2
    t = rng.uniform(0.0, np.pi, size=cfg.n)
    z = np.concatenate([moon_point(t[:n_a], 0), moon_point(t[n_a:], 1)])
    z = z.reshape(cfg.n, 2)
    return z + cfg.noise_std * rng.standard_normal(z.shape)


def noise_scales(z1):
    """Per-coordinate noise standard deviations of the 4-D map at z1."""
    z1 = np.asarray(z1, dtype=np.float64)
    a = np.abs(z1)
    return np.stack([
        np.sqrt(0.03 + 0.05 * (3.0 + np.maximum(z1, -3.6))),
        np.sqrt(0.03 + 0.03 * a),
        np.sqrt(0.03 + 0.05 * a),
        np.sqrt(0.03 + 0.03 / (0.02 + a)),
    ], axis=-1)


def simulate_4d(latents, rng: np.random.Generator, shared_eps: bool = False,
                noise: bool = True) -> np.ndarray:
    """Map (z1, z2) latents to four heteroscedastic observed coordinates.

    v1 = z1 - z2,  v2 = z1^2 - z2/2,  v3 = z1 z2 - z1,  v4 = z1 + z2, each plus
    eps * noise_scales(z1).  eps is drawn per coordinate unless ``shared_eps``.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ValueError("latents must be n x 2")
    z1, z2 = z[:, 0], z[:, 1]
    mean = np.stack([z1 - z2, z1 ** 2 - 0.5 * z2, z1 * z2 - z1, z1 + z2], axis=-1)
    if not noise:
        return mean
    if shared_eps:
        eps = np.repeat(rng.standard_normal((len(z), 1)), 4, axis=1)
    else:
        eps = rng.standard_normal((len(z), 4))
    return mean + eps * noise_scales(z1)


def simulation_dataset(n: int = 500, seed: int = 0, noise_std: float = 0.05,
                       shared_eps: bool = False) -> np.ndarray:
    """Two-moon latents pushed through :func:`simulate_4d`, fully seeded."""
    z = two_moon_latent(TwoMoonConfig(n, noise_std, seed))
    rng = make_rng(np.random.SeedSequence([seed, 4]).generate_state(1)[0])
    return simulate_4d(z, rng, shared_eps=shared_eps)


# ---------------------------------------------------------------------------
# k-NN KL divergence

_TIE_EPS = 1e-12


def _kth_distances(a, b, k, exclude_ties):
    tree = cKDTree(b)
    ties = np.zeros(len(a), dtype=np.intp)
    if exclude_ties:
        ties = np.asarray(tree.query_ball_point(a, _TIE_EPS, return_length=True))
    kk = k + int(ties.max())
    if kk > len(b):
        raise ValueError("fewer than k distinct neighbours after tie exclusion")
    d, _ = tree.query(a, k=kk)
    d = d.reshape(len(a), kk)
    return d[np.arange(len(a)), ties + k - 1]


def knn_kl(samples_p, samples_q, k: int = 5) -> float:
    """Nearest-neighbour estimate of KL(P || Q).

    D = (d/n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1)), with rho_k the
    distance from p_i to its k-th neighbour among the other P points and nu_k
    the distance to its k-th neighbour in Q.  Zero-distance pairs
    (duplicates, including p_i itself) are excluded from both searches.
    """
    p = np.asarray(samples_p, dtype=np.float64)
    q = np.asarray(samples_q, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if q.ndim == 1:
        q = q[:, None]
    n, d = p.shape
    m = q.shape[0]
    if q.shape[1] != d:
        raise ValueError("samples must share a dimension")
    if n <= k or m <= k:
        raise ValueError(f"need more than k={k} samples in each set")
    rho = _kth_distances(p, p, k, exclude_ties=True)
    nu = _kth_distances(p, q, k, exclude_ties=True)
    return float(d / n * np.sum(np.log(nu / rho)) + np.log(m / (n - 1.0)))


# ---------------------------------------------------------------------------
# lesion images


@dataclass(frozen=True)
class LesionImageConfig:
    n: int = 64
    size: int = 32
    n_bumps: int = 5
    bump_width: tuple = (4.0, 8.0)
    jitter: float = 2.0
    noise_std: float = 0.03
    lesion_p: float = 0.0
    lesion_contrast: tuple = (0.35, 0.55)
    lesion_radius: tuple = (2.5, 5.0)
    template_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi or 2 * hi + 2 > self.size:
            raise ValueError("lesion radius range does not fit the image")
        if not 0.0 <= self.lesion_p <= 1.0:
            raise ValueError("lesion_p must be a probability")


@dataclass
class LesionDataset:
    images: np.ndarray  # (n, 1, H, W) in [0, 1]
    masks: np.ndarray  # (n, H, W) bool


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image generator derived from (seed, index)."""
    return make_rng(np.random.SeedSequence([seed, index]).generate_state(2)[0])


def _template(cfg: LesionImageConfig):
    rng = make_rng(cfg.template_seed)
    margin = cfg.size * 0.2
    centers = rng.uniform(margin, cfg.size - margin, size=(cfg.n_bumps, 2))
    widths = rng.uniform(*cfg.bump_width, size=cfg.n_bumps)
    amps = rng.uniform(0.4, 1.0, size=cfg.n_bumps)
    return centers, widths, amps


def ellipse_mask(size, center, radii, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radii[0]
    v = (-s * dx + c * dy) / radii[1]
    return u * u + v * v <= 1.0


def _one_image(cfg, template, rng):
    centers, widths, amps = template
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = np.zeros((size, size))
    for (cy, cx), w, a in zip(centers, widths, amps):
        cy += cfg.jitter * rng.standard_normal()
        cx += cfg.jitter * rng.standard_normal()
        w *= np.exp(0.15 * rng.standard_normal())
        a *= np.exp(0.2 * rng.standard_normal())
        bg += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * w * w))
    # normalise to [0.1, 0.6] so lesions and noise stay inside [0, 1]
    bg = 0.1 + 0.5 * (bg - bg.min()) / max(bg.max() - bg.min(), 1e-12)
    mask = np.zeros((size, size), dtype=bool)
    if rng.uniform() < cfg.lesion_p:
        r_hi = cfg.lesion_radius[1]
        center = rng.uniform(r_hi + 1, size - r_hi - 1, size=2)
        radii = rng.uniform(*cfg.lesion_radius, size=2)
        mask = ellipse_mask(size, center, radii, rng.uniform(0, np.pi))
        bg = np.where(mask, bg + rng.uniform(*cfg.lesion_contrast), bg)
    img = bg + cfg.noise_std * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0), mask


def synth_lesion_dataset(cfg: LesionImageConfig) -> LesionDataset:
    """Smooth-bump backgrounds sharing one jittered template, optional
    hyper-intense elliptical lesions, additive pixel noise."""
    template = _template(cfg)
    images = np.empty((cfg.n, 1, cfg.size, cfg.size))
    masks = np.zeros((cfg.n, cfg.size, cfg.size), dtype=bool)
    for i in range(cfg.n):
        images[i, 0], masks[i] = _one_image(cfg, template, image_rng(cfg.seed, i))
    return LesionDataset(images, masks)


# ---------------------------------------------------------------------------
# multiple raters


@dataclass(frozen=True)
class RaterConfig:
    radii: tuple = (2, 1, -1, -2)
    flip_p: float = 0.0


def disk(radius: int):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def _morph(mask, radius):
    if radius > 0:
        return ndimage.binary_dilation(mask, structure=disk(radius))
    if radius < 0:
        return ndimage.binary_erosion(mask, structure=disk(-radius), border_value=0)
    return mask.copy()


def synth_multirater(masks, rater_cfg: RaterConfig, rng: np.random.Generator) -> np.ndarray:
    """(n, R, H, W) rater masks: truth dilated/eroded by each rater's signed
    radius, then boundary pixels flipped with probability ``flip_p``."""
    masks = np.asarray(masks, dtype=bool)
    if len(rater_cfg.radii) < 1:
        raise ValueError("need at least one rater")
    n = masks.shape[0]
    out = np.empty((n, len(rater_cfg.radii)) + masks.shape[1:], dtype=bool)
    for i in range(n):
        for r, radius in enumerate(rater_cfg.radii):
            m = _morph(masks[i], radius)
            if rater_cfg.flip_p > 0:
                edge = ndimage.binary_dilation(m) & ~ndimage.binary_erosion(m)
                flips = edge & (rng.uniform(size=m.shape) < rater_cfg.flip_p)
                m = m ^ flips
            out[i, r] = m
    return out
