"""Mean/variance VAE and quantile-regression VAE.

Both share the encoder and the training loop; they differ in the decoder's
two output heads and the reconstruction loss:

* ``MeanVar``: heads ``mu`` and ``logvar``, Gaussian negative log-likelihood;
* ``Quantiles(alpha_lo, alpha_hi)``: heads ``L`` and ``H``, one pinball loss
  per head, no interaction between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .anomaly import quantile_pair_to_moments
from .nn import (Activation, Conv2D, Dense, Flatten, NetworkSpec, NetworkState,
                 NonFiniteError, Reshape, Upsample2D, adam_step, backward, forward,
                 init_params, make_rng)

LOGVAR_CLAMP = (-20.0, 5.0)
LATENT_LOGVAR_CLAMP = (-20.0, 10.0)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch, msg="non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass(frozen=True)
class MeanVar:
    heads = ("mu", "logvar")


@dataclass(frozen=True)
class Quantiles:
    alpha_lo: float = 0.15
    alpha_hi: float = 0.5
    heads = ("L", "H")

    def __post_init__(self):
        if not 0.0 < self.alpha_lo < self.alpha_hi < 1.0:
            raise ValueError("Quantiles needs 0 < alpha_lo < alpha_hi < 1")


@dataclass
class VaeModel:
    encoder: NetworkSpec
    encoder_state: NetworkState
    decoder: NetworkSpec
    decoder_state: NetworkState
    latent_dim: int
    head_mode: MeanVar | Quantiles

    def __post_init__(self):
        enc = self.encoder.output_shapes()
        if set(enc) != {"mu", "logvar"} or any(s != (self.latent_dim,) for s in enc.values()):
            raise ValueError("encoder must emit mu and logvar of size latent_dim")
        if self.decoder.input_shape != (self.latent_dim,):
            raise ValueError("decoder input must be the latent vector")
        dec = self.decoder.output_shapes()
        if set(dec) != set(self.head_mode.heads):
            raise ValueError(f"decoder heads {sorted(dec)} do not match {self.head_mode}")
        if any(s != self.encoder.input_shape for s in dec.values()):
            raise ValueError("decoder heads must match the data space")

    @property
    def data_shape(self):
        return self.encoder.input_shape


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    kl_weight: float = 1.0
    seed: int = 0
    track_sigma: bool = False

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or self.lr <= 0 or self.kl_weight <= 0:
            raise ValueError("epochs, batch_size, lr and kl_weight must be positive")


# ---------------------------------------------------------------------------
# architectures


def _head_activation(mode, name, out_activation):
    if isinstance(mode, MeanVar) and name == "logvar":
        return "identity"
    return out_activation


def mlp_vae(data_dim: int, latent_dim: int, head_mode, hidden=(64, 64),
            out_activation: str = "identity", seed: int = 0) -> VaeModel:
    """Fully connected VAE for vector data."""
    trunk, n = [], data_dim
    for h in hidden:
        trunk += [Dense(n, h), Activation("relu")]
        n = h
    encoder = NetworkSpec((data_dim,), trunk,
                          {"mu": [Dense(n, latent_dim)], "logvar": [Dense(n, latent_dim)]})
    trunk, n = [], latent_dim
    for h in reversed(hidden):
        trunk += [Dense(n, h), Activation("relu")]
        n = h
    heads = {name: [Dense(n, data_dim), Activation(_head_activation(head_mode, name, out_activation))]
             for name in head_mode.heads}
    decoder = NetworkSpec((latent_dim,), trunk, heads)
    rng = make_rng(seed)
    return VaeModel(encoder, init_params(encoder, rng), decoder, init_params(decoder, rng),
                    latent_dim, head_mode)


def conv_vae(image_shape, latent_dim: int, head_mode, channels=(16, 32),
             out_activation: str = "sigmoid", seed: int = 0) -> VaeModel:
    """Convolutional VAE: one stride-2 conv block per entry of ``channels``
    and a dense bottleneck; the decoder mirrors it with nearest upsampling
    and ends in two 3x3 conv heads."""
    c_in, h, w = image_shape
    scale = 2 ** len(channels)
    if h % scale or w % scale:
        raise ValueError(f"image size must be divisible by {scale}")
    trunk, c = [], c_in
    for ch in channels:
        trunk += [Conv2D(c, ch, 3, 2, 1), Activation("relu")]
        c = ch
    hb, wb = h // scale, w // scale
    flat = c * hb * wb
    trunk.append(Flatten())
    encoder = NetworkSpec(tuple(image_shape), trunk,
                          {"mu": [Dense(flat, latent_dim)], "logvar": [Dense(flat, latent_dim)]})
    trunk = [Dense(latent_dim, flat), Activation("relu"), Reshape((c, hb, wb))]
    for ch in list(reversed(channels))[1:] + [channels[0]]:
        trunk += [Upsample2D(2), Conv2D(c, ch, 3, 1, 1), Activation("relu")]
        c = ch
    heads = {name: [Conv2D(c, c_in, 3, 1, 1),
                    Activation(_head_activation(head_mode, name, out_activation))]
             for name in head_mode.heads}
    decoder = NetworkSpec((latent_dim,), trunk, heads)
    rng = make_rng(seed)
    return VaeModel(encoder, init_params(encoder, rng), decoder, init_params(decoder, rng),
                    latent_dim, head_mode)


# ---------------------------------------------------------------------------
# inference


def _check_data(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.data_shape:
        raise ValueError(f"data shape {x.shape[1:]} != {model.data_shape}")
    return x


def encode(model: VaeModel, x):
    """Posterior mean and log-variance for a batch."""
    out, _ = forward(model.encoder, model.encoder_state, _check_data(model, x))
    return out["mu"], np.clip(out["logvar"], *LATENT_LOGVAR_CLAMP)


def reparameterize(mu, logvar, rng: np.random.Generator):
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must share a shape")
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def decode(model: VaeModel, z):
    """Decoder heads for a batch of latents (``logvar`` clamped)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ValueError(f"latents must be (n, {model.latent_dim})")
    out, _ = forward(model.decoder, model.decoder_state, z)
    if isinstance(model.head_mode, MeanVar):
        out["logvar"] = np.clip(out["logvar"], *LOGVAR_CLAMP)
    return out


def head_moments(model: VaeModel, heads):
    """Pixelwise (mu, sigma) from decoder heads of either mode."""
    if isinstance(model.head_mode, MeanVar):
        return heads["mu"], np.exp(0.5 * heads["logvar"])
    m = model.head_mode
    mom = quantile_pair_to_moments(heads["L"], heads["H"], m.alpha_lo, m.alpha_hi)
    return mom.mu, mom.sigma


def reconstruct(model: VaeModel, x):
    """Deterministic reconstruction: decode the posterior mean."""
    mu, _ = encode(model, x)
    return decode(model, mu)


def sample_generative(model: VaeModel, n: int, rng: np.random.Generator):
    """Ancestral samples: z ~ N(0, I), decode, then x ~ N(mu, sigma^2).

    Consumes exactly ``n * latent_dim`` then ``n * data_dim`` standard normal
    draws from ``rng``.
    """
    if n == 0:
        return np.empty((0,) + model.data_shape)
    z = rng.standard_normal((n, model.latent_dim))
    mu, sigma = head_moments(model, decode(model, z))
    if not np.all(np.isfinite(sigma)):
        raise NonFiniteError("non-finite decoder sigma")
    return mu + sigma * rng.standard_normal(mu.shape)


# ---------------------------------------------------------------------------
# training


def reconstruction_loss(model: VaeModel, heads, x):
    """Reconstruction term and its gradient w.r.t. the raw decoder heads."""
    mode = model.head_mode
    if isinstance(mode, MeanVar):
        lo, hi = LOGVAR_CLAMP
        raw = heads["logvar"]
        lv = losses.gaussian_nll(x, heads["mu"], np.clip(raw, lo, hi))
        inside = (raw > lo) & (raw < hi)
        return losses.LossValue(lv.value, {"mu": lv.grad["mu"],
                                           "logvar": lv.grad["logvar"] * inside})
    return losses.joint_quantile_loss(heads, x, mode.alpha_lo, mode.alpha_hi)


def elbo_step(model: VaeModel, x, rng: np.random.Generator, kl_weight: float = 1.0):
    """Loss terms and parameter gradients for one minibatch (1-sample ELBO).

    Returns ``(terms, enc_grads, dec_grads)``; gradients are divided by the
    batch size, ``terms`` holds summed values.
    """
    b = x.shape[0]
    enc_out, enc_cache = forward(model.encoder, model.encoder_state, x)
    mu = enc_out["mu"]
    lo, hi = LATENT_LOGVAR_CLAMP
    lv_raw = enc_out["logvar"]
    lv = np.clip(lv_raw, lo, hi)
    std = np.exp(0.5 * lv)
    eps = rng.standard_normal(mu.shape)
    z = mu + std * eps
    dec_out, dec_cache = forward(model.decoder, model.decoder_state, z)
    rec = reconstruction_loss(model, dec_out, x)
    kl = losses.kl_diag_gaussian(mu, lv)
    dec_grads, g_z = backward(model.decoder, model.decoder_state, dec_cache,
                              {k: g / b for k, g in rec.grad.items()})
    g_mu = g_z + kl_weight * kl.grad["mu"] / b
    g_lv = (g_z * eps * 0.5 * std + kl_weight * kl.grad["logvar"] / b)
    g_lv = g_lv * ((lv_raw > lo) & (lv_raw < hi))
    enc_grads, _ = backward(model.encoder, model.encoder_state, enc_cache,
                            {"mu": g_mu, "logvar": g_lv})
    terms = {"rec": rec.value, "kl": kl.value, "loss": rec.value + kl_weight * kl.value}
    return terms, enc_grads, dec_grads


def median_sigma(model: VaeModel, x) -> float:
    _, sigma = head_moments(model, reconstruct(model, x))
    return float(np.median(sigma))


@dataclass
class History:
    rows: list = field(default_factory=list)

    def column(self, key):
        return np.array([r[key] for r in self.rows])

    def __len__(self):
        return len(self.rows)


def _train(data, model: VaeModel, cfg: TrainConfig):
    data = _check_data(model, data)
    n = data.shape[0]
    if n == 0:
        raise ValueError("no training data")
    rng = make_rng(cfg.seed)
    enc_state = model.encoder_state.copy()
    dec_state = model.decoder_state.copy()
    model = VaeModel(model.encoder, enc_state, model.decoder, dec_state,
                     model.latent_dim, model.head_mode)
    history = History()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = {"loss": 0.0, "rec": 0.0, "kl": 0.0}
        for s in range(0, n, cfg.batch_size):
            xb = data[order[s:s + cfg.batch_size]]
            try:
                terms, g_enc, g_dec = elbo_step(model, xb, rng, cfg.kl_weight)
                if not math.isfinite(terms["loss"]):
                    raise TrainingDivergence(epoch)
                model.encoder_state = adam_step(model.encoder_state, g_enc, cfg.lr)
                model.decoder_state = adam_step(model.decoder_state, g_dec, cfg.lr)
            except NonFiniteError as exc:
                raise TrainingDivergence(epoch, str(exc)) from exc
            for k in sums:
                sums[k] += terms[k]
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        if cfg.track_sigma:
            row["median_sigma"] = median_sigma(model, data)
        history.rows.append(row)
    return model, history


def train_vae(data, model: VaeModel, cfg: TrainConfig):
    """Fit a mean/variance VAE; returns ``(trained_model, history)``.

    The input model is left untouched.
    """
    if not isinstance(model.head_mode, MeanVar):
        raise ValueError("train_vae needs a MeanVar model")
    return _train(data, model, cfg)


def train_qrvae(data, model: VaeModel, cfg: TrainConfig):
    """Fit a quantile-regression VAE (both quantile heads jointly)."""
    if not isinstance(model.head_mode, Quantiles):
        raise ValueError("train_qrvae needs a Quantiles model")
    return _train(data, model, cfg)


def crossing_rate(model: VaeModel, x) -> float:
    """Fraction of outputs where the lower quantile head exceeds the upper."""
    heads = reconstruct(model, x)
    return float(np.mean(heads["L"] > heads["H"]))
