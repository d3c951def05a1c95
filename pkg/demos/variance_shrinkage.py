"""
Variance shrinkage on a memorised image
=======================================

Sixteen copies of one small image.  A mean/variance VAE reconstructs it
almost perfectly and the Gaussian likelihood then rewards an ever smaller
variance.  The quantile VAE has no such incentive: its spread settles.
"""

import numpy as np

from qrlesion import simdata, vae

img = simdata.synth_lesion_dataset(simdata.LesionImageConfig(
    n=1, size=16, lesion_radius=(1, 2), seed=0)).images.reshape(1, -1)
data = np.repeat(img, 16, axis=0)

cfg = vae.TrainConfig(epochs=3000, batch_size=16, lr=1e-4, seed=0, track_sigma=True)


def build(mode):
    return vae.mlp_vae(256, 4, mode, hidden=(64, 64), out_activation="sigmoid", seed=0)


mv, h_mv = vae.train_vae(data, build(vae.MeanVar()), cfg)
qr, h_qr = vae.train_qrvae(data, build(vae.Quantiles(0.15, 0.5)), cfg)

print("epoch   median sigma (MeanVar)   median sigma (quantile)")
for e in range(0, 3000, 300):
    print(f"{e + 1:5d}   {h_mv.rows[e]['median_sigma']:.2e}                 "
          f"{h_qr.rows[e]['median_sigma']:.2e}")

s_mv, s_qr = vae.median_sigma(mv, data), vae.median_sigma(qr, data)
print(f"final ratio {s_mv / s_qr:.3f}")
