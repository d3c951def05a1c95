"""
Unsupervised lesion detection on synthetic images
=================================================

Train both VAEs on lesion-free images, then score images with planted
lesions: z-scores, a 7x7 median filter, two-sided p-values and a
Benjamini-Hochberg threshold.  A conformal margin from held-out normal
images is applied on top.  Masks are written as PGM files.

Takes a few minutes on a laptop CPU.
"""

import sys
from pathlib import Path

import numpy as np

from qrlesion import anomaly, conformal, fileio, simdata, vae
from qrlesion.metrics import dice, roc_auc

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "lesion_demo_out")
out_dir.mkdir(exist_ok=True)

base = dict(size=32, lesion_radius=(3.0, 6.0))
train = simdata.synth_lesion_dataset(simdata.LesionImageConfig(n=400, seed=1, **base)).images
calib = simdata.synth_lesion_dataset(simdata.LesionImageConfig(n=40, seed=2, **base)).images
test = simdata.synth_lesion_dataset(simdata.LesionImageConfig(n=60, seed=3, lesion_p=1.0,
                                                              **base))
print(f"lesion pixels in test set: {test.masks.mean():.1%}")

cfg = vae.TrainConfig(epochs=20, batch_size=32, lr=1e-3, kl_weight=0.1, seed=0)
models = {
    "qrvae": vae.train_qrvae(train, vae.conv_vae((1, 32, 32), 16, vae.Quantiles(), seed=0),
                             cfg)[0],
    "vae": vae.train_vae(train, vae.conv_vae((1, 32, 32), 16, vae.MeanVar(), seed=0), cfg)[0],
}


def maps_for(model, images):
    mu, sigma = vae.head_moments(model, vae.reconstruct(model, images))
    return [anomaly.GaussianMaps(mu[i, 0], sigma[i, 0]) for i in range(len(images))]


for name, model in models.items():
    # conformal margin for the central 95% interval, from normal images
    scores = np.concatenate([anomaly.calibration_scores(calib[i, 0], m, "gaussian", 0.05).ravel()
                             for i, m in enumerate(maps_for(model, calib))])
    cal = conformal.calibrate(scores, 0.05)
    for use_cal in (False, True):
        res = [anomaly.detect(test.images[i, 0], m, "gaussian", 0.05, use_conformal=use_cal,
                              cal=cal) for i, m in enumerate(maps_for(model, test.images))]
        masks = np.stack([r.mask for r in res])
        auc = roc_auc(np.stack([r.score_map for r in res]), test.masks)
        tag = f"{name}{'+conformal' if use_cal else ''}"
        print(f"{tag:18s} AUC {auc:.3f}  Dice {dice(masks, test.masks):.3f}  "
              f"margin {cal.margin:.4f}")
        for i in range(3):
            fileio.write_pgm(out_dir / f"{tag}_mask_{i}.pgm", masks[i])

for i in range(3):
    fileio.write_pgm(out_dir / f"image_{i}.pgm", test.images[i, 0])
    fileio.write_pgm(out_dir / f"truth_{i}.pgm", test.masks[i])
print(f"example masks in {out_dir}/")
