"""
Nested segmentations from several raters
========================================

Four simulated raters outline each lesion a little generously or a little
tightly.  One network with four logit heads learns the regions marked by at
least one, two, three and all four raters.
"""

import numpy as np

from qrlesion import bqr, simdata
from qrlesion.nn import make_rng

base = dict(size=32, lesion_p=1.0, lesion_radius=(4.0, 7.0))
raters = simdata.RaterConfig((2, 1, -1, -2))  # dilate / erode by these radii
train = simdata.synth_lesion_dataset(simdata.LesionImageConfig(n=200, seed=5, **base))
test = simdata.synth_lesion_dataset(simdata.LesionImageConfig(n=50, seed=6, **base))
r_train = simdata.synth_multirater(train.masks, raters, make_rng(0))
r_test = simdata.synth_multirater(test.masks, raters, make_rng(1))

spec, state = bqr.seg_net((1, 32, 32), bqr.DEFAULT_LEVELS, seed=0)
state, hist = bqr.train_bqr(train.images, r_train, spec, state, bqr.BqrConfig(epochs=10))
for row in hist.rows:
    print(f"epoch {row['epoch']:2d}  {row['phase']:6s}  loss {row['loss']:.3f}")

regions = np.stack([bqr.predict_regions(spec, state, im).regions for im in test.images])
agreements = [bqr.agreement_map(r) for r in r_test]

print("\nlevel  area(pred)  area(raters)  Dice mean (std)")
for k, (tau, d) in enumerate(zip(bqr.DEFAULT_LEVELS, bqr.level_dice(regions, agreements))):
    truth = sum(int(bqr.rater_quantile_regions(a, tau).sum()) for a in agreements)
    print(f"{tau:.3f}  {int(regions[:, k].sum()):10d}  {truth:12d}  {d.mean():.3f} ({d.std():.3f})")

# one image, as text: the digit is how many heads claim the pixel
counts = regions[0].sum(axis=0)
rows = np.nonzero(counts.any(axis=1))[0]
cols = np.nonzero(counts.any(axis=0))[0]
for r in range(rows.min(), rows.max() + 1):
    print("".join(str(c) if c else "." for c in counts[r, cols.min():cols.max() + 1]))
