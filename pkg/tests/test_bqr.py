import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from qrlesion import bqr, simdata
from qrlesion.bqr import BqrConfig, MultiRaterSample
from qrlesion.metrics import dice
from qrlesion.nn import make_rng


def test_agreement_examples():
    masks = np.zeros((4, 2, 2), bool)
    masks[:, 0, 0] = True
    masks[:2, 0, 1] = True
    masks[0, 1, 0] = True
    a = bqr.agreement_map(masks)
    np.testing.assert_array_equal(a, [[1.0, 0.5], [0.25, 0.0]])
    sample = MultiRaterSample(np.zeros((2, 2)), masks)
    np.testing.assert_array_equal(bqr.agreement_map(sample), a)
    np.testing.assert_array_equal(bqr.agreement_map(masks[::-1]), a)


def test_multirater_sample_validation():
    with pytest.raises(ValueError):
        MultiRaterSample(np.zeros((2, 2)), np.full((1, 2, 2), 0.5))
    with pytest.raises(ValueError):
        MultiRaterSample(np.zeros((2, 2)), np.zeros((1, 3, 3)))


def test_rater_quantile_regions_sizes():
    # pixel k is marked by k of the four raters
    masks = np.zeros((4, 1, 5), bool)
    for k in range(5):
        masks[:k, 0, k] = True
    a = bqr.agreement_map(masks)
    sizes = [bqr.rater_quantile_regions(a, t).sum() for t in bqr.DEFAULT_LEVELS]
    assert sizes == [4, 3, 2, 1]
    with pytest.raises(ValueError):
        bqr.rater_quantile_regions(a, 1.0)


def test_zero_logits_give_full_regions():
    regions = bqr.regions_from_logits(np.zeros((4, 3, 3)))
    assert regions.all()


def test_level_validation():
    with pytest.raises(ValueError):
        bqr.seg_net((1, 8, 8), (0.5, 0.25))
    with pytest.raises(ValueError):
        bqr.seg_net((1, 8, 8), (0.0, 0.5))
    with pytest.raises(ValueError):
        bqr.seg_net((1, 10, 10))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 4, 5, 5), elements=st.floats(-3, 3)))
def test_nesting_invariant(f):
    regions = bqr.regions_from_logits(f)
    for k in range(3):
        assert np.all(regions[:, k + 1] <= regions[:, k])
    # enforcement only removes pixels
    assert np.all(regions <= (f >= 0))
    np.testing.assert_array_equal(regions[:, 0], f[:, 0] >= 0)


def test_positive_weight():
    assert bqr.positive_weight(np.array([1, 0, 0, 0])) == 3.0
    with pytest.raises(ValueError):
        bqr.positive_weight(np.zeros(4))


def test_flatten_raters():
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    r = np.zeros((2, 3, 2, 2), bool)
    r[1, 2, 0, 0] = True
    xf, yf = bqr.flatten_raters(x, r)
    assert xf.shape == (6, 1, 2, 2) and yf.shape == (6, 1, 2, 2)
    np.testing.assert_array_equal(xf[3], x[1])
    assert yf[5, 0, 0, 0] == 1.0 and yf.sum() == 1.0


def _rater_data(n, radii, seed, size=16):
    cfg = simdata.LesionImageConfig(n=n, size=size, lesion_p=1.0, lesion_radius=(3.0, 5.0),
                                    seed=seed)
    ds = simdata.synth_lesion_dataset(cfg)
    return ds, simdata.synth_multirater(ds.masks, simdata.RaterConfig(radii), make_rng(seed))


def test_training_smoke():
    ds, raters = _rater_data(8, (1, 0, -1), 0)
    spec, state = bqr.seg_net((1, 16, 16), seed=0)
    new, hist = bqr.train_bqr(ds.images, raters, spec, state,
                              BqrConfig(epochs=2, batch_size=8))
    assert [r["phase"] for r in hist.rows] == ["warmup", "bqr"]
    assert all(np.isfinite(r["loss"]) for r in hist.rows)
    assert not np.array_equal(new.params["tau_0.1250.00.weight"],
                              state.params["tau_0.1250.00.weight"])
    seg = bqr.predict_regions(spec, new, ds.images[0, 0])
    assert seg.regions.shape == (4, 16, 16) and seg.levels == bqr.DEFAULT_LEVELS


def test_heads_must_match_levels():
    ds, raters = _rater_data(2, (0,), 0)
    spec, state = bqr.seg_net((1, 16, 16), (0.25, 0.75))
    with pytest.raises(ValueError):
        bqr.train_bqr(ds.images, raters, spec, state, BqrConfig(epochs=1))


@pytest.mark.slow
def test_identical_raters_collapse_heads():
    ds, raters = _rater_data(100, (0, 0, 0, 0), 1)
    spec, state = bqr.seg_net((1, 16, 16), seed=0)
    state, _ = bqr.train_bqr(ds.images, raters, spec, state, BqrConfig(epochs=12, batch_size=16))
    test, _ = _rater_data(10, (0,), 2)
    regions = bqr.regions_from_logits(bqr.logits(spec, state, test.images))
    assert regions[:, 3].any()
    for k in range(1, 4):
        assert dice(regions[:, k], regions[:, 0]) >= 0.95


@pytest.mark.slow
def test_nested_raters_give_shrinking_heads():
    ds, raters = _rater_data(100, (2, 1, -1, -2), 1)
    spec, state = bqr.seg_net((1, 16, 16), seed=0)
    state, _ = bqr.train_bqr(ds.images, raters, spec, state, BqrConfig(epochs=12, batch_size=16))
    test, _ = _rater_data(10, (0,), 2)
    raw = bqr.logits(spec, state, test.images) >= 0
    areas = raw.sum(axis=(0, 2, 3))
    assert areas[-1] > 0 and np.all(np.diff(areas) < 0)


def test_collapse_detected_after_warmup():
    ds, raters = _rater_data(4, (0,), 0)
    spec, state = bqr.seg_net((1, 16, 16), seed=0)
    for name in spec.head_names():
        state.params[f"{name}.00.weight"][...] = 0.0
        state.params[f"{name}.00.bias"][...] = -1e3
    cfg = BqrConfig(epochs=2, lr=1e-12)
    with pytest.raises(bqr.CollapsedPrediction):
        bqr.train_bqr(ds.images, raters, spec, state, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        bqr.train_bqr(ds.images, raters, spec, state,
                      BqrConfig(epochs=2, lr=1e-12, on_collapse="warn"))
    assert any("warm-up" in str(w.message) for w in caught)


def test_level_dice_skips_empty_truth():
    agreement = np.zeros((4, 4))
    agreement[:2, :2] = 0.25
    pred = np.zeros((4, 4, 4), bool)
    pred[0, :2, :2] = True
    d = bqr.level_dice([pred], [agreement])
    assert [len(x) for x in d] == [1, 0, 0, 0]
    assert d[0][0] == 1.0
