import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from qrlesion import bqr, fileio, nn, vae
from qrlesion.fileio import ConfigError, FormatError
from qrlesion.nn import make_rng


def _manual_container(records):
    # byte layout written out by hand
    out = b"QTN1" + struct.pack("<I", len(records))
    for name, arr in records:
        out += struct.pack("<H", len(name)) + name.encode() + bytes([arr.ndim])
        out += b"".join(struct.pack("<Q", d) for d in arr.shape)
        out += b"".join(struct.pack("<d", v) for v in arr.ravel())
    return out


def test_container_layout_matches_hand_encoding():
    recs = [("a", np.arange(6.0).reshape(2, 3)), ("bc", np.array(2.5)), ("e", np.zeros((0, 4)))]
    assert fileio.encode_container(recs) == _manual_container(recs)


def test_empty_container():
    data = fileio.encode_container({})
    assert data == b"QTN1\x00\x00\x00\x00"
    assert fileio.decode_container(data) == {}


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text("abcxyz._0123456789", min_size=1, max_size=12),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=4, min_side=0,
                                                       max_side=4),
                              elements=st.floats(allow_nan=False)),
                       max_size=5))
def test_container_round_trip(records):
    back = fileio.decode_container(fileio.encode_container(records))
    assert list(back) == list(records)
    for k in records:
        assert back[k].shape == records[k].shape
        assert back[k].tobytes() == records[k].tobytes()


def test_container_fails_closed(tmp_path):
    good = fileio.encode_container({"x": np.ones(3)})
    for bad in (b"QTN2" + good[4:], good[:-1], good + b"\x00", b""):
        with pytest.raises(FormatError):
            fileio.decode_container(bad)
    dup = _manual_container([("x", np.ones(1)), ("x", np.ones(1))])
    with pytest.raises(FormatError):
        fileio.decode_container(dup)
    with pytest.raises(FormatError):
        fileio.encode_container([("x", np.ones(1)), ("x", np.ones(1))])
    p = tmp_path / "c.qtn"
    fileio.write_container(p, {"x": np.ones(3)})
    np.testing.assert_array_equal(fileio.read_container(p)["x"], np.ones(3))


def test_pgm_round_trip(tmp_path):
    mask = np.zeros((5, 7), bool)
    mask[1:3, 2:6] = True
    fileio.write_pgm(tmp_path / "m.pgm", mask)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(fileio.read_pgm(tmp_path / "m.pgm") == 255, mask)
    img = make_rng(0).uniform(-2, 3, (6, 4))
    lo, hi = fileio.write_pgm(tmp_path / "s.pgm", img)
    px = fileio.read_pgm(tmp_path / "s.pgm")
    assert (lo, hi) == (img.min(), img.max())
    np.testing.assert_allclose(lo + px / 255 * (hi - lo), img, atol=(hi - lo) / 510 + 1e-12)


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        fileio.read_pgm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(FormatError):
        fileio.read_pgm(tmp_path / "b.pgm")


SCHEMA = {"n": (int, 3), "lr": (float, 0.1), "name": (str, ""), "flag": (bool, False),
          "levels": (tuple, (0.5,))}


def test_parse_config():
    cfg = fileio.parse_config("# comment\nn = 5\nlevels = 0.1, 0.2  # trailing\nflag=true\n",
                              SCHEMA)
    assert cfg == {"n": 5, "lr": 0.1, "name": "", "flag": True, "levels": (0.1, 0.2)}
    assert fileio.parse_config(fileio.format_config(cfg), SCHEMA) == cfg


@pytest.mark.parametrize("text", ["bogus = 1", "n = 1\nn = 2", "n = x", "flag = maybe",
                                  "just words"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        fileio.parse_config(text, SCHEMA)


def test_network_save_load_bitwise(tmp_path):
    spec, state = bqr.seg_net((1, 8, 8), (0.25, 0.75), channels=(2, 3), seed=1)
    x = make_rng(0).standard_normal((2, 1, 8, 8))
    grads, _ = nn.backward(spec, state, nn.forward(spec, state, x)[1],
                           {k: np.ones((2, 1, 8, 8)) for k in spec.head_names()})
    state = nn.adam_step(state, grads, 1e-3)
    fileio.save_network(tmp_path / "m", spec, state, {"levels": [0.25, 0.75]})
    spec2, state2, meta = fileio.load_network(tmp_path / "m")
    assert meta["levels"] == [0.25, 0.75]
    a, _ = nn.forward(spec, state, x)
    b, _ = nn.forward(spec2, state2, x)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert state2.step == state.step
    for k in state.m:
        assert state2.m[k].tobytes() == state.m[k].tobytes()


@pytest.mark.parametrize("head", [vae.MeanVar(), vae.Quantiles(0.025, 0.5)])
def test_vae_save_load_bitwise(tmp_path, head):
    m = vae.conv_vae((1, 8, 8), 3, head, channels=(2, 4), seed=2)
    fileio.save_vae(tmp_path / "v", m)
    m2 = fileio.load_vae(tmp_path / "v")
    assert m2.head_mode == m.head_mode and m2.latent_dim == 3
    x = make_rng(1).uniform(size=(3, 1, 8, 8))
    a, b = vae.reconstruct(m, x), vae.reconstruct(m2, x)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_load_rejects_wrong_kind(tmp_path):
    spec, state = bqr.seg_net((1, 8, 8), (0.5,), channels=(2, 2))
    fileio.save_network(tmp_path / "m", spec, state)
    with pytest.raises(FormatError):
        fileio.load_vae(tmp_path / "m")
