import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from omicsmapnet import expr as E
from omicsmapnet import hierarchy as H
from omicsmapnet import render as R
from omicsmapnet import treemap as T
from omicsmapnet.errors import FormatError, MissingValue, NotDivisible, OutOfRange


def _layout(weights_text, side):
    return T.build_layout(H.parse_htext(weights_text, loose_ids=True), side=float(side))


def test_intensity_linear_map():
    lay = _layout("A a\nB b\nC c\nD K1\nD K2\nD K3\n", 3)
    u = R.sample_intensities(lay, {"K1": 2.0, "K2": 4.0, "K3": 6.0})
    order = [e.kegg_id for e in lay.entries]
    assert dict(zip(order, u)) == {"K1": 0.0, "K2": 0.5, "K3": 1.0}


def test_constant_sample_is_half():
    lay = _layout("A a\nB b\nC c\nD K1\nD K2\n", 2)
    assert R.sample_intensities(lay, {"K1": 3.0, "K2": 3.0}).tolist() == [0.5, 0.5]


def test_missing_value():
    lay = _layout("A a\nB b\nC c\nD K1\nD K2\n", 2)
    with pytest.raises(MissingValue):
        R.sample_intensities(lay, {"K1": 3.0})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-5000, 5000), min_size=2, max_size=40, unique=True))
def test_argmax_preserved(v):
    # values on a 0.01 grid; gaps near 1e-90 vanish in any float rescaling
    v = [x / 100 for x in v]
    u = R.scale_unit(np.array(v))
    assert np.argmax(u) == np.argmax(v) and u.min() == 0 and u.max() == 1


@pytest.mark.parametrize("u,rgb", [(0.0, (0, 0, 255)), (1.0, (255, 0, 0)), (0.5, (255, 255, 0))])
def test_colormap_anchors(u, rgb):
    assert R.apply_colormap(u) == rgb


def test_colormap_ramps_are_monotone_and_range_checked():
    p = R.PALETTE.astype(int)
    assert np.all(np.diff(p[:128, 0]) >= 0) and np.all(np.diff(p[:128, 2]) <= 0)
    assert np.all(np.diff(p[128:, 1]) <= 0)
    for bad in (-0.01, 1.01, float("nan")):
        with pytest.raises(OutOfRange):
            R.apply_colormap(bad)


def test_full_square_leaf():
    lay = _layout("A a\nB b\nC c\nD K1\n", 8)
    img = R.rasterize(lay, [1.0])
    assert img.data.shape == (8, 8, 1) and np.all(img.data == 1.0)


def test_two_half_leaves_side_four():
    lay = _layout("A a\nB b\nC c\nD K1\nD K2\n", 4)
    img = R.rasterize(lay, [0.0, 1.0]).data[..., 0]
    assert np.all(img[:, :2] == 0) and np.all(img[:, 2:] == 1)


def _brute_force(layout, u, side):
    out = np.zeros((side, side))
    for r in range(side):
        for c in range(side):
            x, y = c + 0.5, r + 0.5
            hits = [i for i, e in enumerate(layout.entries) if e.rect.contains(x, y)]
            assert len(hits) <= 1
            if hits:
                out[r, c] = u[hits[0]]
    return out


def test_raster_matches_point_in_rect_scan():
    tree = E.synthetic_tree(6, 5, seed=4)
    lay = T.build_layout(tree, side=48.0)
    u = np.random.default_rng(0).random(len(lay.entries))
    img = R.rasterize(lay, u).data[..., 0]
    assert np.array_equal(img, _brute_force(lay, u, 48))


def test_rgb_mode_uses_palette():
    lay = _layout("A a\nB b\nC c\nD K1\nD K2\n", 4)
    img = R.rasterize(lay, [0.0, 1.0], channels=3).data
    assert np.allclose(img[0, 0], [0, 0, 1]) and np.allclose(img[0, 3], [1, 0, 0])


def test_geometry_identical_across_samples_and_monotone():
    tree = E.synthetic_tree(6, 5, seed=4)
    lay = T.build_layout(tree, side=32.0)
    idx = R.leaf_index_map(lay, 32)
    rng = np.random.default_rng(2)
    v = rng.normal(size=len(lay.entries))
    a = R.paint(idx, R.scale_unit(v))
    v2 = v.copy()
    v2[3] += 0.7
    b = R.paint(idx, R.scale_unit(v2))
    assert np.array_equal(R.leaf_index_map(lay, 32), idx)
    # only the pixels of the changed leaf and the rescaled range may move
    assert np.array_equal(a[idx < 0], b[idx < 0])
    mine = idx == 3
    assert np.all(b[mine, 0] >= a[mine, 0])


def test_borders_mark_category_edges():
    tree = E.synthetic_tree(6, 5, seed=4)
    lay = T.build_layout(tree, side=64.0)
    idx = R.leaf_index_map(lay, 64, borders=True)
    assert (idx == R.BORDER).any()
    img = R.paint(idx, np.ones(len(lay.entries)))
    assert np.all(img[idx == R.BORDER] == 0)


def test_downsample_examples():
    block = np.array([[0.0, 0.0], [1.0, 1.0]])[..., None]
    assert R.downsample_mean(block, 2)[0, 0, 0] == 0.5
    x = np.random.default_rng(0).random((6, 6, 2))
    assert np.array_equal(R.downsample_mean(x, 1), x)
    with pytest.raises(NotDivisible):
        R.downsample_mean(x, 4)


def test_downsample_preserves_mean_1024():
    x = np.random.default_rng(1).random((1024, 1024, 1))
    y = R.downsample_mean(R.SampleImage(x), 2)
    assert y.data.shape == (512, 512, 1)
    assert abs(y.data.mean() - x.mean()) < 1e-12


def test_tensor_roundtrip_and_header(tmp_path):
    rng = np.random.default_rng(3)
    for h, w, c in [(5, 7, 1), (16, 16, 3), (1, 1, 1)]:
        data = rng.random((h, w, c)).astype(np.float32)
        R.export_image(R.SampleImage(data), tmp_path / "x.omnt")
        raw = (tmp_path / "x.omnt").read_bytes()
        assert raw[:4] == b"OMNT" and struct.unpack("<IIII", raw[4:20]) == (1, h, w, c)
        assert np.array_equal(R.read_tensor(tmp_path / "x.omnt"), data)


def test_tensor_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(FormatError):
        R.read_tensor(tmp_path / "bad")
    good = R.tensor_bytes(np.zeros((2, 2, 1)))
    (tmp_path / "short").write_bytes(good[:-1])
    with pytest.raises(FormatError):
        R.read_tensor(tmp_path / "short")


def test_png_all_red(tmp_path):
    R.export_image(R.SampleImage(np.ones((4, 5, 1))), tmp_path / "r.png", "png")
    with Image.open(tmp_path / "r.png") as im:
        px = np.asarray(im.convert("RGB"))
    assert px.shape == (4, 5, 3) and np.all(px == [255, 0, 0])
