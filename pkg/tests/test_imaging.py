import numpy as np
import pytest

from pixeldistill import imaging
from pixeldistill.palette import parse_palette


def test_bilinear_same_size_identity():
    rng = np.random.default_rng(0)
    img = rng.random((5, 7, 3))
    out = imaging.bilinear_resize(img, 5, 7)
    assert np.array_equal(out, img)


def test_bilinear_checkerboard_to_single_pixel():
    img = np.array([[[0.0], [1.0]], [[1.0], [0.0]]])
    out = imaging.bilinear_resize(img, 1, 1)
    assert abs(out[0, 0, 0] - 0.5) < 1e-12


def test_bilinear_constant_preserved():
    img = np.full((6, 6, 3), 0.37)
    for shape in [(3, 3), (12, 12), (5, 9)]:
        out = imaging.bilinear_resize(img, *shape)
        assert np.allclose(out, 0.37, atol=1e-12)


def test_bilinear_mean_preserved_integer_upscale():
    rng = np.random.default_rng(1)
    img = rng.random((6, 8, 3))
    for f in (2, 3, 4):
        out = imaging.bilinear_resize(img, 6 * f, 8 * f)
        assert abs(out.mean() - img.mean()) < 1e-6
    # downscale by 2 averages disjoint pairs, so the mean survives there too
    out = imaging.bilinear_resize(img, 3, 4)
    assert abs(out.mean() - img.mean()) < 1e-6


def test_png_round_trip_within_one_byte(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.random((9, 11, 3))
    path = tmp_path / "x.png"
    imaging.write_png(path, img)
    back = imaging.read_png(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-12


def test_png_palette_colors_round_trip_exact(tmp_path):
    # palette colors are byte/255 by construction, so they survive exactly
    palette = parse_palette("#102030\n#FFD700\n#000000")
    img = palette.colors[np.array([[0, 1], [2, 1]])]
    path = tmp_path / "p.png"
    imaging.write_png(path, img)
    back = imaging.read_png(path)
    assert np.array_equal(back, img)


def test_png_one_black_pixel(tmp_path):
    path = tmp_path / "b.png"
    imaging.write_png(path, np.zeros((1, 1, 3)))
    assert np.array_equal(imaging.read_png(path), np.zeros((1, 1, 3)))


def test_png_missing_file():
    with pytest.raises(imaging.ImageError):
        imaging.read_png("/nonexistent/nope.png")


def test_canny_constant_is_zero():
    img = np.full((16, 16, 3), 0.5)
    edges = imaging.canny(img)
    assert edges.shape == (16, 16, 1)
    assert np.all(edges == 0.0)


def test_canny_square_edges_near_boundary():
    img = np.zeros((32, 32, 3))
    img[8:24, 8:24] = 1.0
    edges = imaging.canny(img)[:, :, 0]
    assert edges.max() > 0
    ys, xs = np.nonzero(edges)
    # distance to the square boundary (the rectangle ring at rows/cols 8 and 23)
    for y, x in zip(ys, xs):
        inside = 8 <= y <= 23 and 8 <= x <= 23
        d_edge = min(abs(y - 8), abs(y - 23), abs(x - 8), abs(x - 23))
        dist = d_edge if inside else max(
            max(8 - y, y - 23, 0), max(8 - x, x - 23, 0))
        assert dist <= 2, f"edge response at ({y},{x}) is {dist} px from the boundary"


def test_canny_contrast_invariance():
    rng = np.random.default_rng(3)
    base = rng.random((24, 24, 3)) * 0.4
    e1 = imaging.canny(base)
    e2 = imaging.canny(base * 2.0)
    assert np.allclose(e1, e2, atol=1e-12)


def test_canny_range():
    rng = np.random.default_rng(4)
    e = imaging.canny(rng.random((20, 20, 3)))
    assert e.min() >= 0.0 and e.max() <= 1.0


def test_pseudo_depth_constant_degenerates_to_zero():
    d = imaging.pseudo_depth(np.full((16, 16, 3), 0.3))
    assert np.all(d == 0.0)


def test_pseudo_depth_monotone_in_luminance():
    img = np.zeros((32, 32, 3))
    img[:, 16:] = 0.9
    d = imaging.pseudo_depth(img)[:, :, 0]
    assert d[16, 24] > d[16, 7]


def test_pseudo_depth_range_exact():
    rng = np.random.default_rng(5)
    d = imaging.pseudo_depth(rng.random((24, 24, 3)))
    assert d.min() == 0.0
    assert d.max() == 1.0


def test_nearest_upscale_shape():
    img = np.zeros((3, 4, 3))
    out = imaging.nearest_upscale(img, 8)
    assert out.shape == (24, 32, 3)
