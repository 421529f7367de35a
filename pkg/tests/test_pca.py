import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmg.pca import power_iteration_pca, rasterize, to_rgb, write_image


@pytest.mark.parametrize("seed", range(5))
def test_components_match_eigh(seed):
    r = np.random.default_rng(seed)
    # separated leading spectrum so 50 iterations converge
    x = r.standard_normal((200, 12)) * np.r_[6.0, 4.0, 2.5, np.linspace(1, 0.3, 9)]
    x = x @ np.linalg.qr(r.standard_normal((12, 12)))[0]
    comps, proj, vals = power_iteration_pca(x, 3)
    xc = x - x.mean(0)
    w, v = np.linalg.eigh(np.cov(xc.T))
    for i in range(3):
        ref = v[:, -1 - i]
        assert abs(comps[i] @ ref) > 0.999
        assert vals[i] == pytest.approx(w[-1 - i], rel=1e-4)
    np.testing.assert_allclose(proj, xc @ comps.T)


def test_sign_convention_deterministic():
    x = np.random.default_rng(0).standard_normal((50, 5)) * [5, 3, 2, 1, 0.5]
    a, _, _ = power_iteration_pca(x, 3, seed=1)
    b, _, _ = power_iteration_pca(x, 3, seed=2)
    np.testing.assert_allclose(a, b, atol=1e-6)
    for c in a:
        assert c[np.argmax(np.abs(c))] > 0


@given(st.integers(3, 40), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rgb_range(n, seed):
    proj = np.random.default_rng(seed).standard_normal((n, 3))
    rgb = to_rgb(proj)
    assert rgb.dtype == np.uint8
    assert rgb.min(0).tolist() == [0, 0, 0] and rgb.max(0).tolist() == [255, 255, 255]


def test_constant_column_is_mid_grey():
    rgb = to_rgb(np.c_[np.arange(4.0), np.ones(4), np.zeros(4)])
    assert rgb[:, 1].tolist() == [128] * 4


def test_image_writer(tmp_path):
    img = rasterize(np.array([0, 3]), np.array([1, 2]), np.array([[255, 0, 0], [0, 255, 0]], np.uint8), 4, 3)
    assert img.shape == (3, 4, 3)
    assert img[1, 0].tolist() == [255, 0, 0]
    path = write_image(img, tmp_path / "a.png")
    from PIL import Image
    assert np.array_equal(np.asarray(Image.open(path)), img)


def test_ppm_fallback(tmp_path, monkeypatch):
    import builtins
    real = builtins.__import__

    def no_pil(name, *a, **k):
        if name == "PIL":
            raise ImportError
        return real(name, *a, **k)

    monkeypatch.setattr(builtins, "__import__", no_pil)
    img = np.zeros((2, 3, 3), np.uint8)
    img[0, 0] = [1, 2, 3]
    path = write_image(img, tmp_path / "a.png")
    assert path.endswith(".ppm")
    data = open(path, "rb").read()
    assert data.startswith(b"P6\n3 2\n255\n")
    assert data[11:14] == b"\x01\x02\x03"
