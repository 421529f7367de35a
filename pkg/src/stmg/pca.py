"""Top principal components by power iteration with deflation, and RGB
mapping for feature visualisation."""

from __future__ import annotations

import numpy as np


def power_iteration_pca(x: np.ndarray, k: int = 3, iters: int = 50, seed: int = 0):
    """Returns (components [k, D], projections [N, k], eigenvalues [k])."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D feature matrix")
    xc = x - x.mean(0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    rng = np.random.default_rng(seed)
    comps, vals = [], []
    c = cov.copy()
    for _ in range(min(k, x.shape[1])):
        v = rng.standard_normal(x.shape[1])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = c @ v
            nrm = np.linalg.norm(w)
            if nrm == 0:
                break
            v = w / nrm
        lam = float(v @ c @ v)
        comps.append(v)
        vals.append(lam)
        c = c - lam * np.outer(v, v)
    comps = np.array(comps)
    # deterministic sign: largest-magnitude loading positive
    for i in range(len(comps)):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return comps, xc @ comps.T, np.array(vals)


def to_rgb(proj: np.ndarray) -> np.ndarray:
    """Min-max scale each column to 0..255 (constant columns map to 128)."""
    proj = np.asarray(proj, dtype=np.float64)
    out = np.full((len(proj), 3), 128, dtype=np.uint8)
    for d in range(min(3, proj.shape[1])):
        lo, hi = proj[:, d].min(), proj[:, d].max()
        if hi > lo:
            out[:, d] = np.round(255 * (proj[:, d] - lo) / (hi - lo)).astype(np.uint8)
    return out


def rasterize(x, y, rgb, width: int, height: int) -> np.ndarray:
    """[H, W, 3] image; later nodes overwrite earlier ones at a pixel."""
    img = np.zeros((height, width, 3), dtype=np.uint8)
    img[np.asarray(y), np.asarray(x)] = rgb
    return img


def write_image(img: np.ndarray, path) -> str:
    """PNG when Pillow is importable, otherwise binary PPM. Returns the path."""
    try:
        from PIL import Image
    except ImportError:
        path = str(path).rsplit(".", 1)[0] + ".ppm"
        h, w, _ = img.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
        return path
    Image.fromarray(img, "RGB").save(path)
    return str(path)
