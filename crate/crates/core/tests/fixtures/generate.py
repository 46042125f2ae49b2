"""Regenerates the metric fixtures with numpy, scipy and scikit-image.

    python3 crates/core/tests/fixtures/generate.py

Images are stored channel-first (3, H, W) as flat lists of multiples of 1/255.
"""

import json
import pathlib

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

HERE = pathlib.Path(__file__).parent
LUMA = np.array([0.299, 0.587, 0.114])


def q(a):
    return np.round(np.clip(a, 0.0, 1.0) * 255.0) / 255.0


def gray(img):
    return np.tensordot(LUMA, img, axes=1)


def pack(img):
    return [float(v) for v in img.reshape(-1)]


def reference_pairs():
    rng = np.random.default_rng(20240611)
    pairs = []

    x = q(rng.random((3, 16, 16)))
    pairs.append(("noise16", x, q(x + rng.normal(0, 0.05, x.shape))))

    yy, xx = np.mgrid[0:24, 0:20]
    x = q(np.stack([yy / 23.0, xx / 19.0, (yy + xx) / 42.0]))
    pairs.append(("gradient24x20", x, q(0.8 * x + 0.15)))

    x = q(rng.random((3, 32, 32)))
    blurred = np.stack([ndimage.uniform_filter(c, 3, mode="nearest") for c in x])
    pairs.append(("blur32", x, q(blurred)))

    x = q(rng.random((3, 11, 11)))
    pairs.append(("minimum11", x, q(x[:, ::-1, :])))

    yy, xx = np.mgrid[0:40, 0:28]
    checker = ((yy // 4 + xx // 4) % 2).astype(float)
    x = q(np.stack([0.2 + 0.6 * checker, 0.5 * checker + 0.3, 0.9 - 0.7 * checker]))
    pairs.append(("checker40x28", x, q(0.5 + 0.5 * (x - 0.5))))

    out = []
    for name, a, b in pairs:
        s = structural_similarity(
            gray(a),
            gray(b),
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )
        p = peak_signal_noise_ratio(a, b, data_range=1.0)
        out.append(
            {
                "name": name,
                "height": a.shape[1],
                "width": a.shape[2],
                "x": pack(a),
                "y": pack(b),
                "psnr": float(p),
                "ssim": float(s),
            }
        )
    return out


def uciqe_terms(img):
    rgb = np.moveaxis(img, 0, -1)
    lab = rgb2lab(rgb)
    achromatic = (rgb[..., 0] == rgb[..., 1]) & (rgb[..., 1] == rgb[..., 2])
    lab[achromatic, 1:] = 0.0
    l = lab[..., 0].reshape(-1) / 100.0
    c = np.hypot(lab[..., 1], lab[..., 2]).reshape(-1) / 100.0
    sigma_c = c.std()
    n = l.size
    k = max(1, int(np.floor(0.01 * n + 0.5)))
    ls = np.sort(l)
    con_l = ls[-k:].mean() - ls[:k].mean()
    sat = np.where(l > 0, c / np.where(l > 0, l, 1.0), 0.0)
    return [float(sigma_c), float(con_l), float(sat.mean())]


def trimmed_mean(v, a_l=0.1, a_r=0.1):
    v = np.sort(v.reshape(-1))
    k = v.size
    lo = int(np.ceil(a_l * k))
    hi = int(np.floor(a_r * k))
    return v[lo : k - hi].mean()


def uicm(r, g, b):
    rg = (r - g).reshape(-1)
    yb = ((r + g) / 2.0 - b).reshape(-1)
    mrg, myb = trimmed_mean(rg), trimmed_mean(yb)
    vrg = np.mean((rg - mrg) ** 2)
    vyb = np.mean((yb - myb) ** 2)
    return -0.0268 * np.hypot(mrg, myb) + 0.1586 * np.sqrt(vrg + vyb)


def blocks(x, size=8):
    k1, k2 = x.shape[0] // size, x.shape[1] // size
    for i in range(k1):
        for j in range(k2):
            yield x[i * size : (i + 1) * size, j * size : (j + 1) * size]
    return


def eme(x, size=8):
    k1, k2 = x.shape[0] // size, x.shape[1] // size
    total = 0.0
    for b in blocks(x, size):
        lo, hi = b.min(), b.max()
        if lo != 0 and hi != 0:
            total += np.log(hi / lo)
    return 2.0 * total / (k1 * k2)


def uism(r, g, b):
    out = 0.0
    for w, c in zip(LUMA, (r, g, b)):
        mag = np.hypot(ndimage.sobel(c, axis=0, mode="reflect"), ndimage.sobel(c, axis=1, mode="reflect"))
        out += w * eme(mag * c)
    return out


def uiconm(intensity, size=8):
    k1, k2 = intensity.shape[0] // size, intensity.shape[1] // size
    total = 0.0
    for b in blocks(intensity, size):
        lo, hi = b.min(), b.max()
        d, s = hi - lo, hi + lo
        if d != 0 and s != 0:
            total += (d / s) * np.log(d / s)
    return -total / (k1 * k2)


def uiqm_terms(img):
    p = img * 255.0
    r, g, b = p
    return [float(uicm(r, g, b)), float(uism(r, g, b)), float(uiconm(gray(img) * 255.0))]


def no_reference_images():
    rng = np.random.default_rng(77)
    imgs = []

    x = np.zeros((3, 8, 8))
    x[:, :, :4] = np.array([0.8, 0.3, 0.2])[:, None, None]
    x[:, :, 4:] = np.array([0.1, 0.5, 0.7])[:, None, None]
    imgs.append(("halves8", q(x)))

    yy, xx = np.mgrid[0:16, 0:16]
    imgs.append(("gradient16", q(np.stack([xx / 15.0, yy / 15.0, 0.5 + 0.3 * np.sin(xx / 3.0)]))))

    imgs.append(("noise24x16", q(0.1 + 0.8 * rng.random((3, 24, 16)))))

    yy, xx = np.mgrid[0:16, 0:24]
    checker = ((yy // 3 + xx // 5) % 2).astype(float)
    imgs.append(("checker16x24", q(np.stack([0.15 + 0.5 * checker, 0.6 - 0.3 * checker, 0.7 * checker + 0.2]))))

    out = []
    for name, img in imgs:
        ut = uciqe_terms(img)
        qt = uiqm_terms(img)
        out.append(
            {
                "name": name,
                "height": img.shape[1],
                "width": img.shape[2],
                "image": pack(img),
                "uciqe_terms": ut,
                "uciqe": float(np.dot([0.4680, 0.2745, 0.2576], ut)),
                "uiqm_terms": qt,
                "uiqm": float(np.dot([0.0282, 0.2953, 3.5753], qt)),
            }
        )
    return out


if __name__ == "__main__":
    (HERE / "reference_metrics.json").write_text(json.dumps(reference_pairs(), indent=1))
    (HERE / "no_reference_metrics.json").write_text(json.dumps(no_reference_images(), indent=1))
