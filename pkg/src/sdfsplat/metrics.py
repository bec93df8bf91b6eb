"""Image quality metrics and the relighting normalization protocol.

``ssim`` is written with the generic autodiff ops so the trainer can reuse
it inside the color loss; called with plain ndarrays it is pure numpy.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

PSNR_INF = float("inf")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); identical images report +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, kernel):
    """Separable 'valid' convolution over the two leading (H, W) axes."""
    size = len(kernel)
    out = None
    for i, kw in enumerate(kernel):
        sl = img[:, i : ad.value_of(img).shape[1] - size + 1 + i]
        term = ad.mul(sl, float(kw))
        out = term if out is None else ad.add(out, term)
    img = out
    out = None
    for i, kw in enumerate(kernel):
        sl = img[i : ad.value_of(img).shape[0] - size + 1 + i]
        term = ad.mul(sl, float(kw))
        out = term if out is None else ad.add(out, term)
    return out


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean structural similarity with a Gaussian window.

    Accepts (H, W) or (H, W, C) images in [0, 1]; tape variables allowed
    (the trainer differentiates through this).  Windows are 'valid': the
    mean runs over positions where the full window fits.
    """
    av, bv = ad.value_of(a), ad.value_of(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    if av.shape[0] < window or av.shape[1] < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    kernel = _gaussian_kernel(window, sigma)

    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    aa = _filter_valid(ad.square(a), kernel)
    bb = _filter_valid(ad.square(b), kernel)
    ab = _filter_valid(ad.mul(a, b), kernel)

    mu_aa = ad.square(mu_a)
    mu_bb = ad.square(mu_b)
    mu_ab = ad.mul(mu_a, mu_b)
    var_a = ad.sub(aa, mu_aa)
    var_b = ad.sub(bb, mu_bb)
    cov = ad.sub(ab, mu_ab)

    num = ad.mul(ad.add(ad.mul(mu_ab, 2.0), SSIM_C1), ad.add(ad.mul(cov, 2.0), SSIM_C2))
    den = ad.mul(ad.add(ad.add(mu_aa, mu_bb), SSIM_C1), ad.add(ad.add(var_a, var_b), SSIM_C2))
    return ad.mean(ad.div(num, den))


def relight_normalize(pred, gt, mask, clamp=(0.1, 10.0)):
    """Per-channel scale matching mean colors over the mask (NeRO protocol).

    Returns (normalized prediction, scales).  Scales are clamped; a zero
    prediction mean clamps rather than dividing by zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("relight normalization needs a nonempty mask")
    scales = np.empty(pred.shape[-1])
    for c in range(pred.shape[-1]):
        pm = float(pred[..., c][mask].mean())
        gm = float(gt[..., c][mask].mean())
        scales[c] = np.clip(gm / pm if pm > 0 else clamp[1], clamp[0], clamp[1])
    return pred * scales, scales
