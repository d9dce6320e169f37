"""Image quality metrics: PSNR and SSIM on [0, 1] float images."""

import numpy as np

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB, images clamped to [0, 1] first.

    Identical images return the 100 dB sentinel cap.
    """
    a, b = _check_shapes(a, b)
    diff = np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(sigma=SSIM_SIGMA, radius=SSIM_RADIUS):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2d(img, kernel, radius):
    """Separable 2D correlation with symmetric (reflect) boundary."""
    padded = np.pad(img, radius, mode="symmetric")
    tmp = np.zeros((padded.shape[0], img.shape[1]))
    for i, kv in enumerate(kernel):
        tmp += kv * padded[:, i:i + img.shape[1]]
    out = np.zeros(img.shape)
    for i, kv in enumerate(kernel):
        out += kv * tmp[i:i + img.shape[0], :]
    return out


def _ssim_channel(x, y, kernel, radius):
    mu_x = _filter2d(x, kernel, radius)
    mu_y = _filter2d(y, kernel, radius)
    var_x = _filter2d(x * x, kernel, radius) - mu_x * mu_x
    var_y = _filter2d(y * y, kernel, radius) - mu_y * mu_y
    cov = _filter2d(x * y, kernel, radius) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    s = num / den
    return float(s[radius:-radius, radius:-radius].mean())


def ssim(a, b):
    """Mean structural similarity, 11x11 Gaussian window with sigma 1.5.

    Population covariances, reflect-padded filtering, window-cropped mean,
    per channel then averaged (the standard evaluation convention for a
    data range of 1).
    """
    a, b = _check_shapes(a, b)
    if min(a.shape[0], a.shape[1]) < 2 * SSIM_RADIUS + 1:
        raise ValueError("images smaller than the 11x11 SSIM window")
    kernel = gaussian_window()
    if a.ndim == 2:
        return _ssim_channel(a, b, kernel, SSIM_RADIUS)
    vals = [_ssim_channel(a[..., c], b[..., c], kernel, SSIM_RADIUS)
            for c in range(a.shape[2])]
    return float(np.mean(vals))
