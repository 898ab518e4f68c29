"""Perceptual image comparison with the CIEDE2000 color difference."""
from __future__ import annotations

import numpy as np

# D65 reference white for the 2 degree observer
D65 = np.array([0.95047, 1.0, 1.08883])
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)

# Heatmap bands: grey up to 1, blue up to 5, green up to 10, red above
HEATMAP_COLORS = np.array(
    [
        [0.5, 0.5, 0.5],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ]
)
HEATMAP_LIMITS = (1.0, 5.0, 10.0)


def srgb_to_linear(rgb) -> np.ndarray:
    c = np.asarray(rgb, dtype=float)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(rgb) -> np.ndarray:
    """sRGB in [0, 1] (..., 3) to CIELAB under D65."""
    xyz = srgb_to_linear(rgb) @ _SRGB_TO_XYZ.T
    t = xyz / D65
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(t > eps, np.cbrt(t), (kappa * t + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def ciede2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0) -> np.ndarray:
    """CIEDE2000 difference between CIELAB colors (..., 3)."""
    lab1 = np.asarray(lab1, dtype=float)
    lab2 = np.asarray(lab2, dtype=float)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    C_bar7 = ((C1 + C2) / 2) ** 7
    G = 0.5 * (1 - np.sqrt(C_bar7 / (C_bar7 + 25.0**7)))
    a1p, a2p = (1 + G) * a1, (1 + G) * a2
    C1p, C2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dLp = L2 - L1
    dCp = C2p - C1p
    zero = C1p * C2p == 0
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(zero, 0.0, dh)
    dHp = 2 * np.sqrt(C1p * C2p) * np.sin(np.radians(dh) / 2)

    Lp_bar = (L1 + L2) / 2
    Cp_bar = (C1p + C2p) / 2
    hsum = h1p + h2p
    far = np.abs(h1p - h2p) > 180
    hp_bar = np.where(far, np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2), hsum / 2)
    hp_bar = np.where(zero, hsum, hp_bar)

    T = (
        1
        - 0.17 * np.cos(np.radians(hp_bar - 30))
        + 0.24 * np.cos(np.radians(2 * hp_bar))
        + 0.32 * np.cos(np.radians(3 * hp_bar + 6))
        - 0.20 * np.cos(np.radians(4 * hp_bar - 63))
    )
    d_theta = 30 * np.exp(-(((hp_bar - 275) / 25) ** 2))
    Cp_bar7 = Cp_bar**7
    R_C = 2 * np.sqrt(Cp_bar7 / (Cp_bar7 + 25.0**7))
    S_L = 1 + 0.015 * (Lp_bar - 50) ** 2 / np.sqrt(20 + (Lp_bar - 50) ** 2)
    S_C = 1 + 0.045 * Cp_bar
    S_H = 1 + 0.015 * Cp_bar * T
    R_T = -np.sin(np.radians(2 * d_theta)) * R_C

    tl = dLp / (kL * S_L)
    tc = dCp / (kC * S_C)
    th = dHp / (kH * S_H)
    return np.sqrt(tl**2 + tc**2 + th**2 + R_T * tc * th)


def delta_e_ciede2000(rgb_a, rgb_b) -> np.ndarray:
    """CIEDE2000 difference of sRGB colors in [0, 1]."""
    return ciede2000(srgb_to_lab(rgb_a), srgb_to_lab(rgb_b))


def heatmap(delta_e) -> np.ndarray:
    """Banded visualization of per-pixel differences (grey/blue/green/red)."""
    band = np.searchsorted(np.asarray(HEATMAP_LIMITS), np.asarray(delta_e), side="left")
    return HEATMAP_COLORS[band]


def compare_images(img_a, img_b, mask=None) -> tuple[dict, np.ndarray, np.ndarray]:
    """Per-pixel CIEDE2000 of two (H, W, 3) sRGB images.

    Returns ``(stats, delta_e, heatmap)`` where ``stats`` holds the maximum,
    mean and variance of the difference (over ``mask`` when given).
    """
    a, b = np.asarray(img_a), np.asarray(img_b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    # 8-bit images are rescaled to [0, 1]
    a = a / 255.0 if a.dtype.kind in "ui" else a.astype(float)
    b = b / 255.0 if b.dtype.kind in "ui" else b.astype(float)
    de = delta_e_ciede2000(a, b)
    sel = de if mask is None else de[np.asarray(mask, bool)]
    if sel.size == 0:
        stats = {"max": 0.0, "mean": 0.0, "var": 0.0}
    else:
        stats = {"max": float(sel.max()), "mean": float(sel.mean()), "var": float(sel.var())}
    return stats, de, heatmap(de)
