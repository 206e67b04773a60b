"""Fusion quality metrics: histogram mutual information, histogram cross
entropy, and gradient-based edge preservation.

All three operate on 2-D intensity images in [0, 1] and are pure functions.
Histograms use 256 bins over [0, 1] and natural logarithms, with 1e-12
added to every bin before normalization where divisions occur, so values
are reproducible bit for bit.

Edge preservation (q_abf) follows the Xydeas-Petrovic construction: Sobel
strength and orientation per source, per-pixel preservation factors through
sigmoid mappings, combined with strength weighting. The sigmoid constants
used here are gain 1.0 / slope -15 / offset 0.5 for the strength factor and
gain 1.0 / slope -30 / offset 0.8 for the orientation factor; with unit
gains and these slopes, exact preservation scores 0.997 and a structureless
fused image scores under 1e-3.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError

HIST_BINS = 256
HIST_EPS = 1e-12

# sigmoid mapping constants for q_abf (strength, orientation)
ABF_GAIN_G = 1.0
ABF_SLOPE_G = -15.0
ABF_OFFSET_G = 0.5
ABF_GAIN_A = 1.0
ABF_SLOPE_A = -30.0
ABF_OFFSET_A = 0.8


def _check_images(*imgs) -> None:
    ref = imgs[0]
    for im in imgs:
        if im.ndim != 2:
            raise DimensionError(f"metrics expect 2-D images, got {im.shape}")
        if im.shape != ref.shape:
            raise DimensionError(f"metrics: shape mismatch {ref.shape} vs {im.shape}")
        if im.size and (im.min() < 0.0 or im.max() > 1.0):
            raise InputError("metrics: image values must lie in [0, 1]")


def _hist(img: np.ndarray) -> np.ndarray:
    return np.histogram(img, bins=HIST_BINS, range=(0.0, 1.0))[0].astype(np.float64)


def _joint_hist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, _, _ = np.histogram2d(
        a.ravel(), b.ravel(), bins=HIST_BINS, range=[[0.0, 1.0], [0.0, 1.0]]
    )
    return h


def _mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    joint = _joint_hist(a, b)
    total = joint.sum()
    pxy = joint / total
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    outer = px[:, None] * py[None, :]
    return float((pxy[nz] * np.log(pxy[nz] / outer[nz])).sum())


def entropy(img: np.ndarray) -> float:
    """Shannon entropy (nats) of the 256-bin intensity histogram."""
    p = _hist(img)
    p = p / p.sum()
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def q_mi(i_f: np.ndarray, i_ir: np.ndarray, i_vi: np.ndarray) -> float:
    """MI(fused, ir) + MI(fused, vis) from 256-bin joint histograms."""
    _check_images(i_f, i_ir, i_vi)
    return _mutual_information(i_f, i_ir) + _mutual_information(i_f, i_vi)


def _kl(p_counts: np.ndarray, q_counts: np.ndarray) -> float:
    p = p_counts + HIST_EPS
    q = q_counts + HIST_EPS
    p = p / p.sum()
    q = q / q.sum()
    return float((p * np.log(p / q)).sum())


def q_ce(i_f: np.ndarray, i_ir: np.ndarray, i_vi: np.ndarray) -> float:
    """Mean KL divergence from each source histogram to the fused histogram
    (lower is better)."""
    _check_images(i_f, i_ir, i_vi)
    hf = _hist(i_f)
    return 0.5 * (_kl(_hist(i_ir), hf) + _kl(_hist(i_vi), hf))


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xp = np.pad(img, 1, mode="reflect")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    h, w = img.shape
    for i in range(3):
        for j in range(3):
            sl = xp[i : i + h, j : j + w]
            gx += sl * _SOBEL_X[i, j]
            gy += sl * _SOBEL_Y[i, j]
    return gx, gy


def _strength_orientation(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = _sobel(img)
    strength = np.sqrt(gx * gx + gy * gy)
    alpha = np.arctan(gy / (gx + (gx == 0.0) * 1e-12))
    return strength, alpha


def _preservation(gs: np.ndarray, as_: np.ndarray, gf: np.ndarray,
                  af: np.ndarray) -> np.ndarray:
    # relative strength: min ratio, penalizing both loss and over-sharpening
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(
            gs > gf,
            gf / np.where(gs == 0.0, 1.0, gs),
            np.where(gf > 0.0, gs / np.where(gf == 0.0, 1.0, gf), 1.0),
        )
    a_rel = 1.0 - np.abs(as_ - af) * (2.0 / np.pi)
    qg = ABF_GAIN_G / (1.0 + np.exp(ABF_SLOPE_G * (ratio - ABF_OFFSET_G)))
    qa = ABF_GAIN_A / (1.0 + np.exp(ABF_SLOPE_A * (a_rel - ABF_OFFSET_A)))
    return qg * qa


def q_abf(i_f: np.ndarray, i_ir: np.ndarray, i_vi: np.ndarray) -> float:
    """Edge-preservation estimate in [0, 1]; 0 if neither source has edges."""
    _check_images(i_f, i_ir, i_vi)
    if i_f.shape[0] < 3 or i_f.shape[1] < 3:
        raise DimensionError("q_abf: needs at least 3x3 images")
    gf, af = _strength_orientation(i_f)
    ga, aa = _strength_orientation(i_ir)
    gb, ab = _strength_orientation(i_vi)
    qa = _preservation(ga, aa, gf, af)
    qb = _preservation(gb, ab, gf, af)
    wa, wb = ga, gb
    denom = float((wa + wb).sum())
    if denom == 0.0:
        return 0.0
    return float((qa * wa + qb * wb).sum() / denom)
