"""Image translation engines (pseudo-target synthesis) and self-training
augmentations: spectral amplitude swap, color jitter, Gaussian blur, ClassMix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .numerics import dft2, idft2


@dataclass(frozen=True)
class EngineSpec:
    kind: str = "fda"          # fda | color_jitter | gaussian_blur | identity
    beta_fda: float = 0.09
    jitter_strength: float = 0.8
    blur_sigma: float = 1.0


def apply_engine(spec: EngineSpec, img: np.ndarray, refs,
                 gen: np.random.Generator) -> np.ndarray:
    """Translate one image; `refs` is the pool of target reference images
    the fda engine draws from (unused by the other engines)."""
    if spec.kind == "fda":
        ref = refs[gen.integers(0, len(refs))]
        return fda_translate(img, ref, spec.beta_fda)
    if spec.kind == "color_jitter":
        return color_jitter(img, spec.jitter_strength, gen)
    if spec.kind == "gaussian_blur":
        return gaussian_blur(img, spec.blur_sigma)
    return img


def fda_band_mask(H: int, W: int, beta: float) -> np.ndarray:
    """Low-frequency band (natural spectrum order) for the amplitude swap.

    Side target is floor(beta * min(H, W)) (at least 1 for beta > 0); the
    realized square is the DC-centered odd square of radius side // 2, since
    a Hermitian-symmetric swap of a real image's spectrum requires a band
    that is symmetric about DC.
    """
    if beta <= 0:
        return np.zeros((H, W), dtype=bool)
    side = max(1, int(np.floor(beta * min(H, W))))
    r = side // 2
    fy = ((np.arange(H) + H // 2) % H) - H // 2
    fx = ((np.arange(W) + W // 2) % W) - W // 2
    return (np.abs(fy)[:, None] <= r) & (np.abs(fx)[None, :] <= r)


def fda_translate(src: np.ndarray, trg_ref: np.ndarray, beta: float,
                  clamp: bool = True) -> np.ndarray:
    """Swap the low-frequency amplitude of `src` for that of `trg_ref`,
    keeping source phase everywhere."""
    if src.shape != trg_ref.shape:
        raise ShapeMismatch(f"{src.shape} vs {trg_ref.shape}")
    H, W, nch = src.shape
    band = fda_band_mask(H, W, beta)
    out = np.empty_like(src, dtype=np.float64)
    for ch in range(nch):
        fs = dft2(src[:, :, ch])
        amp = np.abs(fs)
        if band.any():
            ft = dft2(trg_ref[:, :, ch])
            amp = np.where(band, np.abs(ft), amp)
        mixed = amp * np.exp(1j * np.angle(fs))
        out[:, :, ch] = idft2(mixed)
    return np.clip(out, 0, 1) if clamp else out


def color_jitter(img: np.ndarray, strength: float, gen: np.random.Generator) -> np.ndarray:
    """Random per-channel brightness and contrast plus a saturation factor,
    all drawn from U[1 - 0.8*strength, 1 + 0.8*strength]."""
    lo, hi = 1 - 0.8 * strength, 1 + 0.8 * strength
    bright = gen.uniform(lo, hi, size=3)
    contrast = gen.uniform(lo, hi, size=3)
    sat = gen.uniform(lo, hi)
    out = img * bright
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=2, keepdims=True)
    out = gray + (out - gray) * sat
    return np.clip(out, 0, 1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, reflect-padded; sigma=0 is the identity."""
    if sigma <= 0:
        return img.copy()
    radius = int(np.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        out = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None)] * padded.ndim
            sl[axis] = slice(i, i + img.shape[axis])
            out += kv * padded[tuple(sl)]
    return out


def classmix(donor_img: np.ndarray, donor_label: np.ndarray,
             recipient_img: np.ndarray, recipient_label: np.ndarray,
             gen: np.random.Generator, selected_classes=None):
    """Paste ceil(|present| / 2) donor classes (pixels + labels) onto the
    recipient; elsewhere the recipient image and labels survive."""
    if donor_img.shape != recipient_img.shape or donor_label.shape != recipient_label.shape:
        raise ShapeMismatch("donor and recipient shapes disagree")
    if selected_classes is None:
        present = np.unique(donor_label)
        n_pick = int(np.ceil(len(present) / 2))
        selected_classes = gen.choice(present, size=n_pick, replace=False)
    mask = np.isin(donor_label, np.asarray(selected_classes))
    out_img = np.where(mask[:, :, None], donor_img, recipient_img)
    out_lbl = np.where(mask, donor_label, recipient_label).astype(recipient_label.dtype)
    return out_img, out_lbl, mask
