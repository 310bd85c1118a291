"""Evaluation and feature-space diagnostics: confusion matrix / mIoU, class
center distance, pixel-wise discrimination distance, cross-domain prototype
similarity, and CSV/SVG report emission.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (ClassMissing, DegeneratePairWarning, EmptyMatrix,
                     IoError, NegativeDenominatorWarning)
from .numerics import IGNORE


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, C: int) -> np.ndarray:
    """C x C counts, rows = ground truth, cols = prediction; IGNORE skipped."""
    t = np.asarray(truth).ravel()
    p = np.asarray(pred).ravel()
    keep = t != IGNORE
    t, p = t[keep].astype(np.int64), p[keep].astype(np.int64)
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def miou(cm: np.ndarray):
    """Per-class IoU and its mean; zero-denominator classes are excluded."""
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = np.full(cm.shape[0], np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    return per_class, float(np.nanmean(per_class))


@dataclass
class FeatureBank:
    """Per-domain, per-class feature collections with lazy class centers."""
    features: dict = field(default_factory=dict)  # (domain, class) -> (k, d)

    def add(self, domain: str, cls: int, rows: np.ndarray):
        rows = np.atleast_2d(rows)
        key = (domain, cls)
        if key in self.features:
            self.features[key] = np.concatenate([self.features[key], rows])
        else:
            self.features[key] = rows.copy()

    def classes(self, domain: str):
        return sorted(c for (d, c) in self.features if d == domain)

    def center(self, domain: str, cls: int) -> np.ndarray:
        key = (domain, cls)
        if key not in self.features or self.features[key].shape[0] == 0:
            raise ClassMissing(f"{domain} class {cls} has no features")
        return self.features[key].mean(axis=0)


def ccd(bank: FeatureBank, cls: int, domain: str = "target") -> float:
    """Intra-class scatter over inter-class center distance, averaged over
    the other present classes."""
    others = [c for c in bank.classes(domain) if c != cls]
    if cls not in bank.classes(domain) or not others:
        raise ClassMissing(f"need class {cls} plus at least one other class")
    feats = bank.features[(domain, cls)]
    mu_i = bank.center(domain, cls)
    intra = float(np.mean(np.sum((feats - mu_i) ** 2, axis=1)))
    total = 0.0
    for j in others:
        gap = float(np.sum((mu_i - bank.center(domain, j)) ** 2))
        if gap < 1e-12:
            warnings.warn(f"centers of classes {cls} and {j} coincide",
                          DegeneratePairWarning)
            gap = 1e-12
        total += intra / gap
    return total / len(others)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.sum(a * b, axis=-1) / (na * nb + 1e-12)


def pdd(bank: FeatureBank, cls: int, domain: str = "target") -> float:
    """One minus the mean ratio of own-center cosine over summed
    other-center cosines. Negative denominators are legal but flagged."""
    others = [c for c in bank.classes(domain) if c != cls]
    if cls not in bank.classes(domain) or not others:
        raise ClassMissing(f"need class {cls} plus at least one other class")
    feats = bank.features[(domain, cls)]
    own = _cos(feats, bank.center(domain, cls)[None, :])
    denom = np.zeros(feats.shape[0])
    for j in others:
        denom += _cos(feats, bank.center(domain, j)[None, :])
    if np.any(denom < 0):
        warnings.warn(f"class {cls}: negative PDD denominator",
                      NegativeDenominatorWarning)
    return float(1.0 - np.mean(own / (denom + 1e-8)))


def cross_domain_similarity(bank: FeatureBank) -> dict:
    """Cosine of source vs target class centroids; missing classes map to
    None rather than failing the whole report."""
    out = {}
    for c in sorted(set(bank.classes("source")) | set(bank.classes("target"))):
        try:
            out[c] = float(_cos(bank.center("source", c), bank.center("target", c)))
        except ClassMissing:
            out[c] = None
    return out


def build_feature_bank(forward_fn, source_samples, target_samples,
                       target_labels, factor: int = 4,
                       feature_kind: str = "projector") -> FeatureBank:
    """Collect per-class features (ground-truth labeled, evaluation only)
    for both domains. forward_fn(image) -> (features, probs, embeddings)."""
    from .data import downsample_labels
    bank = FeatureBank()
    idx = 0 if feature_kind == "encoder" else 2
    for domain, samples, labels in (
            ("source", source_samples, [s.label for s in source_samples]),
            ("target", target_samples, target_labels)):
        for sample, label in zip(samples, labels):
            out = forward_fn(sample.image)[idx]
            rows = out.reshape(-1, out.shape[-1])
            lbl = downsample_labels(label, factor).ravel()
            for c in np.unique(lbl):
                if c != IGNORE:
                    bank.add(domain, int(c), rows[lbl == c])
    return bank


# -- report emission ---------------------------------------------------------

def emit_report(metrics, out_dir: str) -> list:
    """metrics: iterable of (run, step, metric, class, value) rows.

    Writes metrics.csv (long format) and one SVG bar chart per metric
    family; returns the written paths.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        csv_path = os.path.join(out_dir, "metrics.csv")
        with open(csv_path, "w") as f:
            f.write("run,step,metric,class,value\n")
            for run, step, metric, cls, value in metrics:
                f.write(f"{run},{step},{metric},{cls},{value}\n")
        paths.append(csv_path)
        by_metric = {}
        for run, step, metric, cls, value in metrics:
            if value is not None:
                by_metric.setdefault(metric, []).append((cls, float(value)))
        for metric, bars in by_metric.items():
            svg_path = os.path.join(out_dir, f"{metric}.svg")
            with open(svg_path, "w") as f:
                f.write(_bar_svg(metric, bars))
            paths.append(svg_path)
        return paths
    except OSError as e:
        raise IoError(str(e)) from e


def parse_report(csv_path: str) -> list:
    rows = []
    with open(csv_path) as f:
        next(f)
        for line in f:
            run, step, metric, cls, value = line.rstrip("\n").split(",")
            rows.append((run, int(step), metric, cls,
                         None if value == "None" else float(value)))
    return rows


def _bar_svg(title: str, bars) -> str:
    width, height, pad = 480, 240, 40
    vmax = max((abs(v) for _, v in bars), default=1.0) or 1.0
    bw = (width - 2 * pad) / max(len(bars), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="16" text-anchor="middle">{title}</text>']
    base = height - pad
    for i, (cls, v) in enumerate(bars):
        h = abs(v) / vmax * (height - 2 * pad)
        y = base - h if v >= 0 else base
        x = pad + i * bw
        parts.append(f'<rect x="{x + 2:.1f}" y="{y:.1f}" width="{bw - 4:.1f}" '
                     f'height="{h:.1f}" fill="#4878a8"/>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{height - pad / 2:.1f}" '
                     f'text-anchor="middle" font-size="11">{cls}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
