"""Scalar training objectives: source/target cross-entropy, the InfoNCE and
MSE pulling losses, dynamic re-weighting, and the total objective.

All losses accept autodiff Tensors (plain arrays are wrapped as constants)
and return a scalar Tensor, so gradients flow wherever inputs carry them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .errors import AllIgnored, NoActiveClasses
from .numerics import IGNORE

ABSENT = None  # marker for classes with no pseudo-labeled pixels


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    lambda_pull: float = 0.1
    pull_kind: str = "infonce"   # infonce | mse
    beta_drw: float = 0.5
    drw_mode: str = "dynamic"    # dynamic | fixed | none
    fixed_weights: tuple = ()


def _ce_mean(probs, labels: np.ndarray):
    probs = Tensor._wrap(probs)
    flat = probs.reshape(-1, probs.shape[-1])
    lbl = np.asarray(labels).ravel()
    valid = np.flatnonzero(lbl != IGNORE)
    if valid.size == 0:
        raise AllIgnored("every pixel is IGNORE")
    picked = flat.take(valid).gather_rows(lbl[valid])
    return -(picked.clip_min(1e-12).log()).mean()


def source_ce(probs, labels: np.ndarray):
    """Mean categorical cross-entropy over non-IGNORE pixels."""
    return _ce_mean(probs, labels)


def target_ce(probs, labels: np.ndarray, quality: float):
    """Pseudo-label CE scaled by the image's quality weight q."""
    if quality == 0.0:
        return Tensor(0.0)
    return _ce_mean(probs, labels) * quality


def info_nce(q, k_pos, negs, tau: float):
    """- log( e^{q.k+ / tau} / (e^{q.k+ / tau} + sum e^{q.k- / tau}) ), in a
    log-sum-exp stable form. Accepts a single query vector."""
    q = Tensor._wrap(q).reshape(1, -1)
    return info_nce_batch(q, k_pos, negs, tau)


def info_nce_batch(q: Tensor, k_pos, negs, tau: float):
    """Mean InfoNCE over query rows (n, d) against one positive key (d,)
    and a shared negative set (m, d)."""
    k_pos = np.asarray(k_pos, dtype=np.float64).reshape(-1, 1)
    negs = np.asarray(negs, dtype=np.float64)
    pos_logits = q @ k_pos                 # (n, 1)
    neg_logits = q @ negs.T                # (n, m)
    logits = concat([pos_logits, neg_logits], axis=1) * (1.0 / tau)
    return (logits.logsumexp(axis=1) - logits.gather_rows(np.zeros(q.shape[0], dtype=int))).mean()


def mse_pull(q, k_pos):
    """Squared L2 distance of a positive pair of unit vectors."""
    q = Tensor._wrap(q)
    diff = q - np.asarray(k_pos, dtype=np.float64)
    return (diff * diff).sum()


def mse_pull_batch(q: Tensor, k_pos):
    diff = q - np.asarray(k_pos, dtype=np.float64).reshape(1, -1)
    return (diff * diff).sum(axis=1).mean()


def class_confidence(plabels: np.ndarray, conf: np.ndarray, C: int) -> dict:
    """Mean teacher confidence per pseudo-label class; absent classes are
    left out of the dict entirely (never reported as 0)."""
    lbl = np.asarray(plabels).ravel()
    cf = np.asarray(conf).ravel()
    out = {}
    for c in range(C):
        mask = lbl == c
        if mask.any():
            out[c] = float(cf[mask].mean())
    return out


def drw_weights(conf: dict, beta: float, active) -> dict:
    """Normalized w*_c over the active classes.

    w_c = [(1 - conf(c)) / max_c'(1 - conf(c'))]^beta; classes without a
    confidence estimate get the uniform prior weight 1 before normalization.
    If every confidence is 1 the weights degenerate to uniform.
    """
    active = sorted(active)
    if not active:
        return {}
    gaps = {c: 1.0 - conf[c] for c in active if c in conf}
    top = max(gaps.values()) if gaps else 0.0
    if top <= 0.0:
        w = {c: 1.0 for c in active}
    else:
        w = {c: (gaps[c] / top) ** beta if c in gaps else 1.0 for c in active}
    total = sum(w.values())
    return {c: w[c] / total for c in active}


def pull_loss(pairs, cfg: LossConfig):
    """Weighted per-class pulling objective: average over active classes of
    w*_c times that class's mean per-pair loss."""
    active = pairs.active_classes()
    if not active:
        raise NoActiveClasses("no class has both queries and a prototype")
    weights = pairs.drw_weights or {c: 1.0 / len(active) for c in active}
    total = Tensor(0.0)
    for c in active:
        q = pairs.queries[c]
        if cfg.pull_kind == "mse":
            term = mse_pull_batch(q, pairs.positives[c])
        else:
            term = info_nce_batch(q, pairs.positives[c], pairs.negatives[c], cfg.tau)
        total = total + weights.get(c, 0.0) * term
    return total * (1.0 / len(active))


def total_loss(src, trg, pull, lam: float):
    return Tensor._wrap(src) + Tensor._wrap(trg) + lam * Tensor._wrap(pull)
