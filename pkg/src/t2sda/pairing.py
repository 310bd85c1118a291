"""Contrastive pair construction for one training step: class-balanced query
sampling, source prototypes as positive keys, and domain-equalized negative
pools that include unreliable target features.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DegenerateVectorWarning, EmptyBatch, NoSourceNegatives
from .numerics import IGNORE, Rng, l2_normalize, percentile


def label_distribution(labels: np.ndarray, C: int) -> np.ndarray:
    """Per-class pixel fractions over the batch's valid source labels."""
    flat = np.asarray(labels).ravel()
    valid = flat[flat != IGNORE]
    if valid.size == 0:
        raise EmptyBatch("no valid source pixels in the batch")
    counts = np.bincount(valid, minlength=C).astype(np.float64)
    return counts / counts.sum()


def query_counts(p_hat: np.ndarray, n: int, C: int) -> np.ndarray:
    """n_q(c) = ceil(C * p_hat(c) * n); zero for absent classes."""
    return np.ceil(C * p_hat * n).astype(np.int64)


def compute_prototypes(embeddings: np.ndarray, labels: np.ndarray,
                       C: int, mean_of_normalized: bool = False) -> dict:
    """Per-class unit prototype from teacher embeddings of the source image.

    Default normalizes the mean of raw embeddings; `mean_of_normalized`
    averages pre-normalized embeddings instead (the pseudo-code variant).
    Classes with no pixels, or a degenerate (zero) mean, are omitted.
    """
    emb = embeddings.reshape(-1, embeddings.shape[-1])
    lbl = np.asarray(labels).ravel()
    if mean_of_normalized:
        emb = l2_normalize(emb, axis=1)
    protos = {}
    for c in range(C):
        rows = emb[lbl == c]
        if rows.shape[0] == 0:
            continue
        mean = rows.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-8:
            warnings.warn(f"class {c}: degenerate prototype, omitted",
                          DegenerateVectorWarning)
            continue
        protos[c] = mean / (norm + 1e-12)
    return protos


@dataclass
class NegativePools:
    source: dict          # class -> (k, d) unit rows with source label != c
    target: dict          # class -> (k, d) unit rows, unreliable & plabel != c
    gamma: float | None   # confidence threshold; None in DG mode


def build_negative_pools(src_emb_unit: np.ndarray, src_labels: np.ndarray,
                         trg_emb_unit, trg_plabels, trg_conf,
                         alpha: float, C: int) -> NegativePools:
    """Pools of normalized teacher embeddings per class. gamma is the
    alpha-percentile of target confidences; strictly-below is unreliable,
    ties at gamma are reliable."""
    se = src_emb_unit.reshape(-1, src_emb_unit.shape[-1])
    sl = np.asarray(src_labels).ravel()
    source = {c: se[sl != c] for c in range(C)}
    if trg_emb_unit is None:
        return NegativePools(source, {c: se[:0] for c in range(C)}, None)
    te = trg_emb_unit.reshape(-1, trg_emb_unit.shape[-1])
    tl = np.asarray(trg_plabels).ravel()
    tc = np.asarray(trg_conf).ravel()
    gamma = percentile(tc, 100.0 * alpha)
    unreliable = tc < gamma
    target = {c: te[unreliable & (tl != c)] for c in range(C)}
    return NegativePools(source, target, gamma)


def sample_negatives(pools: NegativePools, c: int, m: int,
                     gen: np.random.Generator) -> np.ndarray:
    """m/2 per domain with replacement; all-source when the target pool is
    empty (DG mode or no unreliable pixels)."""
    assert m % 2 == 0, "m must be even"
    src_pool = pools.source[c]
    if src_pool.shape[0] == 0:
        raise NoSourceNegatives(f"class {c}: empty source negative pool")
    trg_pool = pools.target.get(c)
    if trg_pool is None or trg_pool.shape[0] == 0:
        idx = gen.integers(0, src_pool.shape[0], size=m)
        return src_pool[idx]
    si = gen.integers(0, src_pool.shape[0], size=m // 2)
    ti = gen.integers(0, trg_pool.shape[0], size=m // 2)
    return np.concatenate([src_pool[si], trg_pool[ti]], axis=0)


@dataclass
class PairBatch:
    queries: dict                 # class -> Tensor (n_q, d), unit rows
    query_indices: dict           # class -> flat candidate indices sampled
    positives: dict               # class -> (d,) unit prototype
    negatives: dict               # class -> (m, d) unit rows
    drw_weights: dict = field(default_factory=dict)
    gamma: float | None = None

    def active_classes(self):
        return sorted(c for c in self.queries if c in self.positives)


def build_pair_batch(query_emb: Tensor, src_labels_ds: np.ndarray,
                     teacher_src_emb: np.ndarray,
                     teacher_trg_emb, trg_plabels_ds, trg_conf_ds,
                     alpha: float, n: int, m: int, C: int,
                     rng: Rng, step: int,
                     mean_of_normalized: bool = False) -> PairBatch:
    """Assemble one step's PairBatch.

    query_emb: student embeddings of the pseudo-target images, already
    flattened to (N, d) rows aligned with `src_labels_ds` (N labels).
    Teacher-side inputs are plain arrays (no gradients flow through them).
    Target-side inputs are None in DG mode.
    """
    lbl = np.asarray(src_labels_ds).ravel()
    p_hat = label_distribution(lbl, C)
    n_q = query_counts(p_hat, n, C)
    protos = compute_prototypes(teacher_src_emb, lbl, C,
                                mean_of_normalized=mean_of_normalized)
    src_unit = l2_normalize(teacher_src_emb.reshape(-1, teacher_src_emb.shape[-1]), axis=1)
    trg_unit = None
    if teacher_trg_emb is not None:
        trg_unit = l2_normalize(teacher_trg_emb.reshape(-1, teacher_trg_emb.shape[-1]), axis=1)
    pools = build_negative_pools(src_unit, lbl, trg_unit, trg_plabels_ds,
                                 trg_conf_ds, alpha, C)
    q_unit = query_emb.l2_normalize_rows()
    queries, indices, negatives = {}, {}, {}
    for c in range(C):
        if n_q[c] < 1 or c not in protos:
            continue
        candidates = np.flatnonzero(lbl == c)
        if candidates.size == 0:
            continue
        try:
            negs = sample_negatives(pools, c, m, rng.stream(f"negatives/{step}/{c}"))
        except NoSourceNegatives:
            continue  # single-class batch: skip this class
        pick = rng.stream(f"queries/{step}/{c}").integers(0, candidates.size, size=n_q[c])
        idx = candidates[pick]
        queries[c] = q_unit.take(idx)
        indices[c] = idx
        negatives[c] = negs
    return PairBatch(queries, indices, protos, negatives, gamma=pools.gamma)
