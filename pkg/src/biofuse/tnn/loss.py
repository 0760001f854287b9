"""Triplet loss, semi-hard mining, and the analytic gradient of the batch loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import MiningError, ShapeError, ValidationError
from .network import EmbeddingModel, backward_batch, forward_batch


@dataclass(frozen=True)
class Triplet:
    """Indices into a batch: anchor and positive share a subject, negative does not."""

    anchor: int
    positive: int
    negative: int


def triplet_loss(fa: np.ndarray, fp: np.ndarray, fn: np.ndarray, margin: float) -> float:
    """Hinge on squared Euclidean distances: max(d_ap^2 - d_an^2 + margin, 0)."""
    fa, fp, fn = (np.asarray(v, dtype=np.float64) for v in (fa, fp, fn))
    if fa.shape != fp.shape or fa.shape != fn.shape:
        raise ShapeError("triplet embeddings must share one shape")
    d_ap = float(((fa - fp) ** 2).sum())
    d_an = float(((fa - fn) ** 2).sum())
    return max(d_ap - d_an + margin, 0.0)


def pairwise_sq_dists(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    sq = (e * e).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    return np.maximum(d2, 0.0)


def mine_triplets(
    embeddings: np.ndarray, labels: Sequence[str], margin: float
) -> list[Triplet]:
    """Select one negative per anchor-positive pair, deterministically.

    Preference goes to the hardest semi-hard negative (smallest d_an within
    the band d_ap < d_an < d_ap + margin on squared distances); if the band
    is empty, the hardest negative in the batch is taken instead.
    """
    labels = np.asarray(labels, dtype=object)
    n = len(labels)
    if np.asarray(embeddings).shape[0] != n:
        raise ShapeError("one label per embedding required")
    if len(set(labels.tolist())) < 2:
        raise MiningError("batch holds a single subject; no negatives exist")
    d2 = pairwise_sq_dists(embeddings)
    same = labels[:, None] == labels[None, :]
    triplets: list[Triplet] = []
    for a in range(n):
        positives = np.flatnonzero(same[a])
        positives = positives[positives != a]
        if positives.size == 0:
            continue
        negatives = np.flatnonzero(~same[a])
        d_neg = d2[a, negatives]
        for p in positives:
            d_ap = d2[a, p]
            band = (d_neg > d_ap) & (d_neg < d_ap + margin)
            pool = negatives[band] if band.any() else negatives
            pool_d = d2[a, pool]
            neg = int(pool[int(np.argmin(pool_d))])
            triplets.append(Triplet(anchor=a, positive=int(p), negative=neg))
    if not triplets:
        raise MiningError("no subject contributes two samples; no anchor-positive pairs")
    return triplets


def _triplet_embedding_grads(
    emb: np.ndarray, triplets: Sequence[Triplet], margin: float
) -> tuple[np.ndarray, float]:
    """d(mean loss)/d(embeddings) and the mean loss; inactive triplets contribute zero."""
    d_emb = np.zeros_like(emb)
    total = 0.0
    inv = 1.0 / len(triplets)
    for t in triplets:
        fa, fp, fn = emb[t.anchor], emb[t.positive], emb[t.negative]
        ap = fa - fp
        an = fa - fn
        loss = float((ap * ap).sum() - (an * an).sum()) + margin
        if loss <= 0.0:
            continue
        total += loss
        d_emb[t.anchor] += 2.0 * inv * (fn - fp)
        d_emb[t.positive] += -2.0 * inv * ap
        d_emb[t.negative] += 2.0 * inv * an
    return d_emb, total * inv


def backward(
    model: EmbeddingModel,
    samples: Sequence,
    triplets: Sequence[Triplet],
    margin: float,
) -> tuple[np.ndarray, float]:
    """Exact gradient of the mean triplet loss w.r.t. all weights.

    Differentiates through the L2 normalization; returns (flat gradient,
    mean loss).  Triplets index into `samples`.
    """
    if not triplets:
        raise ValidationError("backward needs at least one triplet")
    from .network import stack_inputs

    branches = stack_inputs(samples, model)
    emb, cache = forward_batch(model, branches, with_cache=True)
    d_emb, mean_loss = _triplet_embedding_grads(emb, triplets, margin)
    return backward_batch(model, cache, d_emb), mean_loss
