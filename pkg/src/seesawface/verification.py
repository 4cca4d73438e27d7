"""Pair verification: preprocessing, cosine scoring and k-fold best-threshold accuracy."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .architectures import ModelGraph, forward_embed

PIXEL_MEAN = 127.5
PIXEL_SCALE = 128.0


def preprocess(raw: np.ndarray, size: tuple[int, int] = (112, 112)) -> np.ndarray:
    """8-bit HxWx3 image -> float32 (3, H, W) in [-0.99609375, 0.99609375]."""
    raw = np.asarray(raw)
    if raw.shape != (*size, 3):
        raise ValueError(f"expected an image of shape {(*size, 3)}, got {raw.shape}")
    if raw.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {raw.dtype}")
    return ((raw.astype(np.float32) - PIXEL_MEAN) / PIXEL_SCALE).transpose(2, 0, 1)


def preprocess_batch(raws, size=(112, 112)) -> np.ndarray:
    return np.stack([preprocess(r, size) for r in raws])


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine score is undefined for a zero vector")
    return float(np.clip(np.dot(e1, e2) / (n1 * n2), -1.0, 1.0))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if (norm == 0).any():
        raise ValueError("cannot L2-normalize a zero embedding")
    return x / norm


def best_threshold(scores: np.ndarray, same: np.ndarray) -> tuple[float, float]:
    """Threshold maximizing accuracy of ``score >= t`` over the given pairs.

    Candidates are midpoints between consecutive distinct scores, plus
    ``-inf`` (everything "same") and ``+inf`` (everything "different").
    Held-out scores that land between two training scores are therefore
    split at the middle of the gap.  Ties go to the smallest candidate.
    Returns ``(threshold, accuracy)``.
    """
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], same[order].astype(np.int64)
    n = len(s)
    # k = number of pairs predicted "different" (those below the threshold)
    diff_below = np.concatenate([[0], np.cumsum(1 - y)])
    same_above = y.sum() - np.concatenate([[0], np.cumsum(y)])
    correct = diff_below + same_above
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[1:] > s[:-1]
    k = int(np.flatnonzero(valid)[np.argmax(correct[valid])])
    if k == 0:
        thr = float("-inf")
    elif k == n:
        thr = float("inf")
    else:
        lo, hi = float(s[k - 1]), float(s[k])
        thr = lo + (hi - lo) / 2
        if thr <= lo:  # adjacent floats: no representable midpoint
            thr = hi
    return thr, correct[k] / n


@dataclass
class KFoldResult:
    accuracy: float
    fold_accuracies: list[float]
    thresholds: list[float]


def kfold_accuracy(scores, labels, fold_count: int = 10) -> KFoldResult:
    """Contiguous k-fold protocol: pick the threshold on k-1 folds, score the held-out fold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n = len(scores)
    if len(labels) != n:
        raise ValueError(f"{n} scores but {len(labels)} labels")
    if n < fold_count:
        raise ValueError(f"need at least {fold_count} pairs for {fold_count}-fold evaluation, got {n}")
    if n % fold_count:
        raise ValueError(f"pair count {n} is not divisible by fold_count {fold_count}")
    folds = np.arange(n) // (n // fold_count)
    accs, thrs = [], []
    for f in range(fold_count):
        test = folds == f
        thr, _ = best_threshold(scores[~test], labels[~test])
        pred = scores[test] >= thr
        accs.append(float(np.mean(pred == labels[test])))
        thrs.append(thr)
    return KFoldResult(float(np.mean(accs)), accs, thrs)


@dataclass
class PairSet:
    """Labelled image pairs; images are pre-aligned 8-bit HxWx3 arrays."""

    pairs: list[tuple[np.ndarray, np.ndarray, bool]] = field(default_factory=list)
    fold_count: int = 10

    def __len__(self):
        return len(self.pairs)


@dataclass
class VerificationReport:
    accuracy: float
    fold_accuracies: list[float]
    thresholds: list[float]
    scores: np.ndarray
    labels: np.ndarray


def _digest(img: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(img).tobytes()).digest()


def canonical_order(pairs) -> list[int]:
    """Order pairs by content digest so fold membership ignores manifest order."""
    keys = []
    for a, b, same in pairs:
        da, db = sorted((_digest(a), _digest(b)))
        keys.append(da + db + bytes([int(same)]))
    return sorted(range(len(pairs)), key=keys.__getitem__)


def embed_images(model: ModelGraph, images, batch_size: int = 64) -> np.ndarray:
    size = model.input_shape[1:]
    out = []
    for s in range(0, len(images), batch_size):
        batch = preprocess_batch(images[s : s + batch_size], size)
        out.append(forward_embed(model, batch, "infer"))
    return np.concatenate(out) if out else np.zeros((0, model.embedding_dim))


def evaluate_model(model: ModelGraph, pairset: PairSet, batch_size: int = 64) -> VerificationReport:
    """preprocess -> embed (infer) -> L2-normalize -> cosine -> k-fold accuracy."""
    if len(pairset) < pairset.fold_count:
        raise ValueError(
            f"need at least {pairset.fold_count} pairs for {pairset.fold_count}-fold evaluation"
        )
    order = canonical_order(pairset.pairs)
    pairs = [pairset.pairs[i] for i in order]
    emb_a = l2_normalize(embed_images(model, [p[0] for p in pairs], batch_size).astype(np.float64))
    emb_b = l2_normalize(embed_images(model, [p[1] for p in pairs], batch_size).astype(np.float64))
    scores = np.clip((emb_a * emb_b).sum(axis=1), -1.0, 1.0)
    labels = np.array([p[2] for p in pairs], dtype=bool)
    res = kfold_accuracy(scores, labels, pairset.fold_count)
    return VerificationReport(res.accuracy, res.fold_accuracies, res.thresholds, scores, labels)
