"""ArcFace metric learning with SGD + momentum and a step LR schedule."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import serialization
from .architectures import ModelGraph, format_spec

log = logging.getLogger(__name__)


@dataclass
class ArcFaceHead:
    """Class-centre matrix (num_classes, dim) plus scale ``s`` and angular margin ``m``."""

    weights: np.ndarray
    scale: float = 64.0
    margin: float = 0.5

    def __post_init__(self):
        if not 0 <= self.margin < math.pi:
            raise ValueError(f"margin must lie in [0, pi), got {self.margin}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @classmethod
    def create(cls, num_classes: int, dim: int = 512, seed: int = 0, dtype=np.float32, **kw):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((num_classes, dim)) * 0.01
        return cls(w.astype(dtype), **kw)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class ArcFaceOutput:
    loss: float
    logits: np.ndarray
    cosine: np.ndarray
    grad_embeddings: np.ndarray
    grad_weights: np.ndarray


def _normalize_rows(x: np.ndarray, what: str):
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if (norm == 0).any():
        row = int(np.flatnonzero(norm[:, 0] == 0)[0])
        raise ValueError(f"{what} row {row} has zero norm; cannot normalize")
    return x / norm, norm


def arcface_logits(cosine: np.ndarray, labels: np.ndarray, scale: float, margin: float):
    """Return ``(logits, dlogit_target/dcos_target)``.

    Target logit is ``s*cos(theta+m)``; when ``theta + m > pi`` the
    monotone fallback ``s*(cos(theta) - m*sin(m))`` is used instead.
    """
    rows = np.arange(len(labels))
    c = cosine[rows, labels]
    sin_t = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    cos_m, sin_m = math.cos(margin), math.sin(margin)
    phi = c * cos_m - sin_t * sin_m
    dphi = cos_m + sin_m * c / np.maximum(sin_t, 1e-12)
    # theta + m > pi  <=>  cos(theta) < cos(pi - m)
    fallback = c < math.cos(math.pi - margin)
    phi = np.where(fallback, c - margin * sin_m, phi)
    dphi = np.where(fallback, 1.0, dphi)
    logits = scale * cosine
    logits[rows, labels] = scale * phi
    return logits, scale * dphi


def arcface_loss(embeddings: np.ndarray, labels: np.ndarray, head: ArcFaceHead) -> ArcFaceOutput:
    """Mean ArcFace cross-entropy and its gradients w.r.t. embeddings and class weights."""
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[1] != head.weights.shape[1]:
        raise ValueError(
            f"embeddings must be (N, {head.weights.shape[1]}), got {embeddings.shape}"
        )
    if labels.shape != (embeddings.shape[0],):
        raise ValueError(f"labels must be ({embeddings.shape[0]},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise ValueError(f"label out of range [0, {head.num_classes})")
    e_hat, e_norm = _normalize_rows(embeddings, "embedding")
    w_hat, w_norm = _normalize_rows(head.weights, "class weight")
    cosine = np.clip(e_hat @ w_hat.T, -1.0, 1.0)
    logits, dtarget = arcface_logits(cosine, labels, head.scale, head.margin)

    n = len(labels)
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[rows, labels]))

    dlogits = np.exp(shifted - log_z[:, None])
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    dcos = head.scale * dlogits
    dcos[rows, labels] = dlogits[rows, labels] * dtarget

    de_hat = dcos @ w_hat
    dw_hat = dcos.T @ e_hat
    de = (de_hat - e_hat * (e_hat * de_hat).sum(axis=1, keepdims=True)) / e_norm
    dw = (dw_hat - w_hat * (w_hat * dw_hat).sum(axis=1, keepdims=True)) / w_norm
    return ArcFaceOutput(loss, logits, cosine, de.astype(embeddings.dtype),
                         dw.astype(head.weights.dtype))


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 16
    momentum: float = 0.9
    initial_lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (9, 13, 15)
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {d}")
        if d and (d[0] < 1 or d[-1] >= self.epochs):
            raise ValueError(f"lr_decay_epochs {d} must lie in [1, {self.epochs})")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant LR: divided by ``1/decay_factor`` at each decay epoch reached."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    k = sum(epoch >= d for d in cfg.lr_decay_epochs)
    # divide by the exact integer power so 0.1 -> 0.01 -> 0.001 stay exact decimals
    return cfg.initial_lr / (1.0 / cfg.decay_factor) ** k


def sgd_momentum_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float, momentum: float,
                      weight_decay: float = 0.0) -> None:
    """In-place classical momentum: ``v = mu*v + g``; ``p -= lr*v``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in {name!r} ({bad} entries)")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= (lr * v).astype(p.dtype, copy=False)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    accuracy: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].accuracy if self.epochs else float("nan")


def checkpoint_records(model: ModelGraph, head: ArcFaceHead | None = None):
    records = dict(model.state_dict())
    if head is not None:
        records["arcface.weight"] = head.weights
    return records


def save_checkpoint(path: str | Path, model: ModelGraph, head: ArcFaceHead | None = None,
                    meta: dict | None = None) -> Path:
    """Write ``path`` (SSFN weights) and a ``.json`` sidecar next to it."""
    path = Path(path)
    serialization.save(path, checkpoint_records(model, head))
    sidecar = {"model": model.name, "spec": format_spec(model.spec), **(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def fit(model: ModelGraph, images: np.ndarray, labels: np.ndarray, head: ArcFaceHead,
        cfg: TrainConfig, checkpoint_dir: str | Path | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainingLog:
    """Train ``model`` and ``head`` on preprocessed images (N, 3, H, W) with integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    params["arcface.weight"] = head.weights
    velocity: dict[str, np.ndarray] = {}
    out = TrainingLog()
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(len(images))
        starts = list(range(0, len(order), cfg.batch_size))
        # BN needs two samples to form batch statistics; fold a lone tail into the previous batch
        if len(starts) > 1 and len(order) - starts[-1] < 2:
            starts.pop()
        loss_sum, correct, seen = 0.0, 0, 0
        for i, s in enumerate(starts):
            end = starts[i + 1] if i + 1 < len(starts) else len(order)
            idx = order[s:end]
            x, y = images[idx], labels[idx]
            model.zero_grad()
            emb = model.forward(x, train=True)
            res = arcface_loss(emb, y, head)
            model.backward(res.grad_embeddings)
            grads = dict(model.named_grads())
            grads["arcface.weight"] = res.grad_weights
            sgd_momentum_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += res.loss * len(idx)
            correct += int((res.cosine.argmax(axis=1) == y).sum())
            seen += len(idx)
        rec = EpochRecord(epoch, lr, loss_sum / seen, correct / seen)
        out.epochs.append(rec)
        log.info("epoch %d lr %g loss %.4f acc %.4f", epoch, lr, rec.loss, rec.accuracy)
        if checkpoint_dir is not None:
            path = checkpoint_dir / f"epoch_{epoch + 1:02d}.ssfn"
            save_checkpoint(path, model, head, asdict(rec))
            out.checkpoints.append(str(path))
        if on_epoch is not None:
            on_epoch(rec)
    return out
