"""Unified classifier retraining from per-class gaussians.

Each stored class becomes N(prototype, covariance); sampled features train
every head row jointly with cross-entropy (no session masking). With
``normalize`` and a cosine head, features and rows are L2-normalized and
logits carry the same scale factor used during backbone training --
otherwise raw dot products are used. The backbone is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .prototypes import PrototypeStore
from .rng import RngState, cholesky, sample_gaussian
from .tensor import Tensor
from .training import CosineHead, Schedule, Sgd, cross_entropy


@dataclass
class AlignmentConfig:
    samples_per_class: int = 256
    epochs: int = 5
    lr: float = 0.01
    normalize: bool = True
    logit_scale: float = 20.0
    batch_size: int = 128
    momentum: float = 0.9
    jitter: float = 1e-6

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ContractError("samples_per_class must be >= 1")
        if self.epochs < 0 or self.lr <= 0:
            raise ContractError("epochs must be >= 0 and lr > 0")


def sample_features(store: PrototypeStore, cfg: AlignmentConfig, rng: RngState):
    """Draw samples_per_class features per stored class; singular
    covariances are rescued by the cholesky jitter ladder."""
    ids = store.classes()
    if not ids:
        raise ContractError("sample_features: empty store")
    blocks, labels = [], []
    for c in ids:
        stats = store.stats[c]
        if store.cov_kind == "diag":
            factor = np.diag(np.sqrt(np.maximum(stats.cov, 0.0)))
        else:
            factor, _ = cholesky(stats.cov, cfg.jitter)
        blocks.append(sample_gaussian(rng, stats.proto, factor, cfg.samples_per_class))
        labels.append(np.full(cfg.samples_per_class, c, dtype=np.int64))
    return np.concatenate(blocks), np.concatenate(labels), ids


def fit_head(head: CosineHead, feats: np.ndarray, labels: np.ndarray,
             cfg: AlignmentConfig, rng: RngState) -> list:
    """Joint cross-entropy over all head rows; returns the epoch loss curve."""
    pos = {c: i for i, c in enumerate(head.class_ids)}
    try:
        targets = np.array([pos[int(c)] for c in labels], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"sampled class {exc.args[0]} has no head row") from None
    normalize = cfg.normalize and head.kind == "cosine"
    w = Tensor(head.weights.copy(), requires_grad=True)
    opt = Sgd({"head.w": w}, cfg.momentum)
    schedule = Schedule(lr0=cfg.lr, momentum=cfg.momentum)
    order_rng = rng.spawn("order")
    n = feats.shape[0]
    losses = []
    for epoch in range(cfg.epochs):
        lr = schedule.lr_at(epoch, cfg.epochs)
        perm = order_rng.permutation(n)
        batch_losses, batch_sizes = [], []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            v = Tensor(feats[idx])
            if normalize:
                logits = T.mul(T.matmul(T.l2_normalize(v),
                                        T.swapaxes(T.l2_normalize(w), 0, 1)),
                               cfg.logit_scale)
            else:
                logits = T.matmul(v, T.swapaxes(w, 0, 1))
            loss = cross_entropy(logits, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            batch_losses.append(float(loss.data) * idx.size)
            batch_sizes.append(idx.size)
        losses.append(float(np.sum(batch_losses) / np.sum(batch_sizes)))
    head.weights = w.data
    return losses


def retrain_unified_classifier(head: CosineHead, store: PrototypeStore,
                               cfg: AlignmentConfig, rng: RngState) -> CosineHead:
    """Rebuild the decision boundaries of every class seen so far from the
    (possibly shift-compensated) store. Mutates and returns the head."""
    missing = [c for c in head.class_ids if c not in store.stats]
    if missing:
        raise ContractError(f"store missing head classes {missing[:5]}")
    if cfg.epochs == 0:
        return head
    feats, labels, _ = sample_features(store, cfg, rng.spawn("sample"))
    fit_head(head, feats, labels, cfg, rng.spawn("fit"))
    return head


def classifier_align_baseline(head: CosineHead, store_without_shift: PrototypeStore,
                              cfg: AlignmentConfig, rng: RngState) -> CosineHead:
    """Identical optimization consuming a store whose old prototypes were
    never shift-compensated."""
    return retrain_unified_classifier(head, store_without_shift, cfg, rng)
