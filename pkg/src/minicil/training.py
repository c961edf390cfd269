"""Per-session optimization: cosine-margin loss over the current session's
classifier rows only, optional feature-distillation constraint, SGD with a
cosine-annealed schedule, parameter-sensitivity diagnostics, and linear
probing of a frozen feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .rng import RngState
from .tensor import Tensor


@dataclass
class Schedule:
    """Cosine-annealed SGD schedule; lr reaches exactly 0 at the last epoch."""

    lr0: float = 0.01
    epochs_first: int = 20
    epochs_later: int = 10
    batch_size: int = 64
    momentum: float = 0.9

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        if total_epochs <= 1:
            return self.lr0
        return self.lr0 * 0.5 * (1.0 + np.cos(np.pi * epoch / (total_epochs - 1)))


@dataclass
class LossConfig:
    scale: float = 20.0
    margin: float = 0.1
    kd_weight: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ContractError(f"loss scale must be positive, got {self.scale}")
        if self.margin < 0 or self.kd_weight < 0:
            raise ContractError("margin and kd_weight must be >= 0")


class Sgd:
    """Plain SGD with optional momentum over a named parameter dict."""

    def __init__(self, params: dict, momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; targets are row-wise class positions."""
    n = logits.shape[0]
    lse = T.logsumexp(logits, axis=-1)
    picked = logits[np.arange(n), np.asarray(targets, dtype=np.int64)]
    return T.tmean(T.sub(lse, picked))


class CosineHead:
    """Growing classifier. Cosine kind scores L2-normalized features against
    L2-normalized rows; linear kind uses raw dot products."""

    def __init__(self, dim: int, kind: str = "cosine"):
        if kind not in ("cosine", "linear"):
            raise ContractError(f"unknown head kind {kind!r}")
        self.dim = dim
        self.kind = kind
        self.weights = np.zeros((0, dim), dtype=np.float64)
        self.class_ids: list[int] = []
        self.sessions: list[int] = []

    def __len__(self):
        return len(self.class_ids)

    def add_classes(self, class_ids, session: int, rng: RngState):
        known = set(self.class_ids)
        fresh = [c for c in sorted(class_ids)]
        for c in fresh:
            if c in known:
                raise ContractError(f"class {c} already present in head")
        rows = rng.normal((len(fresh), self.dim)) * 0.01
        self.weights = np.concatenate([self.weights, rows], axis=0)
        self.class_ids.extend(fresh)
        self.sessions.extend([session] * len(fresh))

    def rows_for(self, class_ids) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([index[c] for c in class_ids], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"class {exc.args[0]} has no head row") from None

    def logits(self, features: np.ndarray) -> np.ndarray:
        if self.kind == "cosine":
            f = features / np.linalg.norm(features, axis=-1, keepdims=True)
            w = self.weights / np.linalg.norm(self.weights, axis=-1, keepdims=True)
            return f @ w.T
        return features @ self.weights.T

    def predict(self, features: np.ndarray) -> np.ndarray:
        picks = self.logits(features).argmax(axis=1)
        return np.array(self.class_ids, dtype=np.int64)[picks]

    def clone(self) -> "CosineHead":
        out = CosineHead(self.dim, self.kind)
        out.weights = self.weights.copy()
        out.class_ids = list(self.class_ids)
        out.sessions = list(self.sessions)
        return out


def cosine_margin_loss(features: Tensor, labels, head: CosineHead, session_classes,
                       cfg: LossConfig, weights: Tensor | None = None) -> Tensor:
    """Margin softmax over the current session's rows only.

    Rows of classes outside ``session_classes`` never enter the graph, so
    their gradient is identically zero. ``weights`` may pass the live
    training tensor for the full head matrix; defaults to a frozen view.
    """
    labels = np.asarray(labels, dtype=np.int64)
    sess = sorted(session_classes)
    pos = {c: i for i, c in enumerate(sess)}
    if any(int(y) not in pos for y in labels):
        bad = next(int(y) for y in labels if int(y) not in pos)
        raise ContractError(f"label {bad} outside session classes {sess}")
    w_full = weights if weights is not None else Tensor(head.weights)
    rows = T.take_rows(w_full, head.rows_for(sess))
    targets = np.array([pos[int(y)] for y in labels], dtype=np.int64)
    if head.kind == "cosine":
        cos = T.matmul(T.l2_normalize(features), T.swapaxes(T.l2_normalize(rows), 0, 1))
        onehot = np.zeros((labels.size, len(sess)))
        onehot[np.arange(labels.size), targets] = 1.0
        logits = T.sub(T.mul(cos, cfg.scale), Tensor(onehot * (cfg.scale * cfg.margin)))
    else:
        # ablation head: raw dot products, margin/scale are cosine-space knobs
        logits = T.matmul(features, T.swapaxes(rows, 0, 1))
    return cross_entropy(logits, targets)


def kd_feature_loss(features_new: Tensor, features_old) -> Tensor:
    """Mean squared gap to a frozen feature snapshot."""
    ref = features_old if isinstance(features_old, Tensor) else Tensor(features_old)
    if features_new.shape != ref.shape:
        raise DimensionError(
            f"kd_feature_loss: shapes {features_new.shape} vs {ref.shape}"
        )
    diff = T.sub(features_new, ref)
    return T.tmean(T.mul(diff, diff))


@dataclass
class TrainResult:
    epoch_losses: list = field(default_factory=list)


def train_session(model, head: CosineHead, train_set, session_classes, session_index: int,
                  cfg: LossConfig, schedule: Schedule, rng: RngState,
                  kd_model=None, train_pet: bool = True) -> TrainResult:
    """One incremental session: tunes the attachment plus the new head rows.

    Earlier head rows and the frozen backbone are untouched, byte for byte.
    """
    x, y = train_set.x, train_set.y
    if x.shape[0] == 0:
        raise ContractError("train_session: empty session data")
    overlap = set(head.class_ids) & set(session_classes)
    if overlap:
        raise ContractError(f"session classes {sorted(overlap)} already trained")
    head.add_classes(session_classes, session_index, rng.spawn("head-init"))

    w = Tensor(head.weights.copy(), requires_grad=True)
    params = {"head.w": w}
    if train_pet:
        params.update(model.trainable())
    if cfg.kd_weight > 0 and kd_model is None and session_index > 1:
        raise ContractError("kd_weight > 0 requires a snapshot model")

    epochs = schedule.epochs_first if session_index == 1 else schedule.epochs_later
    opt = Sgd(params, schedule.momentum)
    result = TrainResult()
    order_rng = rng.spawn("batch-order")
    n = x.shape[0]
    for epoch in range(epochs):
        lr = schedule.lr_at(epoch, epochs)
        perm = order_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, schedule.batch_size):
            idx = perm[start : start + schedule.batch_size]
            feats = model.features(x[idx])
            loss = cosine_margin_loss(feats, y[idx], head, session_classes, cfg, weights=w)
            if cfg.kd_weight > 0 and kd_model is not None:
                with T.no_grad():
                    ref = kd_model.features(x[idx]).data
                loss = T.add(loss, T.mul(kd_feature_loss(feats, ref), cfg.kd_weight))
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            batch_losses.append(float(loss.data))
        result.epoch_losses.append(float(np.mean(batch_losses)))
    head.weights = w.data
    return result


@dataclass
class SensitivityReport:
    """First-order loss change per parameter group under a one-step update."""

    epsilon: float
    values: dict
    ranking: list

    def vector(self, group_order=None) -> np.ndarray:
        names = group_order if group_order is not None else sorted(self.values)
        return np.array([self.values[g] for g in names])


def parameter_sensitivity(model, head: CosineHead, data_set, session_classes,
                          cfg: LossConfig, epsilon: float) -> SensitivityReport:
    """Per-group sensitivity -epsilon * sum(g^2) of the session loss."""
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    params = model.trainable()
    totals = {name: 0.0 for name in params}
    x, y = data_set.x, data_set.y
    n = x.shape[0]
    chunk = 256
    for start in range(0, n, chunk):
        xb, yb = x[start : start + chunk], y[start : start + chunk]
        feats = model.features(xb)
        loss = T.mul(cosine_margin_loss(feats, yb, head, session_classes, cfg),
                     xb.shape[0] / n)
        grads = T.backward(loss, params)
        for name, g in grads.items():
            totals[name] = totals.get(name, 0.0) + g
    values = {name: -epsilon * float(np.sum(np.square(g))) for name, g in totals.items()}
    ranking = sorted(values, key=lambda k: abs(values[k]), reverse=True)
    return SensitivityReport(epsilon=epsilon, values=values, ranking=ranking)


def linear_probe(model, train_set, test_set, schedule: Schedule, rng: RngState) -> float:
    """Train a fresh linear head on frozen features; top-1 accuracy held out."""
    if train_set.x.shape[0] == 0 or test_set.x.shape[0] == 0:
        raise ContractError("linear_probe: empty data")
    feats_train = _batched_features(model, train_set.x)
    feats_test = _batched_features(model, test_set.x)
    classes = sorted(set(int(c) for c in train_set.y))
    pos = {c: i for i, c in enumerate(classes)}
    targets = np.array([pos[int(c)] for c in train_set.y], dtype=np.int64)

    w = Tensor(rng.normal((len(classes), feats_train.shape[1])) * 0.01, requires_grad=True)
    b = Tensor(np.zeros(len(classes)), requires_grad=True)
    opt = Sgd({"w": w, "b": b}, schedule.momentum)
    order_rng = rng.spawn("probe-order")
    n = feats_train.shape[0]
    for epoch in range(schedule.epochs_first):
        lr = schedule.lr_at(epoch, schedule.epochs_first)
        perm = order_rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = perm[start : start + schedule.batch_size]
            logits = T.add(T.matmul(Tensor(feats_train[idx]), T.swapaxes(w, 0, 1)), b)
            loss = cross_entropy(logits, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
    logits = feats_test @ w.data.T + b.data
    preds = np.array(classes, dtype=np.int64)[logits.argmax(axis=1)]
    return float(np.mean(preds == test_set.y))


def _batched_features(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, x.shape[0], batch):
            out.append(model.features(x[start : start + batch]).data)
    return np.concatenate(out, axis=0)
