"""Per-class feature statistics and drift compensation without old samples.

After each session the store holds one mean vector and covariance per
class. When the feature extractor moves, old prototypes go stale; the
prototype-based estimator transfers the observed drift of current-session
class prototypes onto old classes, weighted by cosine similarity measured
entirely under the previous model. Instance-based baselines (gaussian
kernel over sample drifts, k-nearest sample drifts) and a retained-sample
oracle exist for comparison; the method itself never touches old samples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import container
from . import tensor as T
from .errors import ContractError, DimensionError, ParseError


@dataclass
class ClassStats:
    proto: np.ndarray
    cov: np.ndarray
    session: int
    count: int


@dataclass
class ShiftReport:
    deltas: dict
    drifts: dict
    weights: np.ndarray
    old_ids: list
    new_ids: list
    seconds: float = 0.0


class PrototypeStore:
    """Mutable map class -> (prototype, covariance, origin session, count)."""

    def __init__(self, dim: int, cov_kind: str = "full"):
        if cov_kind not in ("full", "diag"):
            raise ContractError(f"unknown covariance kind {cov_kind!r}")
        self.dim = dim
        self.cov_kind = cov_kind
        self.stats: dict = {}

    def __len__(self):
        return len(self.stats)

    def classes(self) -> list:
        return sorted(self.stats)

    def protos(self, ids=None) -> np.ndarray:
        ids = self.classes() if ids is None else ids
        return np.stack([self.stats[c].proto for c in ids]) if ids else np.zeros((0, self.dim))

    def insert(self, c: int, stats: ClassStats):
        if c in self.stats:
            raise ContractError(f"class {c} already stored")
        if stats.proto.shape != (self.dim,):
            raise DimensionError(f"prototype for class {c} has shape {stats.proto.shape}")
        self.stats[c] = stats

    def copy(self) -> "PrototypeStore":
        out = PrototypeStore(self.dim, self.cov_kind)
        out.stats = {
            c: ClassStats(s.proto.copy(), s.cov.copy(), s.session, s.count)
            for c, s in self.stats.items()
        }
        return out

    def save(self, path) -> None:
        ids = self.classes()
        meta = [self.dim, len(ids), 0 if self.cov_kind == "full" else 1]
        arrays = {
            "index.classes": np.array(ids, dtype=np.float64),
            "index.sessions": np.array([self.stats[c].session for c in ids], dtype=np.float64),
            "index.counts": np.array([self.stats[c].count for c in ids], dtype=np.float64),
        }
        for c in ids:
            arrays[f"proto.{c}"] = self.stats[c].proto
            arrays[f"cov.{c}"] = self.stats[c].cov
        container.write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "PrototypeStore":
        meta, arrays = container.read_container(path)
        if len(meta) != 3:
            raise ParseError(f"prototype container has {len(meta)} meta ints, expected 3")
        dim, count, diag_flag = meta
        store = cls(dim, "diag" if diag_flag else "full")
        for key in ("index.classes", "index.sessions", "index.counts"):
            if key not in arrays:
                raise ParseError(f"prototype container missing {key}")
        ids = arrays["index.classes"].astype(np.int64)
        if ids.size != count:
            raise ParseError(f"index lists {ids.size} classes, header says {count}")
        for i, c in enumerate(ids):
            c = int(c)
            for key in (f"proto.{c}", f"cov.{c}"):
                if key not in arrays:
                    raise ParseError(f"prototype container missing {key}")
            store.insert(c, ClassStats(
                proto=arrays[f"proto.{c}"],
                cov=arrays[f"cov.{c}"],
                session=int(arrays["index.sessions"][i]),
                count=int(arrays["index.counts"][i]),
            ))
        return store


def embed(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Features without gradient tracking."""
    out = []
    with T.no_grad():
        for start in range(0, x.shape[0], batch):
            out.append(model.features(x[start : start + batch]).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.feature_dim))


def compute_prototypes(model, data, cov_kind: str = "full") -> dict:
    """Mean and sample covariance (ddof 1; zero when a single sample) of the
    model's features, per class."""
    if len(data) == 0:
        raise ContractError("compute_prototypes: empty data")
    feats = embed(model, data.x)
    out = {}
    for c in data.classes():
        rows = feats[data.y == c]
        if rows.shape[0] == 0:
            raise ContractError(f"class {c} has no samples")
        proto = rows.mean(axis=0)
        if rows.shape[0] == 1:
            cov = (np.zeros((rows.shape[1], rows.shape[1]))
                   if cov_kind == "full" else np.zeros(rows.shape[1]))
        elif cov_kind == "full":
            cov = np.cov(rows.T, ddof=1).reshape(rows.shape[1], rows.shape[1])
        else:
            cov = rows.var(axis=0, ddof=1)
        out[c] = ClassStats(proto=proto, cov=cov, session=0, count=rows.shape[0])
    return out


def _safe_cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-vs-row cosines; rows with zero norm contribute zero weight."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    denom = na @ nb.T
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (a @ b.T) / np.where(denom > 0, denom, 1.0), 0.0)
    return cos


def estimate_shift_prototype(store: PrototypeStore, protos_old_model: dict,
                             protos_new_model: dict,
                             clamp_negative: bool = True) -> ShiftReport:
    """Drift transfer from current-session prototypes.

    drift_i is the gap of class i's prototype between the new and old
    model; the weight of drift_i for old class c is their prototype cosine
    under the old model (clamped at zero by default). An all-zero weight
    row yields a zero shift.
    """
    if len(store) == 0:
        raise ContractError("estimate_shift_prototype: empty store")
    new_ids = sorted(protos_old_model)
    if not new_ids:
        raise ContractError("estimate_shift_prototype: no new classes")
    if sorted(protos_new_model) != new_ids:
        raise ContractError("old-model and new-model prototype keys disagree")
    old_ids = store.classes()
    start = time.perf_counter()
    p_old = np.stack([np.asarray(protos_old_model[i], dtype=np.float64) for i in new_ids])
    p_new = np.stack([np.asarray(protos_new_model[i], dtype=np.float64) for i in new_ids])
    if p_old.shape[1] != store.dim:
        raise DimensionError(f"prototype dim {p_old.shape[1]} vs store dim {store.dim}")
    drifts = p_new - p_old
    weights = _safe_cosine_matrix(store.protos(old_ids), p_old)
    if clamp_negative:
        weights = np.maximum(weights, 0.0)
    totals = weights.sum(axis=1, keepdims=True)
    live = totals != 0.0
    deltas = np.where(live, (weights @ drifts) / np.where(live, totals, 1.0), 0.0)
    seconds = time.perf_counter() - start
    return ShiftReport(
        deltas={c: deltas[i] for i, c in enumerate(old_ids)},
        drifts={i: drifts[j] for j, i in enumerate(new_ids)},
        weights=weights, old_ids=old_ids, new_ids=new_ids, seconds=seconds,
    )


def median_pairwise_distance(embeddings: np.ndarray, cap: int = 256) -> float:
    """Bandwidth heuristic; evenly strided subsample keeps this O(cap^2)."""
    n = embeddings.shape[0]
    rows = embeddings[:: max(1, n // cap)][:cap]
    diff = rows[:, None, :] - rows[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    upper = dist[np.triu_indices(rows.shape[0], k=1)]
    return float(np.median(upper)) if upper.size else 1.0


def estimate_shift_sample(store: PrototypeStore, emb_old: np.ndarray,
                          emb_new: np.ndarray, bandwidth: float) -> ShiftReport:
    """Kernel-weighted mean of per-sample drifts, one weight set per old
    class: w_i = exp(-dist(e_i, proto_c)^2 / (2 bandwidth^2)). Each row is
    rescaled by its largest kernel value before exponentiating; the
    normalized combination is unchanged and never underflows to zero."""
    if bandwidth <= 0:
        raise ContractError(f"bandwidth must be > 0, got {bandwidth}")
    emb_old = np.asarray(emb_old, dtype=np.float64)
    emb_new = np.asarray(emb_new, dtype=np.float64)
    if emb_old.shape != emb_new.shape:
        raise DimensionError(f"embedding shapes differ: {emb_old.shape} vs {emb_new.shape}")
    if len(store) == 0:
        raise ContractError("estimate_shift_sample: empty store")
    old_ids = store.classes()
    start = time.perf_counter()
    protos = store.protos(old_ids)
    sq = np.maximum(
        np.square(emb_old).sum(axis=1)[None, :]
        + np.square(protos).sum(axis=1)[:, None]
        - 2.0 * protos @ emb_old.T,
        0.0,
    )
    sq -= sq.min(axis=1, keepdims=True)
    weights = np.exp(-sq / (2.0 * bandwidth * bandwidth))
    drift = emb_new - emb_old
    totals = weights.sum(axis=1, keepdims=True)
    deltas = (weights @ drift) / totals
    seconds = time.perf_counter() - start
    return ShiftReport(
        deltas={c: deltas[i] for i, c in enumerate(old_ids)},
        drifts={i: drift[i] for i in range(drift.shape[0])},
        weights=weights, old_ids=old_ids, new_ids=list(range(drift.shape[0])),
        seconds=seconds,
    )


def estimate_shift_knearest(store: PrototypeStore, emb_old: np.ndarray,
                            emb_new: np.ndarray, k: int) -> ShiftReport:
    """Mean drift of the k samples nearest (euclidean, old model) to each
    old prototype."""
    emb_old = np.asarray(emb_old, dtype=np.float64)
    emb_new = np.asarray(emb_new, dtype=np.float64)
    if emb_old.shape != emb_new.shape:
        raise DimensionError(f"embedding shapes differ: {emb_old.shape} vs {emb_new.shape}")
    n = emb_old.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    if len(store) == 0:
        raise ContractError("estimate_shift_knearest: empty store")
    old_ids = store.classes()
    start = time.perf_counter()
    protos = store.protos(old_ids)
    sq = (np.square(emb_old).sum(axis=1)[None, :]
          + np.square(protos).sum(axis=1)[:, None]
          - 2.0 * protos @ emb_old.T)
    drift = emb_new - emb_old
    weights = np.zeros((len(old_ids), n))
    deltas = {}
    for i, c in enumerate(old_ids):
        nearest = np.argpartition(sq[i], k - 1)[:k] if k < n else np.arange(n)
        weights[i, nearest] = 1.0 / k
        deltas[c] = drift[np.sort(nearest)].mean(axis=0)
    seconds = time.perf_counter() - start
    return ShiftReport(
        deltas=deltas,
        drifts={i: drift[i] for i in range(n)},
        weights=weights, old_ids=old_ids, new_ids=list(range(n)), seconds=seconds,
    )


def update_prototypes(store: PrototypeStore, report: ShiftReport | None,
                      new_stats: dict, session: int) -> PrototypeStore:
    """Shift every stored old prototype by its estimated delta (covariances
    stay as stored), then insert the current session's fresh statistics."""
    old_ids = store.classes()
    if old_ids:
        if report is None:
            raise ContractError("update_prototypes: shift report required for old classes")
        missing = [c for c in old_ids if c not in report.deltas]
        if missing:
            raise ContractError(f"shift report missing old classes {missing[:5]}")
        for c in old_ids:
            store.stats[c].proto = store.stats[c].proto + report.deltas[c]
    for c in sorted(new_stats):
        s = new_stats[c]
        store.insert(c, ClassStats(s.proto.copy(), s.cov.copy(), session, s.count))
    return store


def oracle_true_shift(retained: dict, old_model, new_model) -> dict:
    """Ground-truth per-class drift from retained old samples. Harness-only
    diagnostic; estimators never see these samples."""
    out = {}
    for c in sorted(retained):
        x = np.asarray(retained[c], dtype=np.float64)
        out[c] = embed(new_model, x).mean(axis=0) - embed(old_model, x).mean(axis=0)
    return out
