"""Synthetic incremental streams and embedding-file ingestion.

Classes are gaussian cluster mixtures in input space. Incremental-phase
classes live in a shifted domain: one shared rotation-plus-translation of
the input space (magnitude set by ``drift_intensity``) plus a smaller
per-class residual transform. The shared part separates the incremental
regime from what the backbone was pretrained on and is expressible by a
low-rank residual correction but not by per-dimension scaling; the
residual part keeps later sessions genuinely new, so continued tuning
helps and old-class features keep drifting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError
from .rng import RngState


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ContractError(
                f"sample/label count mismatch: {self.x.shape[0]} vs {self.y.shape[0]}"
            )

    def __len__(self):
        return self.x.shape[0]

    def classes(self) -> list:
        return sorted(int(c) for c in set(self.y.tolist()))

    def for_class(self, c: int) -> np.ndarray:
        return self.x[self.y == c]

    def subset(self, indices) -> "LabeledSet":
        return LabeledSet(self.x[indices], self.y[indices])


@dataclass
class SplitSet:
    train: LabeledSet
    test: LabeledSet


@dataclass
class Session:
    train: LabeledSet
    test: LabeledSet
    labels: tuple


@dataclass
class SessionStream:
    sessions: list

    def __post_init__(self):
        seen: set = set()
        for i, s in enumerate(self.sessions, start=1):
            overlap = seen & set(s.labels)
            if overlap:
                raise ContractError(
                    f"session {i} reuses labels {sorted(overlap)} from earlier sessions"
                )
            seen |= set(s.labels)

    def __len__(self):
        return len(self.sessions)

    def cumulative_test(self, upto: int) -> LabeledSet:
        parts = self.sessions[:upto]
        return LabeledSet(
            np.concatenate([s.test.x for s in parts], axis=0),
            np.concatenate([s.test.y for s in parts], axis=0),
        )


@dataclass
class SyntheticSpec:
    base_classes: int = 10
    cil_classes: int = 40
    input_dim: int = 64
    clusters_per_class: int = 2
    cluster_std: float = 1.0
    separation: float = 6.0
    train_per_class: int = 100
    test_per_class: int = 50
    drift_intensity: float = 0.8
    drift_chunk: int = 16  # width of the chunk-repeated part of the shared drift

    def __post_init__(self):
        if self.separation <= 0:
            raise ContractError(f"separation must be > 0, got {self.separation}")
        for name in ("base_classes", "cil_classes", "input_dim", "clusters_per_class",
                     "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.cluster_std <= 0 or self.drift_intensity < 0:
            raise ContractError("cluster_std must be > 0 and drift_intensity >= 0")
        if self.drift_intensity > 0 and self.input_dim % self.drift_chunk != 0:
            raise ContractError(
                f"input_dim {self.input_dim} not divisible by drift_chunk {self.drift_chunk}"
            )


@dataclass
class GeneratedData:
    base: LabeledSet
    cil: SplitSet
    truth: dict = field(default_factory=dict)


def _unit(rng: RngState, dim: int) -> np.ndarray:
    v = rng.normal(dim)
    return v / np.linalg.norm(v)


def _plane_rotation(rng: RngState, dim: int, angle: float):
    u = _unit(rng, dim)
    w = rng.normal(dim)
    w -= (w @ u) * u
    v = w / np.linalg.norm(w)

    def rotate(x: np.ndarray) -> np.ndarray:
        cu, cv = x @ u, x @ v
        return (x
                + (np.cos(angle) - 1.0) * (np.outer(cu, u) + np.outer(cv, v))
                + np.sin(angle) * (np.outer(cu, v) - np.outer(cv, u)))

    return rotate, u, v


def generate_synthetic(spec: SyntheticSpec, seed: int) -> GeneratedData:
    """Pure function of (spec, seed); returns base set, incremental split,
    and the ground-truth cluster parameters used."""
    rng = RngState(seed)
    d = spec.input_dim
    truth = {"classes": {}}

    if spec.drift_intensity > 0:
        domain_rng = rng.spawn("domain")
        # chunk-repeated rotation: induces the same linear map on every
        # token embedding, so one session's classes suffice to correct it;
        # cross-chunk plane rotations: mix dimensions across chunks, so no
        # single session can identify the whole transform
        chunk_rng = domain_rng.spawn("chunk")
        chunk_rotations = [
            _plane_rotation(chunk_rng, spec.drift_chunk,
                            spec.drift_intensity * (0.8 + 0.2 * chunk_rng.uniform(1)[0]))[0]
            for _ in range(2)
        ]
        cross_rotations = [
            _plane_rotation(domain_rng, d,
                            spec.drift_intensity * (0.6 + 0.4 * domain_rng.uniform(1)[0]))[0]
            for _ in range(2)
        ]
        domain_shift = 0.5 * spec.drift_intensity * spec.separation * _unit(domain_rng, d)

        def domain_rotate(x):
            chunks = x.reshape(x.shape[0], -1, spec.drift_chunk)
            flat = chunks.reshape(-1, spec.drift_chunk)
            for rot in chunk_rotations:
                flat = rot(flat)
            x = flat.reshape(x.shape[0], -1)
            for rot in cross_rotations:
                x = rot(x)
            return x

        truth["domain"] = {"chunk_planes": 2, "cross_planes": 2, "shift": domain_shift}

    def sample_class(c: int, incremental: bool):
        crng = rng.spawn(f"class{c}")
        center = spec.separation * crng.normal(d) / np.sqrt(d)
        clusters = np.stack([
            center + 0.25 * spec.separation * crng.normal(d) / np.sqrt(d)
            for _ in range(spec.clusters_per_class)
        ])
        n = spec.train_per_class + spec.test_per_class
        assignment = crng.integers(n, spec.clusters_per_class)
        x = clusters[assignment] + spec.cluster_std * crng.normal((n, d))
        record = {"center": center, "clusters": clusters}
        if incremental and spec.drift_intensity > 0:
            angle = 0.15 * spec.drift_intensity * (0.5 + crng.uniform(1)[0])
            rotate, u, v = _plane_rotation(crng, d, angle)
            shift = 0.08 * spec.drift_intensity * spec.separation * _unit(crng, d)
            x = domain_rotate(rotate(x) + shift) + domain_shift
            record.update({"angle": angle, "shift": shift, "plane": (u, v)})
        truth["classes"][c] = record
        return x[: spec.train_per_class], x[spec.train_per_class :]

    base_x, base_y = [], []
    for c in range(spec.base_classes):
        xtr, _ = sample_class(c, incremental=False)
        base_x.append(xtr)
        base_y.append(np.full(len(xtr), c, dtype=np.int64))

    cil_train_x, cil_train_y, cil_test_x, cil_test_y = [], [], [], []
    for c in range(spec.base_classes, spec.base_classes + spec.cil_classes):
        xtr, xte = sample_class(c, incremental=True)
        cil_train_x.append(xtr)
        cil_train_y.append(np.full(len(xtr), c, dtype=np.int64))
        cil_test_x.append(xte)
        cil_test_y.append(np.full(len(xte), c, dtype=np.int64))

    return GeneratedData(
        base=LabeledSet(np.concatenate(base_x), np.concatenate(base_y)),
        cil=SplitSet(
            LabeledSet(np.concatenate(cil_train_x), np.concatenate(cil_train_y)),
            LabeledSet(np.concatenate(cil_test_x), np.concatenate(cil_test_y)),
        ),
        truth=truth,
    )


def split_cil(dataset: SplitSet, sessions: int, class_order_seed: int) -> SessionStream:
    """Permute classes by seed, then deal contiguous chunks to sessions;
    earlier sessions absorb the remainder when counts do not divide."""
    classes = np.array(dataset.train.classes(), dtype=np.int64)
    k = len(classes)
    if sessions > k:
        raise ContractError(f"cannot split {k} classes into {sessions} sessions")
    if sessions < 1:
        raise ContractError("need at least one session")
    order = classes[RngState(class_order_seed).permutation(k)]
    base_size, extra = divmod(k, sessions)
    out = []
    cursor = 0
    for t in range(sessions):
        size = base_size + (1 if t < extra else 0)
        labels = tuple(sorted(int(c) for c in order[cursor : cursor + size]))
        cursor += size
        train_mask = np.isin(dataset.train.y, labels)
        test_mask = np.isin(dataset.test.y, labels)
        out.append(Session(dataset.train.subset(train_mask),
                           dataset.test.subset(test_mask), labels))
    return SessionStream(out)


def fewshot_subsample(stream: SessionStream, shots: int, from_session: int = 2,
                      seed: int = 0) -> SessionStream:
    """Keep exactly ``shots`` training samples per class in late sessions;
    test sets are untouched."""
    if shots < 1:
        raise ContractError(f"shots must be >= 1, got {shots}")
    if from_session < 2:
        raise ContractError(f"from_session must be >= 2, got {from_session}")
    rng = RngState(seed)
    sessions = []
    for t, s in enumerate(stream.sessions, start=1):
        if t < from_session:
            sessions.append(s)
            continue
        keep = []
        for c in s.labels:
            idx = np.flatnonzero(s.train.y == c)
            if shots > idx.size:
                raise ContractError(
                    f"class {c} has {idx.size} training samples, fewer than {shots} shots"
                )
            keep.append(idx[rng.spawn(f"s{t}c{c}").choice(idx.size, shots)])
        sessions.append(Session(s.train.subset(np.concatenate(keep)), s.test, s.labels))
    return SessionStream(sessions)


# -- embedding csv interface --------------------------------------------------


def export_stream(stream: SessionStream, path) -> None:
    dim = stream.sessions[0].train.x.shape[1]
    header = "session,split,label," + ",".join(f"f{i}" for i in range(dim))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for t, s in enumerate(stream.sessions, start=1):
            for split, block in (("train", s.train), ("test", s.test)):
                for row, label in zip(block.x, block.y):
                    feats = ",".join(repr(float(v)) for v in row)
                    fh.write(f"{t},{split},{int(label)},{feats}\n")


def ingest_embeddings(path) -> SessionStream:
    """Parse the csv contract back into a stream; malformed rows raise
    ParseError with their line number, label reuse raises ContractError."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("line 1: empty file, expected header")
    header = lines[0].split(",")
    if header[:3] != ["session", "split", "label"]:
        raise ParseError(f"line 1: header must start with session,split,label, got {lines[0]!r}")
    dim = len(header) - 3
    if dim < 1 or header[3:] != [f"f{i}" for i in range(dim)]:
        raise ParseError(f"line 1: feature columns must be f0..f{max(dim - 1, 0)}")

    rows: dict = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3 + dim:
            raise ParseError(f"line {lineno}: expected {3 + dim} fields, got {len(parts)}")
        try:
            session = int(parts[0])
            label = int(parts[2])
            feats = [float(v) for v in parts[3:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        split = parts[1]
        if split not in ("train", "test"):
            raise ParseError(f"line {lineno}: split must be train or test, got {split!r}")
        if session < 1:
            raise ParseError(f"line {lineno}: session must be >= 1, got {session}")
        rows.setdefault(session, {"train": ([], []), "test": ([], [])})
        xs, ys = rows[session][split]
        xs.append(feats)
        ys.append(label)

    if not rows:
        raise ParseError("line 2: no data rows")
    sessions = []
    seen: set = set()
    for t in sorted(rows):
        tr_x, tr_y = rows[t]["train"]
        te_x, te_y = rows[t]["test"]
        labels = tuple(sorted(set(tr_y) | set(te_y)))
        overlap = seen & set(labels)
        if overlap:
            raise ContractError(
                f"label(s) {sorted(overlap)} appear in more than one session"
            )
        seen |= set(labels)
        sessions.append(Session(
            LabeledSet(np.array(tr_x, dtype=np.float64).reshape(len(tr_x), dim),
                       np.array(tr_y, dtype=np.int64)),
            LabeledSet(np.array(te_x, dtype=np.float64).reshape(len(te_x), dim),
                       np.array(te_y, dtype=np.int64)),
            labels,
        ))
    return SessionStream(sessions)
