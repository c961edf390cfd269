"""End-to-end experiment runner.

One run walks the session stream: train the attachment and the session's
head rows locally, refresh prototypes, estimate and apply semantic shift,
retrain the unified head from per-class gaussians, then evaluate on the
cumulative test set. Also hosts the ablation suite, the shift timing
bench, sensitivity dumps, and machine-readable report output.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import alignment as al
from . import backbone as bb
from . import data as dt
from . import prototypes as pr
from . import training as tr
from .errors import ContractError, ParseError
from .rng import RngState, derive_seed
from .tensor import Tensor

MODES = ("none", "ca", "ssca")
ESTIMATORS = ("prototype", "sample", "knearest", "oracle")
REGIMES = ("none", "first_session", "all_sessions")
PETS = ("adapter", "ssf", "vpt_shallow", "vpt_deep", "none", "full")


@dataclass
class ExperimentConfig:
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    data: dt.SyntheticSpec = field(default_factory=dt.SyntheticSpec)
    loss: tr.LossConfig = field(default_factory=tr.LossConfig)
    schedule: tr.Schedule = field(default_factory=tr.Schedule)
    alignment: al.AlignmentConfig = field(default_factory=al.AlignmentConfig)
    pet: str = "adapter"
    pet_options: dict = field(default_factory=dict)
    head: str = "cosine"
    mode: str = "ssca"
    shift_estimator: str = "prototype"
    knearest_k: int | None = None
    sdc_bandwidth: float | None = None
    regime: str = "all_sessions"
    sessions: int = 5
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data_seed: int = 0
    stream_source: str = "synthetic"
    embeddings_path: str | None = None
    bypass_backbone: bool = False
    fewshot_shots: int | None = None
    fewshot_from_session: int = 2
    cov_kind: str = "full"
    clamp_negative_weights: bool = True
    record_timings: bool = False
    diagnostics: bool = True
    sensitivity_epsilon: float = 0.01
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    out: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.shift_estimator not in ESTIMATORS:
            raise ContractError(
                f"shift_estimator must be one of {ESTIMATORS}, got {self.shift_estimator!r}"
            )
        if self.regime not in REGIMES:
            raise ContractError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.pet not in PETS:
            raise ContractError(f"pet must be one of {PETS}, got {self.pet!r}")
        if self.head not in ("cosine", "linear"):
            raise ContractError(f"head must be cosine or linear, got {self.head!r}")
        if self.stream_source not in ("synthetic", "embeddings"):
            raise ContractError(f"stream_source must be synthetic or embeddings")
        if self.stream_source == "embeddings" and not self.embeddings_path:
            raise ContractError("embeddings stream needs embeddings_path")
        if self.bypass_backbone and self.pet != "none":
            raise ContractError("bypass_backbone requires pet 'none'")

    def run_id(self) -> str:
        blob = json.dumps(config_to_dict(self), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=6).hexdigest()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


_SECTIONS = {"backbone": bb.BackboneConfig, "data": dt.SyntheticSpec,
             "loss": tr.LossConfig, "schedule": tr.Schedule,
             "alignment": al.AlignmentConfig}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Strict parse: any key not named by the config types is an error."""
    if not isinstance(raw, dict):
        raise ParseError(f"config root must be an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ParseError(f"unknown config key {unknown[0]!r}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ParseError(f"config section {key!r} must be an object")
            section_known = {f.name for f in dataclasses.fields(cls)}
            bad = sorted(set(value) - section_known)
            if bad:
                raise ParseError(f"unknown config key {key}.{bad[0]}")
            kwargs[key] = cls(**value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
    return config_from_dict(raw)


# -- bypass model -------------------------------------------------------------


class BypassModel:
    """Identity feature extractor for pre-embedded streams."""

    def __init__(self, dim: int):
        self.feature_dim = dim
        self.frozen: dict = {}

    def features(self, batch: np.ndarray) -> Tensor:
        return Tensor(np.asarray(batch, dtype=np.float64))

    def trainable(self) -> dict:
        return {}

    def clone(self) -> "BypassModel":
        return BypassModel(self.feature_dim)


# -- per-seed run -------------------------------------------------------------


@dataclass
class SessionRecord:
    session: int
    acc: float
    acc_new: float
    acc_old: float | None
    confusion: np.ndarray
    class_ids: list
    timings: dict
    shift_diag: dict | None = None
    loss_curve: list = field(default_factory=list)


@dataclass
class SeedResult:
    seed: int
    records: list
    a_last: float
    a_avg: float


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: list

    def summary(self) -> dict:
        a_avg = np.array([r.a_avg for r in self.results])
        a_last = np.array([r.a_last for r in self.results])
        return {
            "a_avg_mean": float(a_avg.mean()), "a_avg_std": float(a_avg.std()),
            "a_last_mean": float(a_last.mean()), "a_last_std": float(a_last.std()),
        }


_PRETRAIN_CACHE: dict = {}


def pretrained_weights(cfg: ExperimentConfig, seed: int):
    """Backbone weights for (config, seed); memoized, arrays read-only."""
    key = json.dumps({
        "backbone": dataclasses.asdict(cfg.backbone),
        "data": dataclasses.asdict(cfg.data),
        "schedule": dataclasses.asdict(cfg.schedule),
        "data_seed": cfg.data_seed,
        "epochs": cfg.pretrain_epochs,
        "lr": cfg.pretrain_lr,
        "seed": seed,
    }, sort_keys=True)
    if key not in _PRETRAIN_CACHE:
        generated = dt.generate_synthetic(cfg.data, cfg.data_seed)
        schedule = dataclasses.replace(cfg.schedule, lr0=cfg.pretrain_lr)
        result = bb.pretrain(cfg.backbone, generated.base, schedule,
                             RngState(derive_seed(seed, "pretrain")),
                             epochs=cfg.pretrain_epochs)
        _PRETRAIN_CACHE[key] = (result.weights, result.train_accuracy)
    return _PRETRAIN_CACHE[key]


def build_stream(cfg: ExperimentConfig, seed: int) -> dt.SessionStream:
    if cfg.stream_source == "embeddings":
        stream = dt.ingest_embeddings(cfg.embeddings_path)
    else:
        generated = dt.generate_synthetic(cfg.data, cfg.data_seed)
        stream = dt.split_cil(generated.cil, cfg.sessions, derive_seed(seed, "order"))
    if cfg.fewshot_shots is not None:
        stream = dt.fewshot_subsample(stream, cfg.fewshot_shots,
                                      cfg.fewshot_from_session,
                                      derive_seed(seed, "fewshot"))
    return stream


def build_model(cfg: ExperimentConfig, seed: int, stream: dt.SessionStream):
    if cfg.bypass_backbone:
        return BypassModel(stream.sessions[0].train.x.shape[1])
    weights, _ = pretrained_weights(cfg, seed)
    model = bb.Model(cfg.backbone, weights)
    model.pet = bb.make_pet(cfg.pet, cfg.backbone, RngState(derive_seed(seed, "pet")),
                            frozen=model.frozen, **cfg.pet_options)
    return model


def class_means(model, data: dt.LabeledSet) -> dict:
    feats = pr.embed(model, data.x)
    return {c: feats[data.y == c].mean(axis=0) for c in data.classes()}


def evaluate(model, head: tr.CosineHead, test: dt.LabeledSet, session_labels):
    feats = pr.embed(model, test.x)
    preds = head.predict(feats)
    acc = float(np.mean(preds == test.y))
    new_mask = np.isin(test.y, list(session_labels))
    acc_new = float(np.mean(preds[new_mask] == test.y[new_mask])) if new_mask.any() else 0.0
    old_mask = ~new_mask
    acc_old = float(np.mean(preds[old_mask] == test.y[old_mask])) if old_mask.any() else None
    classes = head.class_ids
    pos = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t_cls, p_cls in zip(test.y, preds):
        confusion[pos[int(t_cls)], pos[int(p_cls)]] += 1
    return acc, acc_new, acc_old, confusion


class _SessionLoop:
    """Shared trunk of one seed's run: attachment training, prototypes, and
    shift reports are identical across alignment modes, so several modes can
    branch off one loop without changing any result."""

    def __init__(self, cfg: ExperimentConfig, seed: int, need_shift: bool | None = None):
        self.cfg = cfg
        self.seed = seed
        self.stream = build_stream(cfg, seed)
        self.model = build_model(cfg, seed, self.stream)
        self.trunk_head = tr.CosineHead(self.model.feature_dim, cfg.head)
        self.retained: dict = {}
        self.old_model = None
        self.session_index = 0
        self.need_shift = cfg.diagnostics if need_shift is None else need_shift
        self._canonical_store = None

    def advance(self):
        """Train the next session; returns trunk artifacts."""
        cfg = self.cfg
        self.session_index += 1
        t = self.session_index
        session = self.stream.sessions[t - 1]
        timings = {"train_s": 0.0, "shift_s": 0.0, "align_s": 0.0}

        self.old_model = self.model.clone() if t > 1 else None
        protos_before = None
        emb_before = None
        if t > 1 and self.need_shift:
            if cfg.shift_estimator == "prototype":
                protos_before = class_means(self.old_model, session.train)
            elif cfg.shift_estimator in ("sample", "knearest"):
                emb_before = pr.embed(self.old_model, session.train.x)

        train_pet = cfg.regime == "all_sessions" or (cfg.regime == "first_session" and t == 1)
        kd_model = self.old_model if cfg.loss.kd_weight > 0 and t > 1 else None
        start = time.perf_counter()
        result = tr.train_session(
            self.model, self.trunk_head, session.train, session.labels, t,
            cfg.loss, cfg.schedule, RngState(derive_seed(self.seed, f"train{t}")),
            kd_model=kd_model, train_pet=train_pet,
        )
        timings["train_s"] = time.perf_counter() - start

        new_stats = pr.compute_prototypes(self.model, session.train, cfg.cov_kind)
        report = None
        if t > 1 and self.need_shift:
            start = time.perf_counter()
            report = self._estimate_shift(session, new_stats, protos_before, emb_before)
            timings["shift_s"] = time.perf_counter() - start

        rows = self.trunk_head.rows_for(sorted(session.labels))
        new_rows = self.trunk_head.weights[rows].copy()
        for c in session.labels:
            self.retained[int(c)] = session.train.x[session.train.y == c]
        return session, new_stats, report, new_rows, timings, result.epoch_losses

    def _estimate_shift(self, session, new_stats, protos_before, emb_before):
        cfg = self.cfg
        store_view = self._stale_store
        if cfg.shift_estimator == "prototype":
            protos_after = {c: new_stats[c].proto for c in sorted(new_stats)}
            return pr.estimate_shift_prototype(store_view, protos_before, protos_after,
                                               cfg.clamp_negative_weights)
        if cfg.shift_estimator == "sample":
            emb_after = pr.embed(self.model, session.train.x)
            bandwidth = cfg.sdc_bandwidth
            if bandwidth is None:
                bandwidth = pr.median_pairwise_distance(emb_before)
            return pr.estimate_shift_sample(store_view, emb_before, emb_after, bandwidth)
        if cfg.shift_estimator == "knearest":
            emb_after = pr.embed(self.model, session.train.x)
            k = cfg.knearest_k if cfg.knearest_k is not None else emb_before.shape[0]
            return pr.estimate_shift_knearest(store_view, emb_before, emb_after, k)
        deltas = pr.oracle_true_shift(self.retained, self.old_model, self.model)
        missing = [c for c in store_view.classes() if c not in deltas]
        if missing:
            raise ContractError(f"oracle retained samples missing classes {missing[:5]}")
        return pr.ShiftReport(deltas=deltas, drifts={}, weights=np.zeros((len(deltas), 0)),
                              old_ids=sorted(deltas), new_ids=[])

    # The estimator weights live on stored prototypes as of the previous
    # session; the compensated (ssca) store is the canonical view when a
    # ssca branch exists, since only that branch consumes the report.
    @property
    def _stale_store(self) -> pr.PrototypeStore:
        if self._canonical_store is None:
            raise ContractError("session loop has no attached store")
        return self._canonical_store

    def attach_store(self, store: pr.PrototypeStore, canonical: bool):
        if canonical:
            self._canonical_store = store


class ModeBranch:
    """Head/store state for one alignment mode on top of a shared trunk."""

    def __init__(self, cfg: ExperimentConfig, loop: _SessionLoop, mode: str):
        self.cfg = cfg
        self.loop = loop
        self.mode = mode
        self.head = tr.CosineHead(loop.model.feature_dim, cfg.head)
        self.store = pr.PrototypeStore(loop.model.feature_dim, cfg.cov_kind)
        self.records: list = []

    def consume(self, session, new_stats, report, new_rows, timings, losses):
        cfg, t = self.cfg, self.loop.session_index
        labels = sorted(session.labels)
        self.head.class_ids.extend(labels)
        self.head.sessions.extend([t] * len(labels))
        self.head.weights = np.concatenate([self.head.weights, new_rows.copy()], axis=0)

        diag = None
        stale_protos = {c: self.store.stats[c].proto.copy() for c in self.store.classes()}
        if self.mode == "ssca" and t > 1:
            pr.update_prototypes(self.store, report, new_stats, t)
        else:
            zero = pr.ShiftReport(
                deltas={c: np.zeros(self.store.dim) for c in self.store.classes()},
                drifts={}, weights=np.zeros((len(self.store), 0)),
                old_ids=self.store.classes(), new_ids=[])
            pr.update_prototypes(self.store, zero if self.store.classes() else None,
                                 new_stats, t)
        if cfg.diagnostics and report is not None and t > 1:
            diag = shift_diagnostics(self.loop, report, stale_protos)

        align_s = 0.0
        if self.mode in ("ca", "ssca") and t > 1 and cfg.alignment.epochs > 0:
            start = time.perf_counter()
            al.retrain_unified_classifier(
                self.head, self.store, cfg.alignment,
                RngState(derive_seed(self.loop.seed, f"align{t}")))
            align_s = time.perf_counter() - start

        acc, acc_new, acc_old, confusion = evaluate(
            self.loop.model, self.head, self.loop.stream.cumulative_test(t), session.labels)
        self.records.append(SessionRecord(
            session=t, acc=acc, acc_new=acc_new, acc_old=acc_old,
            confusion=confusion, class_ids=list(self.head.class_ids),
            timings={**timings, "align_s": align_s},
            shift_diag=diag, loss_curve=losses,
        ))

    def result(self, seed: int) -> SeedResult:
        accs = [r.acc for r in self.records]
        return SeedResult(seed=seed, records=self.records,
                          a_last=accs[-1], a_avg=float(np.mean(accs)))


def shift_diagnostics(loop: _SessionLoop, report: pr.ShiftReport, stale: dict) -> dict:
    """Stale vs compensated prototype error against the prototype recomputed
    from retained old samples under the current model."""
    old_ids = [c for c in sorted(stale) if c in loop.retained]
    if not old_ids:
        return {}
    err_stale, err_comp, agree = [], [], []
    truth = pr.oracle_true_shift({c: loop.retained[c] for c in old_ids},
                                 loop.old_model, loop.model)
    for c in old_ids:
        true_proto = pr.embed(loop.model, loop.retained[c]).mean(axis=0)
        err_stale.append(float(np.linalg.norm(stale[c] - true_proto)))
        err_comp.append(float(np.linalg.norm(stale[c] + report.deltas[c] - true_proto)))
        nd, nt = np.linalg.norm(report.deltas[c]), np.linalg.norm(truth[c])
        agree.append(float(report.deltas[c] @ truth[c] / (nd * nt)) if nd > 0 and nt > 0 else 0.0)
    return {
        "err_stale": float(np.mean(err_stale)),
        "err_compensated": float(np.mean(err_comp)),
        "cosine_agreement": float(np.mean(agree)),
        "classes": len(old_ids),
    }


def run_seed_modes(cfg: ExperimentConfig, seed: int, modes) -> dict:
    """One shared trunk, one branch per alignment mode. Exact: attachment
    and new-row training never see old head rows, so every mode observes
    identical features, prototypes, and shift reports."""
    need_shift = "ssca" in modes or cfg.diagnostics
    loop = _SessionLoop(cfg, seed, need_shift=need_shift)
    branches = {m: ModeBranch(cfg, loop, m) for m in modes}
    canonical = "ssca" if "ssca" in branches else list(branches)[0]
    loop.attach_store(branches[canonical].store, canonical=True)
    for _ in range(len(loop.stream)):
        artifacts = loop.advance()
        for mode in modes:
            branches[mode].consume(*artifacts)
    return {m: branches[m].result(seed) for m in modes}


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    results = [run_seed_modes(cfg, seed, [cfg.mode])[cfg.mode] for seed in cfg.seeds]
    return ExperimentReport(config=cfg, results=results)


# -- report output -------------------------------------------------------------


def report_lines(report: ExperimentReport) -> list:
    cfg = report.config
    run_id = cfg.run_id()
    lines = []
    for res in report.results:
        for rec in res.records:
            timings = rec.timings if cfg.record_timings else {
                "train_s": 0.0, "shift_s": 0.0, "align_s": 0.0}
            lines.append(json.dumps({
                "run_id": run_id, "seed": res.seed, "session": rec.session,
                "acc": rec.acc, "acc_new": rec.acc_new, "acc_old": rec.acc_old,
                "a_last": res.a_last, "a_avg": res.a_avg,
                "timings": {k: timings[k] for k in ("train_s", "shift_s", "align_s")},
            }, sort_keys=True))
    return lines


def write_report(report: ExperimentReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    run_id = report.config.run_id()
    with open(os.path.join(out_dir, f"run_{run_id}.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(report_lines(report)) + "\n")
    wallclock = {}
    for res in report.results:
        seed_dir = os.path.join(out_dir, f"seed{res.seed}")
        os.makedirs(seed_dir, exist_ok=True)
        for rec in res.records:
            path = os.path.join(seed_dir, f"confusion_s{rec.session}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("true\\pred," + ",".join(str(c) for c in rec.class_ids) + "\n")
                for c, row in zip(rec.class_ids, rec.confusion):
                    fh.write(str(c) + "," + ",".join(str(int(v)) for v in row) + "\n")
        wallclock[str(res.seed)] = {
            str(rec.session): rec.timings for rec in res.records
        }
    with open(os.path.join(out_dir, "wallclock.json"), "w", encoding="utf-8") as fh:
        json.dump(wallclock, fh, indent=2, sort_keys=True)


# -- timing bench ---------------------------------------------------------------


def shift_bench(sizes, repeats: int = 5, seed: int = 0) -> list:
    """Median wall-clock per estimator per (N, C_old, C_new, d) size point.

    The prototype column includes computing the new-class prototypes from
    the N samples (its only pass over the data). Asserts the headline
    speedup once the size is in the regime where it is claimed.
    """
    rows = []
    for n, c_old, c_new, d in sizes:
        if min(n, c_old, c_new, d) < 1:
            raise ContractError(f"sizes must be positive, got {(n, c_old, c_new, d)}")
        rng = RngState(derive_seed(seed, f"bench{n}x{c_old}x{c_new}x{d}"))
        store = pr.PrototypeStore(d)
        for c in range(c_old):
            store.insert(c, pr.ClassStats(rng.normal(d), np.zeros((d, d)), 1, 1))
        emb_old = rng.normal((n, d))
        emb_new = emb_old + 0.01 * rng.normal((n, d))
        labels = np.arange(n, dtype=np.int64) % c_new + c_old

        def time_prototype():
            protos_before, protos_after = {}, {}
            for c in range(c_old, c_old + c_new):
                mask = labels == c
                protos_before[c] = emb_old[mask].mean(axis=0)
                protos_after[c] = emb_new[mask].mean(axis=0)
            return pr.estimate_shift_prototype(store, protos_before, protos_after)

        def time_sample():
            return pr.estimate_shift_sample(store, emb_old, emb_new, bandwidth=1.0)

        def time_knearest():
            return pr.estimate_shift_knearest(store, emb_old, emb_new, k=max(1, n // 10))

        def median_time(fn):
            times = []
            for _ in range(repeats):
                start = time.perf_counter()
                fn()
                times.append(time.perf_counter() - start)
            return float(np.median(times))

        row = {
            "n": n, "c_old": c_old, "c_new": c_new, "d": d,
            "prototype_s": median_time(time_prototype),
            "sample_s": median_time(time_sample),
            "knearest_s": median_time(time_knearest),
        }
        row["speedup"] = row["sample_s"] / max(row["prototype_s"], 1e-12)
        if n >= 1000 and c_old >= 50:
            if row["prototype_s"] > row["sample_s"] / 5.0:
                raise ContractError(
                    f"prototype estimator too slow at {(n, c_old, c_new, d)}: "
                    f"{row['prototype_s']:.6f}s vs sample {row['sample_s']:.6f}s"
                )
        rows.append(row)
    return rows


# -- ablations --------------------------------------------------------------------


def _summary(results) -> dict:
    a_avg = np.array([r.a_avg for r in results])
    a_last = np.array([r.a_last for r in results])
    return {"a_avg_mean": float(a_avg.mean()), "a_avg_std": float(a_avg.std()),
            "a_last_mean": float(a_last.mean()), "a_last_std": float(a_last.std())}


def classifier_ablation(base: ExperimentConfig) -> dict:
    """Linear/cosine heads crossed with alignment modes, on shared trunks."""
    out = {}
    for head in ("cosine", "linear"):
        cfg = dataclasses.replace(base, head=head, mode="ssca")
        per_mode = {m: [] for m in MODES}
        for seed in cfg.seeds:
            branched = run_seed_modes(cfg, seed, list(MODES))
            for m in MODES:
                per_mode[m].append(branched[m])
        out[head] = {m: _summary(per_mode[m]) for m in MODES}
    return out


def pet_ablation(base: ExperimentConfig) -> dict:
    out = {}
    for pet in ("adapter", "ssf", "vpt_shallow", "vpt_deep"):
        cfg = dataclasses.replace(base, pet=pet, pet_options={})
        out[pet] = _summary(run_experiment(cfg).results)
    return out


def regime_probe(base: ExperimentConfig) -> dict:
    """Linear probing of the backbone after the full stream, per regime."""
    out = {}
    for regime in REGIMES:
        cfg = dataclasses.replace(base, regime=regime, mode="none")
        accs = []
        for seed in cfg.seeds:
            loop = _SessionLoop(cfg, seed)
            branch = ModeBranch(cfg, loop, "none")
            loop.attach_store(branch.store, canonical=True)
            for _ in range(len(loop.stream)):
                branch.consume(*loop.advance())
            train_all = dt.LabeledSet(
                np.concatenate([s.train.x for s in loop.stream.sessions]),
                np.concatenate([s.train.y for s in loop.stream.sessions]))
            test_all = loop.stream.cumulative_test(len(loop.stream))
            accs.append(tr.linear_probe(loop.model, train_all, test_all, cfg.schedule,
                                        RngState(derive_seed(seed, "probe"))))
        out[regime] = {"probe_mean": float(np.mean(accs)), "probe_std": float(np.std(accs)),
                       "per_seed": accs}
    return out


def shift_method_ablation(base: ExperimentConfig) -> dict:
    """Full runs under each shift estimator, k swept for the k-nearest one."""
    session_n = None
    stream = build_stream(base, base.seeds[0])
    session_n = min(len(s.train) for s in stream.sessions[1:]) if len(stream) > 1 else len(
        stream.sessions[0].train)
    variants = [("prototype", {}), ("sample", {}),
                ("knearest_small", {"shift_estimator": "knearest", "knearest_k": max(1, session_n // 10)}),
                ("knearest_half", {"shift_estimator": "knearest", "knearest_k": max(1, session_n // 2)}),
                ("knearest_all", {"shift_estimator": "knearest", "knearest_k": session_n}),
                ("oracle", {})]
    out = {}
    for name, overrides in variants:
        est = overrides.pop("shift_estimator", name if name in ESTIMATORS else "knearest")
        cfg = dataclasses.replace(base, mode="ssca", shift_estimator=est, **overrides)
        out[name] = _summary(run_experiment(cfg).results)
        out[name]["k"] = cfg.knearest_k
    return out


def ablation_suite(base: ExperimentConfig) -> dict:
    return {
        "pet": pet_ablation(base),
        "classifier": classifier_ablation(base),
        "regimes": regime_probe(base),
        "shift": shift_method_ablation(base),
    }


# -- sensitivity ---------------------------------------------------------------------


def sensitivity_report(cfg: ExperimentConfig) -> dict:
    """Per-session parameter-group sensitivities plus their cross-session
    cosine similarity (consecutive pairs) for every seed."""
    if cfg.sessions < 2:
        raise ContractError("sensitivity report needs at least 2 sessions")
    out = {"epsilon": cfg.sensitivity_epsilon, "seeds": {}}
    for seed in cfg.seeds:
        loop = _SessionLoop(cfg, seed)
        branch = ModeBranch(cfg, loop, cfg.mode)
        loop.attach_store(branch.store, canonical=True)
        per_session = []
        for _ in range(len(loop.stream)):
            session, *rest = artifacts = loop.advance()
            branch.consume(*artifacts)
            report = tr.parameter_sensitivity(
                loop.model, loop.trunk_head, session.train, session.labels,
                cfg.loss, cfg.sensitivity_epsilon)
            per_session.append(report)
        group_order = sorted(per_session[0].values)
        similarities = []
        for a, b in zip(per_session, per_session[1:]):
            va, vb = a.vector(group_order), b.vector(group_order)
            na, nb = np.linalg.norm(va), np.linalg.norm(vb)
            similarities.append(float(va @ vb / (na * nb)) if na > 0 and nb > 0 else 0.0)
        out["seeds"][str(seed)] = {
            "groups": group_order,
            "values": [[rep.values[g] for g in group_order] for rep in per_session],
            "most_sensitive": [rep.ranking[0] for rep in per_session],
            "consecutive_cosine": similarities,
        }
    return out
