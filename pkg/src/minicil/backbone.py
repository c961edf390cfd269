"""Small token-sequence encoder with frozen weights plus exactly one
parameter-efficient tuning attachment.

The input vector is split into ``token_count`` equal chunks, linearly
embedded to ``embed_dim``, passed through pre-norm attention/MLP blocks,
normalized, and mean-pooled over the input-token positions. Attachments:

* adapter  -- residual bottleneck ``x + s * relu(x @ W_down) @ W_up``,
  parallel to the block MLP by default (sequential optional);
* ssf      -- per-dimension scale/shift ``gamma * x + beta`` after the
  embedding, each block sub-operation (ln1, attention, ln2, mlp), and the
  final norm;
* vpt      -- ``n`` trainable prompt tokens appended after the input
  tokens; shallow mode prompts the first layer only, deep mode rewrites
  the prompt slots with each layer's own prompts;
* none     -- frozen features;
* full     -- a trainable copy of every backbone weight (the frozen
  originals are never touched).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from . import tensor as T
from .errors import ContractError, DimensionError, ParseError
from .rng import RngState
from .tensor import Tensor
from .training import Schedule, Sgd, cross_entropy


@dataclass
class BackboneConfig:
    input_dim: int = 64
    token_count: int = 4
    embed_dim: int = 32
    depth: int = 2
    mlp_hidden: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.input_dim % self.token_count != 0:
            raise ContractError(
                f"input_dim {self.input_dim} not divisible by token_count {self.token_count}"
            )

    @property
    def chunk_dim(self) -> int:
        return self.input_dim // self.token_count


def weight_names(config: BackboneConfig) -> list:
    names = ["embed.w", "embed.b"]
    for i in range(config.depth):
        p = f"block{i}"
        names += [f"{p}.ln1.g", f"{p}.ln1.b"]
        names += [f"{p}.attn.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [f"{p}.ln2.g", f"{p}.ln2.b"]
        names += [f"{p}.mlp.w1", f"{p}.mlp.b1", f"{p}.mlp.w2", f"{p}.mlp.b2"]
    names += ["final.g", "final.b"]
    return names


def init_weights(config: BackboneConfig, rng: RngState) -> dict:
    """Documented initialization: N(0, 0.02^2) projections, zero biases,
    unit norm gains. Draw order follows weight_names."""
    d, h = config.embed_dim, config.mlp_hidden

    def w(shape):
        return rng.normal(shape) * 0.02

    out = {"embed.w": w((config.chunk_dim, d)), "embed.b": np.zeros(d)}
    for i in range(config.depth):
        p = f"block{i}"
        out[f"{p}.ln1.g"] = np.ones(d)
        out[f"{p}.ln1.b"] = np.zeros(d)
        for n in ("wq", "wk", "wv", "wo"):
            out[f"{p}.attn.{n}"] = w((d, d))
        for n in ("bq", "bk", "bv", "bo"):
            out[f"{p}.attn.{n}"] = np.zeros(d)
        out[f"{p}.ln2.g"] = np.ones(d)
        out[f"{p}.ln2.b"] = np.zeros(d)
        out[f"{p}.mlp.w1"] = w((d, h))
        out[f"{p}.mlp.b1"] = np.zeros(h)
        out[f"{p}.mlp.w2"] = w((h, d))
        out[f"{p}.mlp.b2"] = np.zeros(d)
    out["final.g"] = np.ones(d)
    out["final.b"] = np.zeros(d)
    return out


def freeze_weights(weights: dict) -> dict:
    for arr in weights.values():
        arr.setflags(write=False)
    return weights


# -- attachments -------------------------------------------------------------


@dataclass
class AdapterBlock:
    w_down: Tensor
    w_up: Tensor
    scale: float
    b_down: Tensor | None = None
    b_up: Tensor | None = None


def adapter_apply(x: Tensor, block: AdapterBlock) -> Tensor:
    """Residual bottleneck: x + s * relu(x @ W_down [+ b]) @ W_up [+ b]."""
    if x.shape[-1] != block.w_down.shape[0]:
        raise DimensionError(
            f"adapter_apply: input dim {x.shape[-1]} vs W_down {block.w_down.shape}"
        )
    return T.add(x, _adapter_branch(x, block))


def _adapter_branch(x: Tensor, block: AdapterBlock) -> Tensor:
    h = T.matmul(x, block.w_down)
    if block.b_down is not None:
        h = T.add(h, block.b_down)
    h = T.matmul(T.relu(h), block.w_up)
    if block.b_up is not None:
        h = T.add(h, block.b_up)
    return T.mul(h, block.scale)


def ssf_apply(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-dimension affine modulation gamma * x + beta."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise DimensionError(
            f"ssf_apply: trailing dim {x.shape[-1]} vs gamma {gamma.shape} beta {beta.shape}"
        )
    return T.add(T.mul(x, gamma), beta)


def vpt_prepend(x: Tensor, prompts: Tensor) -> Tensor:
    """Append prompt tokens after the input tokens along the token axis."""
    if prompts.shape[0] == 0:
        return x
    if x.shape[-1] != prompts.shape[-1]:
        raise DimensionError(
            f"vpt_prepend: embed dim {x.shape[-1]} vs prompts {prompts.shape}"
        )
    if x.ndim == 2:
        return T.concat([x, prompts], axis=0)
    batch = x.shape[0]
    expanded = T.add(T.reshape(prompts, (1,) + tuple(prompts.shape)),
                     Tensor(np.zeros((batch,) + tuple(prompts.shape))))
    return T.concat([x, expanded], axis=1)


class NonePet:
    kind = "none"

    def params(self) -> dict:
        return {}

    def census(self) -> int:
        return 0

    def clone(self) -> "NonePet":
        return NonePet()


class AdapterPet:
    """One bottleneck per block; W_up starts at zero so the attachment is
    exactly the identity until trained."""

    kind = "adapter"

    def __init__(self, config: BackboneConfig, rng: RngState, bottleneck: int | None = None,
                 scale: float = 1.0, placement: str = "parallel", bias: bool = False):
        d = config.embed_dim
        self.bottleneck = bottleneck if bottleneck is not None else max(1, d // 4)
        if self.bottleneck >= d:
            raise ContractError(
                f"adapter bottleneck {self.bottleneck} must be < embed_dim {d}"
            )
        if placement not in ("parallel", "sequential"):
            raise ContractError(f"unknown adapter placement {placement!r}")
        self.scale = scale
        self.placement = placement
        self.bias = bias
        self.blocks = []
        for _ in range(config.depth):
            w_down = Tensor(rng.normal((d, self.bottleneck)) * 0.01, requires_grad=True)
            w_up = Tensor(np.zeros((self.bottleneck, d)), requires_grad=True)
            b_down = Tensor(np.zeros(self.bottleneck), requires_grad=True) if bias else None
            b_up = Tensor(np.zeros(d), requires_grad=True) if bias else None
            self.blocks.append(AdapterBlock(w_down, w_up, scale, b_down, b_up))

    def params(self) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"adapter.block{i}.down"] = blk.w_down
            out[f"adapter.block{i}.up"] = blk.w_up
            if self.bias:
                out[f"adapter.block{i}.b_down"] = blk.b_down
                out[f"adapter.block{i}.b_up"] = blk.b_up
        return out

    def census(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def clone(self) -> "AdapterPet":
        out = AdapterPet.__new__(AdapterPet)
        out.bottleneck, out.scale = self.bottleneck, self.scale
        out.placement, out.bias = self.placement, self.bias
        out.blocks = [
            AdapterBlock(
                Tensor(b.w_down.data.copy(), requires_grad=True),
                Tensor(b.w_up.data.copy(), requires_grad=True),
                b.scale,
                Tensor(b.b_down.data.copy(), requires_grad=True) if b.b_down is not None else None,
                Tensor(b.b_up.data.copy(), requires_grad=True) if b.b_up is not None else None,
            )
            for b in self.blocks
        ]
        return out


def ssf_points(config: BackboneConfig) -> list:
    """Documented modulation points: embedding, every block sub-operation
    output (ln1, attention, ln2, mlp), final norm. All have width embed_dim."""
    points = ["embed"]
    for i in range(config.depth):
        points += [f"block{i}.{p}" for p in ("ln1", "attn", "ln2", "mlp")]
    points.append("final")
    return points


class SsfPet:
    kind = "ssf"

    def __init__(self, config: BackboneConfig):
        d = config.embed_dim
        self.points = ssf_points(config)
        self.gamma = {p: Tensor(np.ones(d), requires_grad=True) for p in self.points}
        self.beta = {p: Tensor(np.zeros(d), requires_grad=True) for p in self.points}

    def params(self) -> dict:
        out = {}
        for p in self.points:
            out[f"ssf.{p}.gamma"] = self.gamma[p]
            out[f"ssf.{p}.beta"] = self.beta[p]
        return out

    def census(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def clone(self) -> "SsfPet":
        out = SsfPet.__new__(SsfPet)
        out.points = list(self.points)
        out.gamma = {p: Tensor(t.data.copy(), requires_grad=True) for p, t in self.gamma.items()}
        out.beta = {p: Tensor(t.data.copy(), requires_grad=True) for p, t in self.beta.items()}
        return out


class VptPet:
    """Trainable prompt tokens; n == 0 degenerates to the frozen model."""

    def __init__(self, config: BackboneConfig, rng: RngState, n: int = 4, mode: str = "shallow"):
        if mode not in ("shallow", "deep"):
            raise ContractError(f"unknown vpt mode {mode!r}")
        if n < 0:
            raise ContractError(f"prompt count must be >= 0, got {n}")
        self.mode = mode
        self.n = n
        self.kind = f"vpt_{mode}"
        layers = config.depth if mode == "deep" else 1
        self.prompts = [
            Tensor(rng.normal((n, config.embed_dim)) * 0.02, requires_grad=True)
            for _ in range(layers)
        ]

    def params(self) -> dict:
        return {f"vpt.layer{i}": p for i, p in enumerate(self.prompts)}

    def census(self) -> int:
        return sum(p.data.size for p in self.prompts)

    def clone(self) -> "VptPet":
        out = VptPet.__new__(VptPet)
        out.mode, out.n, out.kind = self.mode, self.n, self.kind
        out.prompts = [Tensor(p.data.copy(), requires_grad=True) for p in self.prompts]
        return out


class FullPet:
    """Full fine-tuning: a trainable copy of every backbone weight."""

    kind = "full"

    def __init__(self, frozen: dict):
        self.weights = {k: Tensor(v.copy(), requires_grad=True) for k, v in frozen.items()}

    def params(self) -> dict:
        return {f"full.{k}": v for k, v in self.weights.items()}

    def census(self) -> int:
        return sum(p.data.size for p in self.weights.values())

    def clone(self) -> "FullPet":
        out = FullPet.__new__(FullPet)
        out.weights = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.weights.items()}
        return out


def make_pet(kind: str, config: BackboneConfig, rng: RngState, frozen: dict | None = None, **kw):
    if kind == "none":
        return NonePet()
    if kind == "adapter":
        return AdapterPet(config, rng, **kw)
    if kind == "ssf":
        return SsfPet(config)
    if kind in ("vpt_shallow", "vpt-shallow"):
        return VptPet(config, rng, mode="shallow", **kw)
    if kind in ("vpt_deep", "vpt-deep"):
        return VptPet(config, rng, mode="deep", **kw)
    if kind == "full":
        if frozen is None:
            raise ContractError("full fine-tune attachment needs the frozen weights")
        return FullPet(frozen)
    raise ContractError(f"unknown attachment kind {kind!r}")


# -- model -------------------------------------------------------------------


class Model:
    """Frozen backbone plus one attachment; produces pooled features."""

    def __init__(self, config: BackboneConfig, frozen: dict, pet=None):
        missing = [n for n in weight_names(config) if n not in frozen]
        if missing:
            raise ContractError(f"frozen weights missing entries: {missing[:3]}")
        self.config = config
        self.frozen = freeze_weights(dict(frozen))
        self.pet = pet if pet is not None else NonePet()
        self._const = {k: Tensor(v) for k, v in self.frozen.items()}

    @property
    def feature_dim(self) -> int:
        return self.config.embed_dim

    def trainable(self) -> dict:
        return self.pet.params()

    def clone(self) -> "Model":
        return Model(self.config, self.frozen, self.pet.clone())

    def _w(self, name: str) -> Tensor:
        if self.pet.kind == "full":
            return self.pet.weights[name]
        return self._const[name]

    def _ssf(self, x: Tensor, point: str) -> Tensor:
        if self.pet.kind == "ssf":
            return ssf_apply(x, self.pet.gamma[point], self.pet.beta[point])
        return x

    def _attention(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        b, t, d = x.shape
        hd = d // cfg.heads
        p = f"block{i}.attn"

        def proj(wname, bname):
            h = T.add(T.matmul(x, self._w(f"{p}.{wname}")), self._w(f"{p}.{bname}"))
            return T.swapaxes(T.reshape(h, (b, t, cfg.heads, hd)), 1, 2)

        q, k, v = proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv")
        scores = T.mul(T.matmul(q, T.swapaxes(k, 2, 3)), hd ** -0.5)
        mix = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.swapaxes(mix, 1, 2), (b, t, d))
        return T.add(T.matmul(merged, self._w(f"{p}.wo")), self._w(f"{p}.bo"))

    def _block(self, x: Tensor, i: int) -> Tensor:
        p = f"block{i}"
        h = T.layer_norm(x, self._w(f"{p}.ln1.g"), self._w(f"{p}.ln1.b"))
        h = self._ssf(h, f"{p}.ln1")
        a = self._ssf(self._attention(h, i), f"{p}.attn")
        x = T.add(x, a)
        h2 = T.layer_norm(x, self._w(f"{p}.ln2.g"), self._w(f"{p}.ln2.b"))
        h2 = self._ssf(h2, f"{p}.ln2")
        m = T.add(T.matmul(T.relu(T.add(T.matmul(h2, self._w(f"{p}.mlp.w1")),
                                        self._w(f"{p}.mlp.b1"))),
                           self._w(f"{p}.mlp.w2")),
                  self._w(f"{p}.mlp.b2"))
        m = self._ssf(m, f"{p}.mlp")
        if self.pet.kind == "adapter":
            blk = self.pet.blocks[i]
            if self.pet.placement == "parallel":
                m = T.add(m, _adapter_branch(h2, blk))
            else:
                m = adapter_apply(m, blk)
        return T.add(x, m)

    def features(self, batch: np.ndarray) -> Tensor:
        """Pooled features, one row per sample; gradients reach only the
        attachment parameters (plus the weight copies under full tuning)."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"forward expects (B, {self.config.input_dim}), got {batch.shape}"
            )
        if not np.isfinite(batch).all():
            raise ContractError("forward: batch contains non-finite values")
        cfg = self.config
        b = batch.shape[0]
        tc = cfg.token_count
        x = Tensor(batch.reshape(b, tc, cfg.chunk_dim))
        h = T.add(T.matmul(x, self._w("embed.w")), self._w("embed.b"))
        h = self._ssf(h, "embed")
        vpt = isinstance(self.pet, VptPet) and self.pet.n > 0
        if vpt:
            h = vpt_prepend(h, self.pet.prompts[0])
        for i in range(cfg.depth):
            if vpt and self.pet.mode == "deep" and i > 0:
                h = vpt_prepend(h[:, :tc, :], self.pet.prompts[i])
            h = self._block(h, i)
        h = T.layer_norm(h, self._w("final.g"), self._w("final.b"))
        h = self._ssf(h, "final")
        return T.tmean(h[:, :tc, :], axis=1)


# -- pretraining and serialization -------------------------------------------


@dataclass
class PretrainResult:
    weights: dict
    train_accuracy: float
    epoch_losses: list = field(default_factory=list)


def pretrain(config: BackboneConfig, base_set, schedule: Schedule, rng: RngState,
             epochs: int | None = None) -> PretrainResult:
    """Train the whole backbone with a throwaway linear head, then freeze.

    Zero epochs returns the documented initialization unchanged.
    """
    if base_set.x.shape[0] == 0:
        raise ContractError("pretrain: empty base data")
    epochs = schedule.epochs_first if epochs is None else epochs
    weights = init_weights(config, rng.spawn("init"))
    model = Model(config, {k: v.copy() for k, v in weights.items()})
    model.pet = FullPet(model.frozen)

    classes = sorted(set(int(c) for c in base_set.y))
    pos = {c: i for i, c in enumerate(classes)}
    targets = np.array([pos[int(c)] for c in base_set.y], dtype=np.int64)
    head_w = Tensor(rng.spawn("head").normal((len(classes), config.embed_dim)) * 0.01,
                    requires_grad=True)
    head_b = Tensor(np.zeros(len(classes)), requires_grad=True)

    params = dict(model.trainable())
    params.update({"tmp.head.w": head_w, "tmp.head.b": head_b})
    opt = Sgd(params, schedule.momentum)
    order_rng = rng.spawn("order")
    n = base_set.x.shape[0]
    losses = []
    for epoch in range(epochs):
        lr = schedule.lr_at(epoch, epochs)
        perm = order_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, schedule.batch_size):
            idx = perm[start : start + schedule.batch_size]
            feats = model.features(base_set.x[idx])
            logits = T.add(T.matmul(feats, T.swapaxes(head_w, 0, 1)), head_b)
            loss = cross_entropy(logits, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            batch_losses.append(float(loss.data))
        losses.append(float(np.mean(batch_losses)))

    trained = {k: t.data.copy() for k, t in model.pet.weights.items()}
    final = Model(config, trained)
    feats = _all_features(final, base_set.x)
    logits = feats @ head_w.data.T + head_b.data
    acc = float(np.mean(np.array(classes)[logits.argmax(axis=1)] == base_set.y))
    return PretrainResult(weights=freeze_weights(trained), train_accuracy=acc,
                          epoch_losses=losses)


def _all_features(model: Model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, x.shape[0], batch):
            out.append(model.features(x[start : start + batch]).data)
    return np.concatenate(out, axis=0)


def save_weights(path, config: BackboneConfig, weights: dict) -> None:
    meta = [config.input_dim, config.token_count, config.embed_dim,
            config.depth, config.mlp_hidden, config.heads]
    container.write_container(path, meta, {n: weights[n] for n in weight_names(config)})


def load_weights(path):
    meta, arrays = container.read_container(path)
    if len(meta) != 6:
        raise ParseError(f"weight container has {len(meta)} meta ints, expected 6")
    config = BackboneConfig(*meta)
    missing = [n for n in weight_names(config) if n not in arrays]
    if missing:
        raise ParseError(f"weight container missing arrays: {missing[:3]}")
    return config, freeze_weights(arrays)
