import numpy as np
import pytest

from minicil import backbone as bb
from minicil import tensor as T
from minicil.errors import ContractError, DimensionError, ParseError
from minicil.rng import RngState
from minicil.tensor import Tensor
from minicil.training import Schedule

from conftest import assert_grads_close, finite_diff_grads

SMALL = bb.BackboneConfig(input_dim=8, token_count=2, embed_dim=8, depth=1,
                          mlp_hidden=16, heads=2)


def small_model(pet_kind="none", seed=0, **kw):
    weights = bb.init_weights(SMALL, RngState(seed))
    model = bb.Model(SMALL, weights)
    model.pet = bb.make_pet(pet_kind, SMALL, RngState(seed + 1), frozen=model.frozen, **kw)
    return model


def test_config_validates_divisibility():
    with pytest.raises(ContractError):
        bb.BackboneConfig(embed_dim=10, heads=4)
    with pytest.raises(ContractError):
        bb.BackboneConfig(input_dim=10, token_count=4)


def test_adapter_apply_zero_up_is_identity():
    rs = np.random.RandomState(0)
    x = Tensor(rs.randn(3, 8))
    blk = bb.AdapterBlock(Tensor(rs.randn(8, 2)), Tensor(np.zeros((2, 8))), scale=1.0)
    np.testing.assert_array_equal(bb.adapter_apply(x, blk).data, x.data)


def test_adapter_apply_zero_scale_is_identity():
    rs = np.random.RandomState(1)
    x = Tensor(rs.randn(3, 8))
    blk = bb.AdapterBlock(Tensor(rs.randn(8, 2)), Tensor(rs.randn(2, 8)), scale=0.0)
    np.testing.assert_array_equal(bb.adapter_apply(x, blk).data, x.data)


def test_adapter_apply_matches_direct_arithmetic():
    rs = np.random.RandomState(2)
    x = rs.randn(5, 8)
    wd, wu, s = rs.randn(8, 2), rs.randn(2, 8), 0.7
    blk = bb.AdapterBlock(Tensor(wd), Tensor(wu), scale=s)
    out = bb.adapter_apply(Tensor(x), blk).data
    expected = s * np.maximum(x @ wd, 0.0) @ wu
    np.testing.assert_allclose(out - x, expected, atol=1e-12)


def test_adapter_apply_dim_mismatch():
    blk = bb.AdapterBlock(Tensor(np.zeros((8, 2))), Tensor(np.zeros((2, 8))), 1.0)
    with pytest.raises(DimensionError):
        bb.adapter_apply(Tensor(np.zeros((3, 5))), blk)


def test_ssf_apply_examples():
    x = Tensor(np.array([[1.0, 1.0]]))
    out = bb.ssf_apply(x, Tensor(np.array([2.0, 3.0])), Tensor(np.array([1.0, -1.0])))
    np.testing.assert_array_equal(out.data, [[3.0, 2.0]])
    ident = bb.ssf_apply(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(ident.data, x.data)
    const = bb.ssf_apply(x, Tensor(np.zeros(2)), Tensor(np.array([5.0, 6.0])))
    np.testing.assert_array_equal(const.data, [[5.0, 6.0]])
    with pytest.raises(DimensionError):
        bb.ssf_apply(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_vpt_prepend_layout():
    x = Tensor(np.arange(8.0).reshape(2, 4))
    p = Tensor(np.full((1, 4), 9.0))
    out = bb.vpt_prepend(x, p)
    assert out.shape == (3, 4)
    np.testing.assert_array_equal(out.data[:2], x.data)  # inputs first
    np.testing.assert_array_equal(out.data[2], p.data[0])  # prompts appended


def test_vpt_prepend_empty_is_input():
    x = Tensor(np.ones((2, 4)))
    assert bb.vpt_prepend(x, Tensor(np.zeros((0, 4)))) is x


def test_vpt_deep_layers_get_their_own_prompts():
    model = small_model()
    cfg = bb.BackboneConfig(input_dim=8, token_count=2, embed_dim=8, depth=2,
                            mlp_hidden=16, heads=2)
    weights = bb.init_weights(cfg, RngState(3))
    model = bb.Model(cfg, weights)
    model.pet = bb.VptPet(cfg, RngState(4), n=2, mode="deep")
    seen = []
    original = model._block

    def spy(x, i):
        seen.append((i, x.data.copy()))
        return original(x, i)

    model._block = spy
    model.features(np.random.RandomState(5).randn(3, 8))
    assert [i for i, _ in seen] == [0, 1]
    for i, block_in in seen:
        expected = model.pet.prompts[i].data
        np.testing.assert_array_equal(block_in[:, 2:, :], np.broadcast_to(expected, (3,) + expected.shape))


def test_census_formulas():
    cfg = bb.BackboneConfig(input_dim=64, token_count=4, embed_dim=32, depth=2,
                            mlp_hidden=64, heads=4)
    rng = RngState(0)
    d, dh = 32, 8
    adapter = bb.AdapterPet(cfg, rng, bottleneck=dh)
    assert adapter.census() == cfg.depth * (2 * d * dh)
    adapter_b = bb.AdapterPet(cfg, rng, bottleneck=dh, bias=True)
    assert adapter_b.census() == cfg.depth * (2 * d * dh + dh + d)
    ssf = bb.SsfPet(cfg)
    assert ssf.census() == len(bb.ssf_points(cfg)) * 2 * d
    assert len(bb.ssf_points(cfg)) == 4 * cfg.depth + 2
    shallow = bb.VptPet(cfg, rng, n=5, mode="shallow")
    assert shallow.census() == 5 * d
    deep = bb.VptPet(cfg, rng, n=5, mode="deep")
    assert deep.census() == cfg.depth * 5 * d
    assert bb.NonePet().census() == 0


@pytest.mark.parametrize("kind,kw", [
    ("adapter", {}),
    ("ssf", {}),
    ("vpt_shallow", {"n": 0}),
    ("vpt_deep", {"n": 0}),
])
def test_identity_initialization_matches_frozen(kind, kw):
    x = np.random.RandomState(6).randn(4, 8)
    base = small_model("none").features(x).data
    out = small_model(kind, **kw).features(x).data
    np.testing.assert_allclose(out, base, atol=1e-12, rtol=0)


def test_frozen_forward_deterministic():
    model = small_model()
    x = np.random.RandomState(7).randn(4, 8)
    np.testing.assert_array_equal(model.features(x).data, model.features(x).data)


def test_forward_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        small_model().features(np.zeros((2, 5)))


def _weighted_feature_loss(model, x, probe):
    return T.tsum(T.mul(model.features(x), Tensor(probe)))


def test_forward_gradient_wrt_adapter_vs_finite_differences():
    model = small_model("adapter", bottleneck=2)
    # zero-init up weights give zero gradients through relu; perturb both
    for blk in model.pet.blocks:
        blk.w_up.data[:] = np.random.RandomState(8).randn(*blk.w_up.shape) * 0.1
    x = np.random.RandomState(9).randn(3, 8)
    probe = np.random.RandomState(20).randn(3, 8)
    params = model.trainable()
    names = sorted(params)

    def f(arrays):
        for n, a in zip(names, arrays):
            params[n].data = a
        return float(_weighted_feature_loss(model, x, probe).data)

    arrays = [params[n].data.copy() for n in names]
    grads = T.backward(_weighted_feature_loss(model, x, probe), params)
    assert_grads_close([grads[n] for n in names], finite_diff_grads(f, arrays))


def test_forward_gradients_only_reach_pet():
    model = small_model("adapter", bottleneck=2)
    x = np.random.RandomState(10).randn(3, 8)
    loss = _weighted_feature_loss(model, x, np.random.RandomState(21).randn(3, 8))
    loss.backward()
    for t in model._const.values():
        assert t.grad is None


def test_gradients_reach_every_weight_under_full():
    model = small_model("full")
    x = np.random.RandomState(19).randn(3, 8)
    loss = _weighted_feature_loss(model, x, np.random.RandomState(22).randn(3, 8))
    grads = T.backward(loss, model.trainable())
    nonzero = sum(1 for g in grads.values() if np.abs(g).sum() > 0)
    assert nonzero == len(grads)


def test_pretrain_zero_epochs_returns_initialization():
    rng = RngState(11)
    base = _blobs(4, 30, 8, seed=12)
    result = bb.pretrain(SMALL, base, Schedule(), RngState(11), epochs=0)
    expected = bb.init_weights(SMALL, RngState(11).spawn("init"))
    for name, arr in expected.items():
        np.testing.assert_array_equal(result.weights[name], arr)


def test_pretrain_separable_blobs_reaches_95():
    base = _blobs(4, 40, 8, seed=13)
    result = bb.pretrain(SMALL, base, Schedule(lr0=0.05, epochs_first=30, batch_size=32),
                         RngState(14))
    assert result.train_accuracy >= 0.95


def test_pretrain_empty_rejected():
    from minicil.data import LabeledSet
    with pytest.raises(ContractError):
        bb.pretrain(SMALL, LabeledSet(np.zeros((0, 8)), np.zeros(0, dtype=np.int64)),
                    Schedule(), RngState(0))


def test_weights_round_trip_bit_exact(tmp_path):
    weights = bb.init_weights(SMALL, RngState(15))
    path = tmp_path / "weights.cilb"
    bb.save_weights(path, SMALL, weights)
    config, loaded = bb.load_weights(path)
    assert config == SMALL
    for name, arr in weights.items():
        assert loaded[name].tobytes() == arr.tobytes()


def test_weights_reject_bad_magic(tmp_path):
    path = tmp_path / "junk.cilb"
    path.write_bytes(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(ParseError, match="magic"):
        bb.load_weights(path)


def test_weights_reject_truncation(tmp_path):
    weights = bb.init_weights(SMALL, RngState(16))
    path = tmp_path / "weights.cilb"
    bb.save_weights(path, SMALL, weights)
    clipped = tmp_path / "clipped.cilb"
    clipped.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParseError, match="offset"):
        bb.load_weights(clipped)


def test_frozen_arrays_are_read_only():
    model = small_model()
    with pytest.raises(ValueError):
        model.frozen["embed.w"][0, 0] = 1.0


def _blobs(classes, per_class, dim, seed):
    from minicil.data import LabeledSet
    rs = np.random.RandomState(seed)
    centers = rs.randn(classes, dim) * 6.0
    x = np.concatenate([centers[c] + rs.randn(per_class, dim) * 0.5 for c in range(classes)])
    y = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    return LabeledSet(x, y)
