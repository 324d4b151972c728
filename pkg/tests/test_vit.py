import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decompseg import vit
from decompseg.errors import ContractError, ShapeError
from decompseg.tensor import Tensor

from oracles import make, plain_forward


def zero_blocks(params):
    for name, t in params.items():
        if ".blocks." in name:
            t.data = np.zeros_like(t.data)


def test_config_validation():
    with pytest.raises(ContractError):
        vit.VitConfig(dim=10, heads=3)
    with pytest.raises(ContractError):
        vit.VitConfig(layers=0)
    with pytest.raises(ContractError):
        vit.VitConfig(patch=1)
    assert vit.VitConfig(layers=3).components == 3
    assert vit.VitConfig(layers=3, granularity="per-sublayer").components == 6


def test_patch_embed_zero_image_gives_positions():
    cfg, params = make()
    params["encoder.patch_w"].data[:] = 0
    z0 = vit.patch_embed(np.zeros((1, 16, 16)), params, cfg)
    assert np.array_equal(z0.data, params["encoder.pos"].data)


def test_patch_embed_constant_image_columns_equal():
    cfg, params = make(dim=16, patch=4, image=16)
    params["encoder.patch_w"].data[:] = np.eye(16)
    params["encoder.pos"].data[:] = 0
    z0 = vit.patch_embed(np.full((1, 16, 16), 0.7), params, cfg).data
    assert np.allclose(z0, z0[:, :1])


def test_patch_embed_matches_per_patch_loop(rng):
    cfg, params = make(dim=3, patch=2, image=4, heads=1)
    img = rng.normal(size=(1, 4, 4))
    w = params["encoder.patch_w"].data
    pos = params["encoder.pos"].data
    z0 = vit.patch_embed(img, params, cfg).data
    for ty in range(2):
        for tx in range(2):
            flat = img[0, 2 * ty:2 * ty + 2, 2 * tx:2 * tx + 2].reshape(-1)
            assert np.allclose(z0[:, ty * 2 + tx], w @ flat + pos[:, ty * 2 + tx], atol=1e-12)


def test_patch_embed_indivisible_image():
    cfg, params = make(patch=4, image=16)
    with pytest.raises(ShapeError):
        vit.patch_embed(np.zeros((1, 15, 16)), params, cfg)


def test_zero_weights_give_zero_contributions(rng):
    cfg, params = make(layers=3)
    zero_blocks(params)
    z0 = Tensor(rng.normal(size=(8, 16)))
    stream = vit.forward_recorded(z0, params, cfg)
    assert all(not c.data.any() for c in stream.contributions)
    assert np.array_equal(stream.final.data, z0.data)
    comps = vit.decompose(stream)
    assert comps[0] is stream.z0 and all(not c.data.any() for c in comps[1:])


def test_single_layer_per_sublayer(rng):
    cfg, params = make(layers=1, granularity="per-sublayer")
    z0 = Tensor(rng.normal(size=(8, 16)))
    stream = vit.forward_recorded(z0, params, cfg)
    a = vit.msa(z0.reshape(1, 8, 16), params, 0, cfg)
    m = vit.mlp(z0.reshape(1, 8, 16) + a, params, 0)
    assert len(stream.contributions) == 2
    assert np.allclose(stream.contributions[0].data, a.data[0])
    assert np.allclose(stream.contributions[1].data, m.data[0])
    assert np.allclose(stream.final.data, z0.data + a.data[0] + m.data[0])


def test_recorded_forward_matches_plain_forward(rng):
    cfg, params = make(layers=3)
    for t in params.values():
        t.data = rng.normal(scale=0.3, size=t.shape)
    z0 = rng.normal(size=(8, 16))
    stream = vit.forward_recorded(Tensor(z0), params, cfg)
    assert np.max(np.abs(stream.final.data - plain_forward(z0, params, cfg))) < 1e-6


def test_fold_sublayers_into_blocks(rng):
    cfg, params = make(layers=2, granularity="per-sublayer")
    stream = vit.forward_recorded(Tensor(rng.normal(size=(8, 16))), params, cfg)
    blocks = vit.decompose(stream, granularity="per-block")
    subs = stream.contributions
    assert len(blocks) == 3
    for l in range(2):
        assert np.array_equal(blocks[l + 1].data, (subs[2 * l] + subs[2 * l + 1]).data)
    block_stream = vit.forward_recorded(stream.z0, params, vit.VitConfig(
        layers=2, dim=8, patch=4, heads=2, granularity="per-block"))
    with pytest.raises(ContractError):
        vit.decompose(block_stream, granularity="per-sublayer")


def test_reconstruct_examples(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert np.array_equal(vit.reconstruct([x]).data, x.data)
    assert not vit.reconstruct([x, -x]).data.any()
    with pytest.raises(ShapeError):
        vit.reconstruct([x, Tensor(np.ones((4, 3)))])


@given(layers=st.integers(1, 4), dim=st.sampled_from([8, 16, 32]),
       granularity=st.sampled_from(["per-block", "per-sublayer"]),
       norm=st.sampled_from(["norm-free", "pre-norm"]), seed=st.integers(0, 2**32 - 1))
def test_decomposition_sums_to_final(layers, dim, granularity, norm, seed):
    cfg, params = make(layers=layers, dim=dim, patch=4, heads=2, granularity=granularity,
                       norm_mode=norm, dtype=np.float32, seed=seed)
    img = np.random.default_rng(seed).random((2, 1, 16, 16))
    stream = vit.encode(img, params, cfg)
    comps = vit.decompose(stream)
    assert len(comps) == cfg.components + 1
    assert np.max(np.abs(vit.reconstruct(comps).data - stream.final.data)) < 1e-5


@given(layers=st.integers(1, 4), dim=st.sampled_from([8, 16, 32]), seed=st.integers(0, 2**32 - 1))
def test_exact_decomposition_against_plain_forward(layers, dim, seed):
    cfg, params = make(layers=layers, dim=dim, patch=4, heads=2, dtype=np.float32, seed=seed)
    img = np.random.default_rng(seed).random((1, 16, 16))
    z0 = vit.patch_embed(img, params, cfg)
    recon = vit.reconstruct(vit.decompose(vit.forward_recorded(z0, params, cfg)))
    assert np.max(np.abs(recon.data - plain_forward(z0.data, params, cfg))) < 1e-5


def test_batched_and_single_encode_agree(rng):
    cfg, params = make(dtype=np.float32)
    imgs = rng.random((3, 1, 16, 16))
    batch = vit.encode(imgs, params, cfg)
    one = vit.encode(imgs[1], params, cfg)
    assert np.allclose(batch.final.data[1], one.final.data, atol=1e-6)


def test_param_count():
    cfg, params = make(layers=2, dim=8, patch=4, image=16)
    per_block = 4 * 8 * 8 + 4 * 8 + 16 * 8 + 16 + 8 * 16 + 8
    assert vit.param_count(params, "encoder.blocks.") == 2 * per_block
    assert vit.param_count(params, "encoder.patch_w") == 8 * 16
