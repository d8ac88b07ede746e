import numpy as np
import pytest

from isdmae import model as M
from isdmae import numcore as nc
from isdmae.errors import ShapeError
from isdmae.numcore import Tensor
from isdmae.training import RunConfig, pretrain_loss

from gradcheck import check_gradients_sampled

TINY = dict(input_size=8, num_stages=2, stage_channels=[4, 8], decoder_channels=4, embed_dim=6, norm_groups=2)


@pytest.fixture
def desk():
    return M.ModelConfig()


@pytest.fixture
def tiny():
    return M.ModelConfig(**TINY)


def batch(cfg, n=2, seed=0, dtype=np.float32):
    x = np.random.default_rng(seed).uniform(0, 1, size=(n, cfg.input_channels, cfg.input_size, cfg.input_size))
    return Tensor(x, dtype=dtype)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(num_stages=2, stage_channels=[4, 8, 16])
    with pytest.raises(ValueError):
        M.ModelConfig(input_size=36)
    with pytest.raises(ValueError):
        M.ModelConfig(stage_channels=[6, 32, 64])


def test_config_round_trip(desk):
    assert M.ModelConfig.from_dict(desk.to_dict()) == desk


def test_init_deterministic(tiny):
    a, b = M.init_params(tiny, 3), M.init_params(tiny, 3)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = M.init_params(tiny, 4)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a if k.endswith(".w"))


def test_biases_zero(tiny):
    params = M.init_params(tiny, 0)
    for name, p in params.items():
        if name.endswith(".b"):
            assert np.all(p.data == 0), name


def test_weight_mean_within_3_sigma():
    cfg = M.ModelConfig(stage_channels=[16, 32, 128])
    w = M.init_params(cfg, 0)["enc2.res1.w"].data.astype(np.float64)
    bound = np.sqrt(6.0 / (128 * 9))
    sigma = bound / np.sqrt(3) / np.sqrt(w.size)
    assert w.size > 10_000
    assert abs(w.mean()) < 3 * sigma
    assert np.abs(w).max() <= bound


def test_full_scale_shapes():
    cfg = M.ModelConfig(input_size=256, num_stages=5, stage_channels=[32, 64, 128, 256, 512],
                        decoder_channels=128)
    assert cfg.stage_sizes()[-1] == 8
    shapes = M.param_shapes(cfg)
    assert shapes["enc4.res2.w"][0] == 512
    assert shapes["dec4.conv2.w"][0] == 128


def test_desk_pyramid_shapes(desk):
    pyr = M.encode(batch(desk), M.init_params(desk, 0), desk)
    assert [p.shape for p in pyr] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4)]


def test_decoder_output_shape(desk):
    params = M.init_params(desk, 0)
    dec = M.decode(M.encode(batch(desk), params, desk), params, desk)
    assert dec.shape == (2, 16, 32, 32)


def test_wrong_input_shape(desk):
    with pytest.raises(ShapeError):
        M.forward(Tensor(np.zeros((1, 3, 16, 16))), M.init_params(desk, 0), desk)


def test_reconstruction_range_and_shape(tiny):
    out = M.forward(batch(tiny), M.init_params(tiny, 0), tiny)
    assert out.reconstruction.shape == (2, 3, 8, 8)
    r = out.reconstruction.data
    assert np.all((r > 0) & (r < 1))
    assert out.embedding.shape == (2, 6)


def test_zero_recon_weights_give_half(tiny):
    params = M.init_params(tiny, 0)
    params["recon.w"] = Tensor(np.zeros_like(params["recon.w"].data))
    r = M.forward(batch(tiny), params, tiny).reconstruction.data
    np.testing.assert_array_equal(r, 0.5)


def test_projection_of_constant_map():
    params = {"proj.w": Tensor(np.arange(6.0).reshape(2, 3)), "proj.b": Tensor(np.zeros(3))}
    emb = M.project_head(Tensor(np.full((1, 2, 3, 3), 2.0)), params).data
    np.testing.assert_allclose(emb, 2.0 * params["proj.w"].data.sum(axis=0, keepdims=True))


def test_projection_permutation_invariant(tiny):
    params = M.init_params(tiny, 0)
    fm = np.random.default_rng(1).normal(size=(1, 8, 2, 2))
    perm = fm.reshape(1, 8, 4)[:, :, [2, 0, 3, 1]].reshape(1, 8, 2, 2)
    a = M.project_head(Tensor(fm, dtype=np.float32), params).data
    b = M.project_head(Tensor(perm, dtype=np.float32), params).data
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_task_heads(tiny):
    params = M.init_params(tiny, 0)
    seg = M.task_forward(batch(tiny), params, tiny, "segmentation")
    assert seg.shape == (2, 1, 8, 8)
    p = nc.sigmoid(seg).data
    assert np.all((p > 0) & (p < 1))
    cls1 = M.task_forward(batch(tiny), params, tiny, "classification").data
    cls2 = M.task_forward(batch(tiny), params, tiny, "classification").data
    assert cls1.shape == (2,) and cls1.tobytes() == cls2.tobytes()


def test_branches_share_weights(tiny):
    # the concatenated two-branch pass equals two separate passes
    params = M.init_params(tiny, 0, dtype=np.float64)
    x = batch(tiny, 4, dtype=np.float64)
    joint = M.forward(x, params, tiny).reconstruction.data
    first = M.forward(x[:2], params, tiny).reconstruction.data
    second = M.forward(x[2:], params, tiny).reconstruction.data
    np.testing.assert_allclose(joint, np.concatenate([first, second]), rtol=1e-12)


def test_every_stage_receives_gradient(tiny):
    params = M.init_params(tiny, 0, dtype=np.float64)
    out = M.forward(batch(tiny, dtype=np.float64), params, tiny)
    nc.tsum(out.reconstruction).backward()
    for name in M.trainable_names(params, "pretrain"):
        if name.startswith(("enc", "dec")) and name.endswith(".w"):
            assert params[name].grad is not None and np.any(params[name].grad != 0), name


def test_trainable_names(tiny):
    params = M.init_params(tiny, 0)
    seg = M.trainable_names(params, "segmentation")
    assert "seg.w" in seg and "recon.w" not in seg and "proj.w" not in seg
    cls = M.trainable_names(params, "classification")
    assert "cls.w" in cls and not any(n.startswith("dec") for n in cls)


def test_attention_variant_runs(tiny):
    cfg = M.ModelConfig(**{**TINY, "attention_enabled": True})
    params = M.init_params(cfg, 0)
    assert "enc1.attn.q" in params
    assert M.forward(batch(cfg), params, cfg).reconstruction.shape == (2, 3, 8, 8)


@pytest.mark.parametrize("seed", range(2))
def test_end_to_end_total_loss_gradient(tiny, seed):
    cfg = RunConfig.for_phase("pretrain")
    cfg.model = tiny
    cfg.train.patch = 2
    cfg.train.k_bins = 4
    params = M.init_params(tiny, seed, dtype=np.float64)
    names = M.trainable_names(params, "pretrain")
    images = np.random.default_rng(seed).uniform(0, 1, size=(2, 3, 8, 8))
    seeds = [seed * 10, seed * 10 + 1]

    def build(leaves):
        p = dict(params)
        p.update(zip(names, leaves))
        return pretrain_loss(images, seeds, p, cfg)[0]

    check_gradients_sampled(build, [params[n].data for n in names], 40, np.random.default_rng(seed), h=1e-6)
