import numpy as np
import pytest

from gradcheck import assert_grad_close, numeric_grad, pyramid_instance
from pyraflow import model as M
from pyraflow.checkpoint import save_checkpoint
from pyraflow.errors import ConfigError
from pyraflow.model import LevelSpec, PyramidConfig, PyramidNet
from pyraflow.tensor import ConvLayer
from pyraflow.train import epe_loss


def small_config(**kw):
    base = dict(levels=2, height=16, width=16, widths=(8, 4, 2), kernel=3)
    base.update(kw)
    return PyramidConfig(**base)


def random_images(seed, shape=(3, 16, 16)):
    rng = np.random.default_rng(seed)
    return rng.random(shape).astype(np.float32), rng.random(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# init


def test_init_is_deterministic():
    a, b = M.init_net(PyramidConfig(seed=7)), M.init_net(PyramidConfig(seed=7))
    for la, lb in zip(a.layers(), b.layers()):
        assert la.weight.tobytes() == lb.weight.tobytes()


def test_init_seed_changes_weights():
    a, b = M.init_net(small_config(seed=1)), M.init_net(small_config(seed=2))
    assert any(not np.array_equal(la.weight, lb.weight) for la, lb in zip(a.layers(), b.layers()))


def test_init_fan_in_scaling():
    net = M.init_net(PyramidConfig())
    checked = 0
    for layer in net.layers():
        fan_in = layer.in_channels * layer.k**2
        if fan_in >= 200:
            expect = 1 / np.sqrt(3 * fan_in)
            assert abs(layer.weight.std() / expect - 1) < 0.2
            assert np.abs(layer.weight).max() <= 1 / np.sqrt(fan_in)
            checked += 1
        assert not layer.bias.any()
    assert checked > 0


def test_init_activations():
    net = M.init_net(PyramidConfig())
    for level in net.nets:
        assert [l.activation for l in level] == ["relu"] * (len(level) - 1) + ["none"]
        assert level[0].in_channels == 8 and level[-1].out_channels == 2


@pytest.mark.parametrize("widths,kernel", [((6, 4, 2), 3), ((8, 4, 3), 3), ((8, 4, 2), 4), ((8,), 3)])
def test_invalid_architecture(widths, kernel):
    with pytest.raises(ConfigError):
        M.init_net(small_config(widths=widths, kernel=kernel))


def test_chain_mismatch_rejected():
    layers = [ConvLayer.zeros(8, 4, 3), ConvLayer.zeros(5, 2, 3, "none")]
    with pytest.raises(ConfigError):
        M.net_from_layers(small_config(levels=1), [layers])


def test_per_level_predictors():
    cfg = small_config(predictors=(LevelSpec((8, 6, 2), 3), LevelSpec((8, 2), 5)))
    net = M.init_net(cfg)
    assert net.nets[0][0].out_channels == 6 and net.nets[1][0].k == 5


# ---------------------------------------------------------------------------
# pyramid plumbing


def test_pyramid_k1_is_identity():
    img = random_images(0)[0]
    out = M.build_pyramid(img, 1)
    assert len(out) == 1 and np.array_equal(out[0], img)


@pytest.mark.parametrize("size,levels,expect", [
    (64, 3, [64, 32, 16]),
    (50, 3, [50, 25, 13]),
    (9, 2, [9, 5]),
])
def test_pyramid_sizes(size, levels, expect):
    img = np.zeros((3, size, size), np.float32)
    assert [p.shape[1] for p in M.build_pyramid(img, levels)] == expect
    assert [h for h, _ in M.pyramid_sizes(size, size, levels)] == expect


def test_pyramid_levels_are_downsampled():
    img = random_images(1)[0]
    pyr = M.build_pyramid(img, 3)
    from pyraflow.tensor import avg_downsample2x
    assert np.array_equal(pyr[2], avg_downsample2x(pyr[1]))


def test_pyramid_too_deep():
    with pytest.raises(ConfigError):
        M.build_pyramid(np.zeros((3, 16, 16), np.float32), 4)
    with pytest.raises(ConfigError):
        PyramidConfig(levels=6, height=64, width=64).validate()


def test_level_input_passthrough():
    a, b = random_images(2, (3, 8, 8))
    flow = np.random.default_rng(3).normal(size=(2, 8, 8)).astype(np.float32)
    x = M.level_input(a, b, flow)
    assert x.shape == (8, 8, 8)
    assert np.array_equal(x[0:3], a) and np.array_equal(x[6:8], flow)
    zero = M.level_input(a, b, np.zeros((2, 8, 8), np.float32))
    assert np.array_equal(zero[3:6], b)


def test_level_input_shape_mismatch():
    a, b = random_images(2, (3, 8, 8))
    with pytest.raises(ConfigError):
        M.level_input(a, b, np.zeros((2, 8, 7), np.float32))


# ---------------------------------------------------------------------------
# forward


def zero_net(cfg):
    net = M.init_net(cfg)
    for layer in net.layers():
        layer.weight[:] = 0
    return net


def test_zero_weights_give_zero_flow():
    cfg = small_config(levels=3, widths=(8, 4, 4, 2))
    flows, _ = M.forward(zero_net(cfg), *random_images(4))
    assert len(flows) == 3
    assert all(not f.any() for f in flows)
    assert flows[0].shape == (2, 16, 16) and flows[2].shape == (2, 4, 4)


def test_forward_resolution_mismatch():
    net = M.init_net(small_config())
    a, b = random_images(0, (3, 16, 12))
    with pytest.raises(ConfigError):
        M.forward(net, a, b)


def test_forward_deterministic_and_batch_consistent():
    net = M.init_net(small_config())
    a, b = random_images(5, (3, 3, 16, 16))
    f1 = M.forward(net, a, b)[0][0]
    assert f1.tobytes() == M.forward(net, a, b)[0][0].tobytes()
    single = M.forward(net, a[1], b[1])[0][0]
    assert np.abs(single - f1[1]).max() < 1e-5


def test_flow_scaling_between_levels():
    # coarse predictor emits the constant (u, v) through its bias; the fine one emits nothing
    net = zero_net(small_config())
    net.nets[1][-1].bias[:] = [0.75, -1.25]
    flows, _ = M.forward(net, *random_images(6))
    assert np.all(flows[1][0] == np.float32(0.75)) and np.all(flows[1][1] == np.float32(-1.25))
    assert np.all(flows[0][0] == np.float32(1.5)) and np.all(flows[0][1] == np.float32(-2.5))


def test_upsample_flow_doubles_constant():
    flow = np.stack([np.full((5, 7), 0.3, np.float32), np.full((5, 7), -2.0, np.float32)])
    up = M.upsample_flow(flow, 9, 14)
    assert up.shape == (2, 9, 14)
    assert np.all(up[0] == np.float32(0.6)) and np.all(up[1] == np.float32(-4.0))


@pytest.mark.parametrize("level", [0, 1])
def test_residual_structure(level):
    net = M.init_net(small_config(levels=3, widths=(8, 4, 4, 2), seed=3))
    for layer in net.nets[level]:
        layer.weight[:] = 0
        layer.bias[:] = 0
    flows, _ = M.forward(net, *random_images(7))
    h, w = flows[level].shape[1:]
    assert np.array_equal(flows[level], M.upsample_flow(flows[level + 1], h, w))


def test_backward_zero_grad_gives_zero():
    net = M.init_net(small_config())
    flows, cache = M.forward(net, *random_images(8), keep=True)
    grads = M.backward(net, cache, [np.zeros_like(flows[0]), None])
    assert all(not gw.any() and not gb.any() for level in grads for gw, gb in level)


def test_backward_reaches_every_level():
    net = M.init_net(small_config(levels=3, widths=(8, 4, 4, 2), seed=5))
    a, b = random_images(9)
    flows, cache = M.forward(net, a, b, keep=True)
    gt = np.random.default_rng(0).normal(size=flows[0].shape).astype(np.float32)
    _, g = epe_loss(flows[0], gt)
    grads = M.backward(net, cache, [g, None, None])
    for level in grads:
        assert all(np.abs(gw).sum() > 0 for gw, _ in level)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("arch", [
    dict(levels=2, size=8, widths=(8, 4, 2), k=3),
    dict(levels=3, size=16, widths=(8, 4, 4, 2), k=3),
    dict(levels=3, size=16, widths=(8, 4, 2), k=5),
])
def test_end_to_end_gradient_on_sampled_weights(seed, arch):
    rng = np.random.default_rng(seed)
    net, a, b, gt = pyramid_instance(rng, **arch)
    params = [p for layer in net.layers() for p in (layer.weight, layer.bias)]
    flows, cache = M.forward(net, a, b, keep=True)
    _, g = epe_loss(flows[0], gt)
    grads = M.backward(net, cache, [g] + [None] * (net.levels - 1))
    analytic = [a_ for level in reversed(grads) for pair in level for a_ in pair]
    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(200, sizes.sum()), replace=False)
    owner = np.searchsorted(np.cumsum(sizes), picks, side="right")
    offsets = picks - np.concatenate([[0], np.cumsum(sizes)])[owner]

    def loss():
        return epe_loss(M.forward(net, a, b)[0][0], gt)[0]

    for i in np.unique(owner):
        idx = offsets[owner == i]
        fd = numeric_grad(loss, params[i], index=idx)
        assert_grad_close(analytic[i], fd, index=idx)


# ---------------------------------------------------------------------------
# sizes


def test_count_params_single_layer():
    net = PyramidNet(small_config(levels=1), [[ConvLayer.zeros(2, 3, 3)]])
    assert M.count_params(net) == 57


def test_count_params_empty():
    assert M.count_params(PyramidNet(small_config(levels=1), [])) == 0


def test_count_params_default_matches_array_tally():
    net = M.init_net(PyramidConfig())
    tally = 0
    for level in net.nets:
        for layer in level:
            tally += len(layer.weight.ravel()) + len(layer.bias.ravel())
    assert M.count_params(net) == tally == 190734


def test_checkpoint_size_grows_four_bytes_per_parameter():
    sizes = []
    for mid in (3, 4, 5, 9):
        net = M.init_net(small_config(widths=(8, mid, 2)))
        sizes.append((M.count_params(net), M.checkpoint_size_bytes(net)))
    for (p0, s0), (p1, s1) in zip(sizes, sizes[1:]):
        assert s1 - s0 == 4 * (p1 - p0)


def test_checkpoint_size_matches_written_file(tmp_path):
    net = M.init_net(PyramidConfig())
    written = save_checkpoint(net, None, tmp_path / "d.ckpt")
    assert written == (tmp_path / "d.ckpt").stat().st_size == M.checkpoint_size_bytes(net)


def test_checkpoint_size_empty_net(tmp_path):
    net = PyramidNet(small_config(levels=1), [])
    # magic+version 8, config 20, metadata 24, CRC 4
    assert M.checkpoint_size_bytes(net) == 56
    assert save_checkpoint(net, None, tmp_path / "e.ckpt") == 56


def test_config_dict_round_trip():
    cfg = small_config(predictors=(LevelSpec((8, 6, 2), 3), LevelSpec((8, 2), 5)), seed=9)
    assert PyramidConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        PyramidConfig.from_dict({"depth": 3})
