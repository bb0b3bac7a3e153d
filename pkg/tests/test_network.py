import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aresgaze import ops
from aresgaze.aaconv import AAConv2d
from aresgaze.backbone import BackboneConfig, BasicBlock, build_backbone, count_layers
from aresgaze.gazenet import EyeInputModel, GazeNetConfig, build_gaze_net, count_parameters, default_eye_config
from aresgaze.nn import Linear
from aresgaze.tensor import ConfigError, ShapeError, Tensor

from gradcheck import NET_EPS, TOL, check_gradients, weighted_sum

TINY = dict(stage_channels=(8, 16, 32), nh=2)


def trace_extents(backbone, x):
    """Feature-map extent after every block, from an actual forward."""
    out = ops.max_pool2d(ops.relu(backbone.stem_bn(backbone.stem_conv(Tensor(x)))), 3, 2, 1)
    extents = []
    for block in backbone.blocks:
        out = block(out)
        extents.append(out.shape[2:])
    return extents


def test_default_face_backbone():
    cfg = BackboneConfig()
    assert cfg.stage_extents() == [(28, 28), (14, 14), (7, 7)]
    assert cfg.feature_width == 256
    bb = build_backbone(cfg)
    assert count_layers(bb) == 14
    assert len(bb.aaconv_layers()) == 12


def test_eye_backbone_extents():
    assert BackboneConfig(input_channels=1, input_extent=(60, 60)).stage_extents() == [(15, 15), (8, 8), (4, 4)]


def test_regular_backbone_has_no_attention():
    assert build_backbone(BackboneConfig(attention=False, **TINY)).aaconv_layers() == []


def test_count_layers_one_block_per_stage():
    assert count_layers(build_backbone(BackboneConfig(blocks_per_stage=1, **TINY))) == 8


def test_count_layers_ignores_projection_shortcuts():
    bb = build_backbone(BackboneConfig(**TINY))
    assert sum(b.shortcut is not None for b in bb.blocks) == 2
    assert count_layers(bb) == 1 + len(bb.conv_layers())


@settings(max_examples=12, deadline=None)
@given(extent=st.integers(16, 40), blocks=st.integers(1, 2))
def test_attention_switch_keeps_every_shape(extent, blocks):
    x = np.random.default_rng(extent).standard_normal((2, 1, extent, extent))
    shapes = []
    for attention in (True, False):
        cfg = BackboneConfig(attention=attention, input_channels=1, input_extent=(extent, extent),
                             blocks_per_stage=blocks, **TINY)
        bb = build_backbone(cfg)
        traced = trace_extents(bb, x)
        assert traced[blocks - 1::blocks] == cfg.stage_extents()
        shapes.append(traced)
        assert bb(Tensor(x)).shape == (2, 32)
    assert shapes[0] == shapes[1]


def test_wrong_extent_rejected():
    bb = build_backbone(BackboneConfig(input_channels=1, input_extent=(28, 28), **TINY))
    with pytest.raises(ShapeError):
        bb(Tensor(np.zeros((1, 1, 32, 32))))


def test_bad_heads_rejected_at_build():
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(stage_channels=(8, 16, 32), nh=8))


def test_zero_backbone_gives_zero_features():
    bb = build_backbone(BackboneConfig(input_channels=1, input_extent=(28, 28), **TINY))
    for p in bb.parameters():
        p.data[...] = 0
    np.testing.assert_array_equal(bb(Tensor(np.zeros((2, 1, 28, 28)))).data, 0)


def test_identical_images_identical_features():
    bb = build_backbone(BackboneConfig(input_channels=1, input_extent=(28, 28), **TINY))
    img = np.random.default_rng(0).standard_normal((1, 1, 28, 28))
    other = np.random.default_rng(1).standard_normal((1, 1, 28, 28))
    feats = bb(Tensor(np.concatenate([img, img, other]))).data
    np.testing.assert_array_equal(feats[0], feats[1])


def test_residual_identity_when_block_is_silenced():
    cfg = BackboneConfig(**TINY)
    block = BasicBlock(8, 8, 1, (5, 5), cfg, np.random.default_rng(0))
    block.bn2.gamma.data[:] = 0
    block.bn2.beta.data[:] = 0
    x = np.random.default_rng(1).standard_normal((2, 8, 5, 5))
    np.testing.assert_array_equal(block(Tensor(x)).data, np.maximum(x, 0))


@pytest.mark.parametrize("seed", range(5))
def test_tiny_backbone_gradients(seed):
    rng = np.random.default_rng(seed)
    bb = build_backbone(BackboneConfig(input_channels=1, input_extent=(28, 28), **TINY), rng=rng)
    x = Tensor(rng.uniform(-1, 1, (2, 1, 28, 28)))
    probe = rng.standard_normal((2, 32))
    assert check_gradients(lambda: weighted_sum(bb(x), probe), bb.parameters() + [x], rng, coords=0,
                           eps=NET_EPS) < TOL


# gaze network ------------------------------------------------------------------

def test_default_fused_widths():
    assert GazeNetConfig().fused_width == 512
    tb = GazeNetConfig(eyes=default_eye_config(EyeInputModel.TB), eye_model=EyeInputModel.TB)
    assert tb.fused_width == 768


def tiny_net(model=EyeInputModel.SE, attention=True, seed=0, dtype=np.float64):
    eye_extent = (24, 24) if model is EyeInputModel.SE else (12, 24)
    cfg = GazeNetConfig(
        face=BackboneConfig(attention=attention, input_channels=3, input_extent=(32, 32), **TINY),
        eyes=BackboneConfig(attention=attention, input_channels=1, input_extent=eye_extent, **TINY),
        eye_model=model, hidden=16,
    )
    return build_gaze_net(cfg, rng=np.random.default_rng(seed), dtype=dtype)


def eye_batch(model, n, rng):
    if model is EyeInputModel.SE:
        return rng.uniform(-1, 1, (n, 1, 24, 24))
    return rng.uniform(-1, 1, (n, 1, 12, 24)), rng.uniform(-1, 1, (n, 1, 12, 24))


def test_parameter_counts_across_eye_models():
    se, dp, tb = (tiny_net(m) for m in EyeInputModel)
    eye_se = count_parameters(se.eye)
    assert count_parameters(tb) > count_parameters(se)
    assert count_parameters(tb.eye) + count_parameters(tb.eye_right) == 2 * count_parameters(dp.eye)
    # DP and SE share the backbone layout; only extent-bound relative tables differ
    se_names = dict(se.eye.named_parameters())
    for name, p in dp.eye.named_parameters():
        if not name.endswith(("rel_w", "rel_h")):
            assert se_names[name].shape == p.shape
    assert count_parameters(dp.eye) != eye_se


def test_count_parameters_linear():
    assert count_parameters(Linear(4, 2)) == 10


def test_count_is_mode_invariant():
    net = tiny_net()
    before = count_parameters(net)
    net.eval()
    for layer in net.face.aaconv_layers():
        layer.keep_attention = True
    assert count_parameters(net) == before


@pytest.mark.parametrize("model", list(EyeInputModel))
def test_forward_shape(model):
    rng = np.random.default_rng(0)
    net = tiny_net(model)
    out = net(rng.uniform(-1, 1, (3, 3, 32, 32)), eye_batch(model, 3, rng))
    assert out.shape == (3, 2)
    assert np.all(np.isfinite(out.data))


def test_zero_head_predicts_zero():
    rng = np.random.default_rng(0)
    net = tiny_net()
    for layer in (net.fc1, net.fc2):
        layer.weight.data[...] = 0
        layer.bias.data[...] = 0
    np.testing.assert_array_equal(net(rng.uniform(-1, 1, (2, 3, 32, 32)), eye_batch(EyeInputModel.SE, 2, rng)).data,
                                  0)


def test_dp_is_symmetric_in_eye_order():
    rng = np.random.default_rng(0)
    net = tiny_net(EyeInputModel.DP)
    net.eval()
    face = rng.uniform(-1, 1, (2, 3, 32, 32))
    left, right = eye_batch(EyeInputModel.DP, 2, rng)
    np.testing.assert_array_equal(net(face, (left, right)).data, net(face, (right, left)).data)


def test_se_is_not_symmetric_in_eye_order():
    rng = np.random.default_rng(0)
    net = tiny_net()
    net.eval()
    face = rng.uniform(-1, 1, (1, 3, 32, 32))
    eyes = rng.uniform(-1, 1, (1, 1, 24, 24))
    swapped = np.concatenate([eyes[:, :, 12:], eyes[:, :, :12]], axis=2)
    assert not np.array_equal(net(face, eyes).data, net(face, swapped).data)


def test_extent_mismatch_rejected():
    net = tiny_net()
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 30, 30)), np.zeros((1, 1, 24, 24)))
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 32, 32)), (np.zeros((1, 1, 24, 24)), np.zeros((1, 1, 24, 24))))


def test_invalid_eye_extent_for_model():
    with pytest.raises(ConfigError):
        build_gaze_net(GazeNetConfig(eyes=BackboneConfig(input_channels=1, input_extent=(30, 60))))
    with pytest.raises(ConfigError):
        build_gaze_net(GazeNetConfig(eye_model=EyeInputModel.TB))


@pytest.mark.parametrize("model", [EyeInputModel.DP, EyeInputModel.TB])
def test_gaze_net_gradients(model):
    rng = np.random.default_rng(11)
    net = tiny_net(model, seed=11)
    face = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    eyes = eye_batch(model, 2, rng)
    eye_tensors = [Tensor(eyes)] if model is EyeInputModel.SE else [Tensor(e) for e in eyes]
    eye_arg = eye_tensors[0] if model is EyeInputModel.SE else tuple(eye_tensors)
    probe = rng.standard_normal((2, 2))
    err = check_gradients(lambda: weighted_sum(net(face, eye_arg), probe), net.parameters() + [face, *eye_tensors],
                          rng, coords=0, eps=NET_EPS)
    assert err < TOL


def test_attention_maps_are_only_kept_on_request():
    net = tiny_net()
    rng = np.random.default_rng(0)
    net(rng.uniform(-1, 1, (2, 3, 32, 32)), eye_batch(EyeInputModel.SE, 2, rng))
    assert all(layer.last_attention is None for layer in net.face.aaconv_layers())
    assert all(isinstance(layer, AAConv2d) for layer in net.face.conv_layers()[1:])
