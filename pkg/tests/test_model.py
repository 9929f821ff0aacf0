import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eedet.config import RunConfig
from eedet.cost import count_macs
from eedet.io import checkpoint_param_elements, save_checkpoint
from eedet.model import (BackboneConfig, EEBranchConfig, HeadConfig, analytic_param_count, branch_param_count,
                         build_model, make_divisible, stage_of_layer)
from eedet.nn import ShapeError, softmax

from conftest import tiny_backbone, tiny_model


@pytest.mark.parametrize("layer,stage", [(9, 4), (11, 5), (1, 1), (2, 2), (3, 2), (4, 3), (6, 3), (7, 4), (10, 4),
                                         (13, 5)])
def test_stage_of_layer(layer, stage):
    assert stage_of_layer(layer, BackboneConfig()) == stage


@pytest.mark.parametrize("bad", [0, 14, -1])
def test_stage_of_layer_out_of_range(bad):
    with pytest.raises(ValueError):
        stage_of_layer(bad, BackboneConfig())


def test_stage_layer_sets():
    cfg = BackboneConfig()
    assert [cfg.layers_of_stage(s) for s in range(1, 6)] == [[1], [2, 3], [4, 5, 6], [7, 8, 9, 10], [11, 12, 13]]


@pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75, 1.0])
def test_channels_rounded_to_eight(alpha):
    cfg = BackboneConfig(width_multiplier=alpha)
    for s in range(1, 6):
        c = cfg.channels(s)
        assert c >= 8 and c % 8 == 0
    assert make_divisible(16 * 0.25) == 8


def test_invalid_attach_layer():
    with pytest.raises(ValueError):
        build_model(BackboneConfig(), EEBranchConfig(attach_layer=14))
    with pytest.raises(ValueError):
        EEBranchConfig(num_classes=3)


def test_branch_structure():
    m = tiny_model(attach=7)
    br = m.branch
    cin = m.layer_shapes[7][1]
    assert br.conv1.conv.in_channels == br.conv1.conv.out_channels == cin
    assert br.conv1.conv.kernel_size == 3 and br.conv1.conv.stride == 1
    assert br.conv2.conv.out_channels == 16 and br.conv2.conv.stride == 2 and br.conv2.conv.kernel_size == 3
    assert br.fc1.fc.out_features == 16 and br.fc2.fc.out_features == 2
    assert br.conv1.has_act and br.conv2.has_act and br.fc1.has_act and not br.fc2.has_act
    assert m.head_layers == [10, 13]


def test_param_count_equals_analytic_and_checkpoint(tmp_path):
    cfg = RunConfig()
    m = build_model(cfg.backbone, cfg.ee, cfg.heads)
    n = analytic_param_count(cfg.backbone, cfg.ee, cfg.heads)
    assert m.num_parameters() == n
    save_checkpoint(tmp_path / "m.ckpt", m)
    assert checkpoint_param_elements(tmp_path / "m.ckpt") == n


@pytest.mark.parametrize("attach", [1, 4, 9, 13])
def test_branch_params_additive(attach):
    bb = BackboneConfig(width_multiplier=0.5)
    ee = EEBranchConfig(attach_layer=attach)
    static = build_model(bb, None)
    full = build_model(bb, ee)
    assert static.num_parameters() == analytic_param_count(bb, None)
    cin = full.layer_shapes[attach][1]
    assert full.num_parameters() - static.num_parameters() == branch_param_count(cin, ee)


def test_paper_scale_branch_overhead():
    # full-width stage-4 features have 64 channels, stage-5 features 96
    total = 4.67e6
    mid = branch_param_count(64)
    assert 50e3 <= mid <= 138e3 and 0.011 <= mid / total <= 0.030
    # the widest placement lands within 4% of the quoted 138K upper end
    assert abs(branch_param_count(96) - 138e3) / 138e3 < 0.04


@pytest.mark.parametrize("alpha_pair", [(0.25, 0.5), (0.5, 0.75), (0.75, 1.0)])
def test_width_monotonicity(alpha_pair):
    a, b = (build_model(BackboneConfig(width_multiplier=x), EEBranchConfig(attach_layer=9)) for x in alpha_pair)
    assert a.num_parameters() <= b.num_parameters()
    assert count_macs(a).mac_full <= count_macs(b).mac_full


def test_forward_shapes_and_softmax(rng):
    m = tiny_model()
    x = rng.uniform(0, 1, (2, 1, 32, 32)).astype(np.float32)
    cls, loc, ee = m.forward_full(x)
    a = m.num_anchors()
    assert cls.shape == (2, a, 3) and loc.shape == (2, a, 4) and ee.shape == (2, 2)
    np.testing.assert_allclose(softmax(ee).sum(axis=1), 1.0, atol=1e-6)


def test_identical_images_identical_rows(rng):
    m = tiny_model()
    x = np.repeat(rng.uniform(0, 1, (1, 1, 32, 32)).astype(np.float32), 2, axis=0)
    cls, loc, ee = m.forward_full(x)
    assert cls[0].tobytes() == cls[1].tobytes() and ee[0].tobytes() == ee[1].tobytes()


def test_no_branch_outputs_none(rng):
    m = tiny_model(attach=None)
    assert m.forward_full(rng.uniform(0, 1, (1, 1, 32, 32)).astype(np.float32))[2] is None


@settings(max_examples=13, deadline=None)
@given(st.integers(1, 13))
def test_prefix_equals_trace(layer):
    m = tiny_model(seed=layer)
    x = np.random.default_rng(layer).uniform(0, 1, (2, 1, 32, 32)).astype(np.float32)
    trace = m.forward_trace(x)
    assert m.forward_to_layer(x, layer).tobytes() == trace[layer].tobytes()


def test_last_prefix_equals_backbone_output(rng):
    m = tiny_model()
    x = rng.uniform(0, 1, (1, 1, 32, 32)).astype(np.float32)
    assert np.array_equal(m.forward_to_layer(x, 13), m.forward_trace(x)[13])


def test_zero_input_zero_prefix():
    m = tiny_model()
    for p_name, p in m.named_parameters():
        if "beta" in p_name:
            p.data[:] = 0
    out = m.forward_to_layer(np.zeros((1, 1, 32, 32), np.float32), 1)
    assert np.all(out == 0)


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        tiny_model().forward_full(np.zeros((1, 1, 16, 16), np.float32))
