import numpy as np
import pytest
import torch
import torch.nn as nn

from gifdl.errors import ConfigError, NumericError
from gifdl.generator import (
    GeneratorConfig,
    UNetGenerator,
    _CircularDeconv,
    generator_forward,
    load_generator,
    save_checkpoint,
    skip_topology,
)

SMALL = GeneratorConfig(base_channels=4, max_channels=16)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return UNetGenerator(SMALL)


def test_skip_topology_rule():
    assert [skip_topology(i) for i in (1, 4, 7)] == [((1, 15), 16), ((4, 12), 13), ((7, 9), 10)]
    for bad in (0, 8):
        with pytest.raises(IndexError):
            skip_topology(bad)


def test_block_inputs_follow_the_skip_rule(model):
    outs = {}
    hooks = []
    blocks = list(model.down) + list(model.up) + [model.final]
    for k, blk in enumerate(blocks, start=1):
        hooks.append(blk.register_forward_hook(lambda m, i, o, k=k: outs.__setitem__(k, (i[0].shape[1], o.shape[1]))))
    model(torch.rand(2, 1, 256, 256))
    for h in hooks:
        h.remove()
    assert len(outs) == 16
    channels_out = {k: v[1] for k, v in outs.items()}
    assert outs[9][0] == channels_out[8]
    for i in range(1, 8):
        (a, b), dest = skip_topology(i)
        assert outs[dest][0] == channels_out[a] + channels_out[b]


@pytest.mark.parametrize("shape", [(64, 64), (48, 80), (256, 256)])
def test_output_shape_and_range(model, shape):
    with torch.no_grad():
        p = model(torch.rand(2, 1, *shape))
    assert p.shape == (2, 1, *shape)
    assert float(p.min()) >= SMALL.prob_floor and float(p.max()) <= 1 - SMALL.prob_floor


def test_circular_deconv_matches_periodic_reference():
    torch.manual_seed(1)
    layer = _CircularDeconv(3, 2)
    x = torch.randn(1, 3, 5, 7)
    tiled = x.repeat(1, 1, 3, 3)
    ref = nn.functional.conv_transpose2d(tiled, layer.deconv.weight, layer.deconv.bias, stride=2, padding=1)
    ref = ref[..., 10:20, 14:28]
    assert torch.allclose(layer(x), ref, atol=1e-6)


def test_constant_input_has_no_border_effects(model):
    # circular padding leaves only the 2x2 phase pattern of the stride-2 deconvolution
    model.eval()
    with torch.no_grad():
        p = model(torch.full((1, 1, 256, 256), 0.4))[0, 0]
    assert torch.allclose(p, torch.roll(p, 2, dims=0), atol=1e-6)
    assert torch.allclose(p, torch.roll(p, 2, dims=1), atol=1e-6)


def test_gradients_reach_every_parameter(model):
    model(torch.rand(2, 1, 64, 64)).mean().backward()
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in model.parameters())


def test_non_finite_activation_names_block(model):
    x = torch.rand(1, 1, 64, 64)
    x[0, 0, 3, 3] = float("nan")
    with pytest.raises(NumericError, match="block 1"):
        model(x)


def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(down_blocks=6)
    with pytest.raises(ConfigError):
        GeneratorConfig(prob_floor=0.5)
    assert GeneratorConfig().widths() == [16, 32, 64, 128, 128, 128, 128, 128]


def test_checkpoint_round_trip(model, tmp_path, textured):
    save_checkpoint(tmp_path / "g.pt", {"generator": model}, {"generator": SMALL})
    back = load_generator(tmp_path / "g.pt")
    a = generator_forward(model, textured)
    b = generator_forward(back, textured)
    assert np.array_equal(a.p, b.p)
    assert np.allclose(a.p_plus, a.p / 2)


def test_bad_checkpoint(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        load_generator(tmp_path / "x.pt")
