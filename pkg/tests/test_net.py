import pytest
import torch
import torch.nn as nn

from dems.net import (
    DEMS,
    FPI,
    Encoder,
    RREBlock,
    ResidualUnit,
    count_parameters,
    describe,
    feature_dropout,
    feature_noise,
)


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def test_encoder_shapes_224():
    enc = Encoder(1, 16).eval()
    with torch.no_grad():
        pyr = enc(torch.rand(1, 1, 224, 224))
    assert pyr.f5.shape == (1, 256, 14, 14)
    assert [f.shape[-1] for f in pyr.skips] == [224, 112, 56, 28]


def test_encoder_channels_32():
    pyr = Encoder(1, 4)(torch.rand(2, 1, 32, 32))
    assert [f.shape[1] for f in (*pyr.skips, pyr.f5)] == [4, 8, 16, 32, 64]


@pytest.mark.parametrize("size", [(225, 224), (224, 225), (40, 40)])
def test_encoder_rejects_indivisible(size):
    with pytest.raises(ValueError, match="divisible by 16"):
        Encoder(1, 4)(torch.rand(1, 1, *size))


def test_fpi_eval_identity():
    fpi = FPI().eval()
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(fpi(x, _gen(0)), x)


def test_feature_noise_zero_is_identity():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(feature_noise(x, u=torch.zeros_like(x)), x)


def test_feature_noise_bounds():
    x = torch.ones(1, 2, 8, 8)
    y = feature_noise(x, _gen(1))
    assert y.min() >= 0.7 and y.max() <= 1.3 and not torch.equal(x, y)


@pytest.mark.parametrize("gamma", [0.6, 0.75, 0.9])
def test_feature_dropout_zeroes_dominant_position(gamma):
    x = torch.tensor([[[[1.0, 1.0], [1.0, 10.0]],
                       [[2.0, 1.0], [1.0, 10.0]]]])
    # channel means: 1.5, 1, 1, 10; threshold gamma * 10 is in [6, 9]
    y = feature_dropout(x, gamma=torch.full((1, 1, 1, 1), gamma))
    assert torch.equal(y[..., 1, 1], torch.zeros(1, 2))
    keep = torch.ones(2, 2, dtype=torch.bool)
    keep[1, 1] = False
    assert torch.equal(y[0][:, keep], x[0][:, keep])


def test_channel_dropout_branch():
    fpi = FPI().train()
    x = torch.ones(4, 64, 2, 2)
    y = fpi(x, _gen(0), kind="dropout")
    per_channel = y[:, :, 0, 0]
    assert set(per_channel.unique().tolist()) <= {0.0, 2.0}
    assert 0.3 < (per_channel == 0).float().mean() < 0.7


def _zero_unit(unit: ResidualUnit):
    for m in unit.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.zeros_(m.weight)


def test_rre_zero_weights_gives_gelu():
    widths = [4, 8, 16, 32, 64]
    block = RREBlock(widths)
    for unit in [*block.rhombus, block.circle]:
        _zero_unit(unit)
    block.eval()
    skips = [torch.randn(2, w, 32 // 2**i, 32 // 2**i) for i, w in enumerate(widths[:4])]
    circle = torch.randn(2, 64, 2, 2)
    out = block(skips, circle)
    for x, y in zip([*skips, circle], [*out.skips, out.bottleneck]):
        torch.testing.assert_close(y, nn.functional.gelu(x), rtol=0, atol=0)


@pytest.mark.parametrize("size", [32, 64, 224])
def test_rre_shape_preservation(size):
    widths = [2, 4, 8, 16, 32]
    block = RREBlock(widths).train()
    skips = [torch.randn(1, w, size // 2**i, size // 2**i) for i, w in enumerate(widths[:4])]
    circle = torch.randn(1, 32, size // 16, size // 16)
    out = block(skips, circle, _gen(0))
    assert [s.shape for s in out.skips] == [s.shape for s in skips]
    assert out.bottleneck.shape == circle.shape


def test_rre_rejects_wrong_shapes():
    block = RREBlock([2, 4, 8, 16, 32])
    with pytest.raises(ValueError):
        block([torch.randn(1, 2, 8, 8)] * 4, torch.randn(1, 32, 1, 1))
    with pytest.raises(ValueError):
        block([torch.randn(1, 2, 8, 8)] * 3, torch.randn(1, 32, 1, 1))


def test_rre_training_outputs_vary_with_seed():
    torch.manual_seed(0)
    widths = [4, 8, 16, 32, 64]
    block = RREBlock(widths).train()
    skips = [torch.randn(2, w, 16 // 2**i, 16 // 2**i) for i, w in enumerate(widths[:4])]
    circle = torch.randn(2, 64, 1, 1)
    a = block(skips, circle, _gen(1))
    b = block(skips, circle, _gen(2))
    assert any(not torch.equal(x, y) for x, y in zip([*a.skips, a.bottleneck], [*b.skips, b.bottleneck]))


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    return DEMS(base_channels=4)


def test_eval_forward_main_only(small_model):
    small_model.eval()
    with torch.no_grad():
        out = small_model(torch.rand(2, 1, 32, 32))
    assert out.aux == []
    assert out.main.shape == (2, 1, 32, 32)
    assert 0 <= out.main.min() and out.main.max() <= 1


def test_train_forward_four_maps(small_model):
    small_model.train()
    out = small_model(torch.rand(2, 1, 64, 64), _gen(0))
    assert len(out.all()) == 4
    assert all(m.shape == (2, 1, 64, 64) for m in out.all())


def test_eval_determinism(small_model):
    small_model.eval()
    x = torch.rand(2, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(small_model(x).main, small_model(x).main)


def test_aux_maps_pairwise_differ(small_model):
    small_model.train()
    out = small_model(torch.rand(2, 1, 32, 32), _gen(3))
    for i in range(3):
        for j in range(i + 1, 3):
            assert (out.aux[i] - out.aux[j]).abs().mean() > 0


def test_circle_path_depth_per_decoder():
    """Decoder k's bottleneck has passed through exactly k circle-path residual units."""
    model = DEMS(base_channels=4).train()
    conv_calls = []
    depths = {}

    def unit_hook(module, inputs, output):
        output._circle_depth = getattr(inputs[0], "_circle_depth", 0) + 1
        output._circle_convs = getattr(inputs[0], "_circle_convs", 0) + module._convs_seen

    def conv_hook(module, inputs, output):
        conv_calls.append(module)

    for block in model.rre:
        unit = block.circle
        unit._convs_seen = 0
        for m in unit.modules():
            if isinstance(m, nn.Conv2d):
                m.register_forward_hook(conv_hook)
        unit.register_forward_pre_hook(lambda mod, inp: conv_calls.clear())
        unit.register_forward_hook(lambda mod, inp, out: setattr(mod, "_convs_seen", len(conv_calls)))
        unit.register_forward_hook(unit_hook)

    def dec_hook(name):
        def hook(module, inputs):
            depths[name] = (getattr(inputs[0], "_circle_depth", 0), getattr(inputs[0], "_circle_convs", 0))
        return hook

    model.main_decoder.register_forward_pre_hook(dec_hook("main"))
    for k, dec in enumerate(model.aux_decoders, 1):
        dec.register_forward_pre_hook(dec_hook(k))
    model(torch.rand(1, 1, 32, 32), _gen(0))
    assert depths == {"main": (0, 0), 1: (1, 2), 2: (2, 4), 3: (3, 6)}


def test_gradient_reaches_encoder_from_every_decoder():
    torch.manual_seed(0)
    model = DEMS(base_channels=4).train()
    first = model.encoder.blocks[0][0].weight
    x = torch.rand(2, 1, 32, 32)
    for k in range(4):
        model.zero_grad()
        out = model(x, _gen(k)).all()[k]
        out.mean().backward()
        assert first.grad is not None and first.grad.abs().sum() > 0, f"decoder {k}"


def test_decoder_parameter_counts_match(small_model):
    counts = {count_parameters(d) for d in [small_model.main_decoder, *small_model.aux_decoders]}
    assert len(counts) == 1


def test_no_rre_feeds_raw_features():
    torch.manual_seed(0)
    model = DEMS(base_channels=4, use_rre=False).train()
    seen = []
    for dec in model.aux_decoders:
        dec.register_forward_pre_hook(lambda m, inp: seen.append(inp[0]))
    pyr = []
    model.encoder.register_forward_hook(lambda m, i, o: pyr.append(o))
    model(torch.rand(2, 1, 32, 32), _gen(0))
    assert all(t is pyr[0].f5 for t in seen)


def test_describe_mentions_totals(small_model):
    text = describe(small_model, 32)
    assert "total params" in text and f"{count_parameters(small_model):,}" in text
