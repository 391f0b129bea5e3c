import numpy as np
import pytest

from pandora import attnctl
from pandora.errors import MissingInjection, PipelineError, ShapeError
from pandora.toydenoiser import AttentionPacket, ToyDenoiser, build_denoiser, timestep_features


@pytest.fixture
def x16(rng):
    return rng.normal(size=(2, 16, 16))


def test_same_seed_same_weights():
    a, b = build_denoiser(5, 3, 16, 16), build_denoiser(5, 3, 16, 16)
    assert a.weights.keys() == b.weights.keys()
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_seed_changes_output(x16):
    a, b = build_denoiser(1, 2, 16, 16), build_denoiser(2, 2, 16, 16)
    assert not np.array_equal(a(x16, 10), b(x16, 10))


def test_forward_is_deterministic(den16, x16):
    assert np.array_equal(den16(x16, 10), den16(x16, 10))


def test_output_shape_and_finite(den16, x16):
    eps = den16(x16, 40)
    assert eps.shape == (2, 16, 16) and np.isfinite(eps).all()


def test_timestep_matters(den16, x16):
    assert not np.array_equal(den16(x16, 1), den16(x16, 50))


def test_layers(den32):
    assert [(l.layer_id, l.resolution) for l in den32.layers] == [(0, 16), (1, 8)]
    assert den32.layer(1).n_tokens == 64


def test_weights_read_only(den16):
    with pytest.raises(ValueError):
        den16.weights["out"][0, 0] = 1.0


@pytest.mark.parametrize("shape", [(2, 12, 12), (2, 16, 8), (2, 4, 4), (0, 16, 16)])
def test_unsupported_shapes(shape):
    with pytest.raises(ShapeError):
        ToyDenoiser(0, *shape)


def test_input_shape_checked(den16):
    with pytest.raises(ShapeError):
        den16(np.zeros((2, 8, 8)), 1)


def test_capture_one_packet_per_layer(den16, x16):
    _, cap = den16.forward(x16, 5, capture=True)
    assert [p.layer_id for p in cap] == [0, 1]
    assert cap[0].Q.shape == (64, 32) and cap[1].K.shape == (16, 32)
    assert all(p.step == 5 for p in cap)
    assert den16.forward(x16, 5)[1] == []


def test_hooked_vanilla_is_bit_identical(den16, x16):
    def plain(p, ctx):
        return attnctl.vanilla_attention(p.Q, p.K, p.V, p.d)

    base = den16(x16, 9)
    hooked, _ = den16.forward(x16, 9, processors={0: plain, 1: plain})
    assert np.array_equal(base, hooked)


def test_hook_intervention_takes_effect(den16, x16):
    def zero(p, ctx):
        return np.zeros_like(p.V)

    base = den16(x16, 9)
    for layer in (0, 1):
        assert not np.array_equal(den16.forward(x16, 9, processors={layer: zero})[0], base)


def test_hook_receives_context(den16, x16):
    seen = []

    def spy(p, ctx):
        seen.append((ctx.layer_id, ctx.step, ctx.token_mask, ctx.injected))
        return attnctl.vanilla_attention(p.Q, p.K, p.V, p.d)

    den16.forward(x16, 4, processors={1: spy}, token_masks={4: "m4"}, injected={1: "pk"})
    assert seen == [(1, 4, "m4", "pk")]


def test_wrong_processor_shape(den16, x16):
    with pytest.raises(ShapeError, match="layer 0"):
        den16.forward(x16, 3, processors={0: lambda p, ctx: np.zeros((3, 3))})


def test_processor_error_names_step_and_layer(den16, x16):
    proc = attnctl.pandora_processor(attnctl.DissolutionConfig(0.1))
    with pytest.raises(PipelineError) as info:
        den16.forward(x16, 7, processors={1: proc})
    assert (info.value.t, info.value.layer) == (7, 1)
    assert isinstance(info.value.cause, MissingInjection)
    assert "t=7" in str(info.value) and "layer=1" in str(info.value)


def test_packet_validation():
    with pytest.raises(ShapeError):
        AttentionPacket(0, np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 2)), 3, 1)
    with pytest.raises(ShapeError):
        AttentionPacket(0, np.zeros((4, 3)), np.zeros((5, 3)), np.zeros((5, 3)), 3, 1)


def test_attention_is_local(den32, rng):
    # the positional columns dominate: a query's strongest key is itself or a neighbour
    _, cap = den32.forward(rng.normal(size=(4, 32, 32)), 25, capture=True)
    p = cap[0]
    S = attnctl.attention_logits(p.Q, p.K, p.d)
    r = den32.layers[0].resolution
    best = S.argmax(axis=1)
    dist = np.abs(best // r - np.arange(r * r) // r) + np.abs(best % r - np.arange(r * r) % r)
    assert dist.max() <= 2


def test_timestep_features():
    f = timestep_features(0)
    assert f.shape == (16,)
    assert np.array_equal(f[:8], np.zeros(8)) and np.array_equal(f[8:], np.ones(8))
