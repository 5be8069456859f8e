import numpy as np
import pytest

from fedrecon import ops
from fedrecon.autodiff import ParamSet, Tensor
from fedrecon.model import (
    DomainIdentifierConfig,
    LatentBatch,
    UNetConfig,
    decoder_forward,
    encoder_forward,
    identifier_forward,
    identifier_init,
    is_encoder_param,
    is_identifier_param,
    reconstruct,
    unet_init,
    unet_param_count,
)
from _gradcheck import sampled_param_fd

TINY = UNetConfig(in_channels=1, base_channels=2, depth=2)


def _params(cfg=TINY, seed=0):
    return unet_init(cfg, np.random.default_rng(seed))


def test_default_parameter_count_is_frozen():
    cfg = UNetConfig()
    assert cfg.latent_channels == 32
    assert unet_param_count(cfg) == 87977
    ps = unet_init(cfg, np.random.default_rng(0))
    assert sum(t.data.size for _, t in ps) == 87977


def test_tiny_parameter_count_matches_closed_form():
    ps = _params()
    assert sum(t.data.size for _, t in ps) == unet_param_count(TINY)


def test_init_deterministic_and_seed_sensitive():
    a = unet_init(TINY, np.random.default_rng(7))
    b = unet_init(TINY, np.random.default_rng(7))
    c = unet_init(TINY, np.random.default_rng(8))
    assert all(x.data.tobytes() == y.data.tobytes() for (_, x), (_, y) in zip(a, b))
    assert any(x.data.tobytes() != y.data.tobytes() for (_, x), (_, y) in zip(a, c))


def test_forward_shape_contract():
    ps = _params()
    x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 16, 16)))
    y = reconstruct(ps, x)
    assert y.data.shape == x.data.shape
    assert np.isfinite(y.data).all()


def test_latent_shape_contract():
    ps = _params()
    x = Tensor(np.random.default_rng(2).normal(size=(3, 1, 16, 16)))
    latent, skips = encoder_forward(ps, x, origin_site="A")
    assert latent.features.data.shape == (3, TINY.latent_channels, 4, 4)
    assert latent.origin_site == "A"
    assert len(skips) == TINY.depth + 1


def test_residual_identity_with_zero_output_layer():
    ps = _params()
    ps.get("out.w").data[:] = 0.0
    ps.get("out.b").data[:] = 0.0
    x = Tensor(np.random.default_rng(3).uniform(0, 1, size=(1, 1, 8, 8)))
    y = reconstruct(ps, x)
    np.testing.assert_array_equal(y.data, x.data)


def test_reconstruct_is_decoder_of_encoder():
    ps = _params()
    x = Tensor(np.random.default_rng(4).normal(size=(2, 1, 8, 8)))
    latent, skips = encoder_forward(ps, x)
    via_split = decoder_forward(ps, latent, skips)
    direct = reconstruct(ps, x)
    assert via_split.data.tobytes() == direct.data.tobytes()


def test_forward_input_validation():
    ps = _params()
    with pytest.raises(ValueError):
        reconstruct(ps, Tensor(np.zeros((1, 2, 8, 8))))  # wrong channels
    with pytest.raises(ValueError):
        reconstruct(ps, Tensor(np.zeros((1, 1, 6, 6))))  # not divisible by 4
    with pytest.raises(ValueError):
        reconstruct(ps, Tensor(np.zeros((8, 8))))  # not NCHW


def test_encoder_param_namespace():
    ps = _params()
    enc = [n for n in ps.names() if is_encoder_param(n)]
    dec = [n for n in ps.names() if not is_encoder_param(n)]
    assert any(n.startswith("bottleneck") for n in enc)
    assert all(n.startswith(("dec", "out")) for n in dec)
    assert not any(is_identifier_param(n) for n in ps.names())


def test_full_network_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    ps = _params(seed=5)
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 8, 8)))
    y = Tensor(rng.uniform(0, 1, size=(2, 1, 8, 8)))

    def loss_fn():
        return ops.l1_loss(reconstruct(ps, x), y)

    sampled_param_fd(ps, loss_fn, n_coords=3, seed=12)


def test_identifier_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    cfg = DomainIdentifierConfig(latent_channels=TINY.latent_channels, hidden_channels=3)
    cp = identifier_init(cfg, np.random.default_rng(6))
    z = LatentBatch(Tensor(rng.normal(size=(2, TINY.latent_channels, 4, 4))), "s")

    def loss_fn():
        probs = identifier_forward(cp, z)
        return ops.bce_terms(probs).sum()

    sampled_param_fd(cp, loss_fn, n_coords=4, seed=14)


def test_identifier_outputs_half_when_final_layer_zeroed():
    cfg = DomainIdentifierConfig(latent_channels=4, hidden_channels=5)
    cp = identifier_init(cfg, np.random.default_rng(0))
    cp.get("cls.conv2.w").data[:] = 0.0
    cp.get("cls.conv2.b").data[:] = 0.0
    z = LatentBatch(Tensor(np.random.default_rng(1).normal(size=(3, 4, 4, 4))))
    out = identifier_forward(cp, z)
    np.testing.assert_array_equal(out.data, np.full((3, 1), 0.5))


def test_identifier_output_clamped_to_open_interval():
    cfg = DomainIdentifierConfig(latent_channels=2, hidden_channels=2)
    cp = identifier_init(cfg, np.random.default_rng(2))
    cp.get("cls.conv2.b").data[:] = 1000.0  # force saturation
    z = LatentBatch(Tensor(np.zeros((2, 2, 4, 4))))
    out = identifier_forward(cp, z).data
    assert (out >= 1e-7).all() and (out <= 1 - 1e-7).all()
    assert out.max() == 1 - 1e-7


def test_identifier_param_namespace():
    cfg = DomainIdentifierConfig(latent_channels=4)
    cp = identifier_init(cfg, np.random.default_rng(3))
    assert all(is_identifier_param(n) for n in cp.names())
    assert not any(is_encoder_param(n) for n in cp.names())


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(depth=1)
    with pytest.raises(ValueError):
        UNetConfig(base_channels=0)


def test_latent_batch_round_trip():
    z = LatentBatch(Tensor(np.random.default_rng(4).normal(size=(2, 3, 4, 4))), "siteB")
    back = LatentBatch.from_bytes(z.to_bytes())
    assert back.origin_site == "siteB"
    assert back.features.data.tobytes() == z.features.data.tobytes()
    with pytest.raises(ValueError):
        LatentBatch.from_bytes(z.to_bytes()[:20])


def test_paramset_round_trip_preserves_model_output():
    ps = _params(seed=9)
    again = ParamSet.from_bytes(ps.to_bytes())
    x = Tensor(np.random.default_rng(10).normal(size=(1, 1, 8, 8)))
    assert reconstruct(ps, x).data.tobytes() == reconstruct(again, x).data.tobytes()
