import pytest
import torch
from hypothesis import given, settings, strategies as st

from degradiff.errors import ConfigurationError
from degradiff.scorenet import (
    InjectionMode,
    ScoreNet,
    ScoreNetConfig,
    TimestepEmbedding,
    inject,
    sinusoidal_embedding,
    timestep_embed,
)


def inputs(B=2, F=16, T=12, d=32, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    cdt = torch.complex128 if dtype == torch.float64 else torch.complex64
    x = torch.randn(B, F, T, generator=g, dtype=cdt)
    y = torch.randn(B, F, T, generator=g, dtype=cdt)
    c = torch.randn(B, d, generator=g, dtype=dtype)
    t = torch.rand(B, generator=g, dtype=dtype) * 0.97 + 0.03
    return x, y, t, c


@pytest.fixture
def net(small_net):
    return ScoreNet(small_net).double().eval()


# -- embeddings -------------------------------------------------------------


def test_raw_sinusoid_at_zero():
    e = sinusoidal_embedding(torch.tensor(0.0), 16)
    assert torch.equal(e[0, :8], torch.zeros(8)) and torch.equal(e[0, 8:], torch.ones(8))


def test_timestep_embed_deterministic_and_distinct():
    emb = TimestepEmbedding(32).double()
    a = timestep_embed(0.4, embedder=emb)
    assert torch.equal(a, timestep_embed(0.4, embedder=emb))
    ts = torch.rand(100, 2, generator=torch.Generator().manual_seed(1), dtype=torch.float64) * 0.97 + 0.03
    e1 = timestep_embed(ts[:, 0], embedder=emb)
    e2 = timestep_embed(ts[:, 1], embedder=emb)
    assert torch.all((e1 - e2).abs().max(dim=1).values > 1e-6)
    assert torch.isfinite(e1).all()


def test_inject_examples():
    assert torch.equal(inject(torch.tensor([1.0, 2.0]), torch.tensor([0.5, -2.0])), torch.tensor([1.5, 0.0]))
    e, a, b = torch.randn(3, 8).unbind(0)
    assert torch.equal(inject(e, torch.zeros(8)), e)
    assert torch.allclose(inject(inject(e, a), b), inject(e, a + b))
    with pytest.raises(ConfigurationError):
        inject(e, torch.zeros(7))


# -- forward contracts ------------------------------------------------------


@settings(max_examples=12, deadline=None)
@given(base=st.sampled_from([4, 8]), mults=st.sampled_from([(1,), (1, 2), (1, 2, 2)]),
       bpr=st.integers(1, 2), mid=st.integers(0, 2), F=st.integers(3, 20), T=st.integers(2, 17),
       film=st.booleans())
def test_output_shape_matches_input(base, mults, bpr, mid, F, T, film):
    cfg = ScoreNetConfig(base_channels=base, channel_multipliers=mults, blocks_per_resolution=bpr,
                         mid_blocks=mid, embed_dim=16, film=film)
    net = ScoreNet(cfg)
    x, y, t, c = inputs(1, F, T, 16, torch.float32)
    assert net(x, y, t, c).shape == x.shape
    assert len(net.blocks) == cfg.num_blocks


def test_default_config_depth():
    cfg = ScoreNetConfig()
    assert cfg.num_blocks >= 6 and len(ScoreNet(cfg).blocks) == cfg.num_blocks


def test_forward_is_deterministic(net):
    x, y, t, c = inputs()
    assert torch.equal(net(x, y, t, c), net(x, y, t, c))


def test_zero_conditioning_equals_no_encoder(net):
    x, y, t, c = inputs()
    ref = net(x, y, t, None, InjectionMode.NoEncoder)
    assert torch.equal(net(x, y, t, torch.zeros_like(c), InjectionMode.LayerWise), ref)
    assert torch.equal(net(x, y, t, None, InjectionMode.ZeroConditioning), ref)


def test_mode_conditioning_consistency(net):
    x, y, t, c = inputs()
    with pytest.raises(ConfigurationError):
        net(x, y, t, c, InjectionMode.NoEncoder)
    with pytest.raises(ConfigurationError):
        net(x, y, t, c, InjectionMode.ZeroConditioning)
    with pytest.raises(ConfigurationError):
        net(x, y, t, None, InjectionMode.LayerWise)
    with pytest.raises(ConfigurationError):
        net(x, y, t, c[:, :5], InjectionMode.InputAddition)
    with pytest.raises(ConfigurationError):
        net(x, y[:, :-1], t, c)


@torch.no_grad()
def test_layerwise_deepest_block_directional_derivative(net):
    x, y, t, c = inputs()
    v = torch.randn_like(c)
    h = 1e-4
    block = net.deepest_block
    net.set_tracing(True)
    net(x, y, t, c + h * v)
    plus = block.trace["pre"]
    net(x, y, t, c - h * v)
    minus = block.trace["pre"]
    net.set_tracing(False)
    assert float(torch.linalg.vector_norm((plus - minus) / (2 * h))) > 0


@torch.no_grad()
def _traces(net, x, y, t, c, mode):
    net.set_tracing(True)
    out = net(x, y, t, c, mode)
    traces = [dict(b.trace) for b in net.blocks]
    net.set_tracing(False)
    return out, traces


def test_layerwise_reaches_every_block(net):
    x, y, t, c = inputs()
    delta = 0.1 * torch.randn_like(c)
    out_a, tr_a = _traces(net, x, y, t, c, InjectionMode.LayerWise)
    out_b, tr_b = _traces(net, x, y, t, c + delta, InjectionMode.LayerWise)
    assert float(torch.linalg.vector_norm(out_a - out_b)) > 0
    for a, b in zip(tr_a, tr_b):
        assert not torch.equal(a["emb"], b["emb"])
        assert float(torch.linalg.vector_norm(a["out"] - b["out"])) > 0


def test_input_addition_bypasses_embedding_path(net):
    x, y, t, c = inputs()
    c2 = c + torch.randn_like(c)
    out_a, tr_a = _traces(net, x, y, t, c, InjectionMode.InputAddition)
    out_b, tr_b = _traces(net, x, y, t, c2, InjectionMode.InputAddition)
    for a, b in zip(tr_a, tr_b):
        assert torch.equal(a["emb"], b["emb"])
    assert not torch.equal(out_a, out_b)
    ablated_a = net(x, y, t, c, InjectionMode.InputAddition, input_path=False)
    ablated_b = net(x, y, t, c2, InjectionMode.InputAddition, input_path=False)
    assert torch.equal(ablated_a, ablated_b)


def test_film_option_runs():
    cfg = ScoreNetConfig(base_channels=4, channel_multipliers=(1, 2), blocks_per_resolution=1,
                         mid_blocks=1, embed_dim=16, film=True)
    x, y, t, c = inputs(1, 8, 8, 16, torch.float32)
    assert ScoreNet(cfg)(x, y, t, c).shape == x.shape


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ScoreNetConfig(embed_dim=15)
    with pytest.raises(ConfigurationError):
        ScoreNetConfig(attention=True)
    with pytest.raises(ConfigurationError):
        ScoreNetConfig(channel_multipliers=())
    assert ScoreNetConfig(**ScoreNetConfig().to_dict()) == ScoreNetConfig()
