import pytest
import torch

from latentlang import diffusion_math as dm
from latentlang.denoiser import AdaptiveLayerNorm, Conditioning, Denoiser, DenoiserConfig

from helpers import fd_check

TINY = DenoiserConfig(latent_len=4, latent_dim=6, width=16, layers=4, heads=2, dense_connections=2, dropout=0.0)


def model(cfg=TINY, seed=0):
    torch.manual_seed(seed)
    return Denoiser(cfg).eval()


def inputs(cfg=TINY, batch=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, cfg.latent_len, cfg.latent_dim, generator=g, dtype=dtype)
    a = torch.rand(batch, generator=g, dtype=dtype)
    return z, a


def perturb(module, seed=1, scale=0.05):
    # zero-initialised modulation makes some paths inert at init
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def test_output_shapes_and_x_hat_relation():
    den = model()
    z, a = inputs()
    v, x = den(z, a)
    assert v.shape == x.shape == z.shape
    assert torch.allclose(x, dm.x_from_v_at(z, v, a), atol=1e-6)


def test_deterministic():
    den = model()
    z, a = inputs()
    assert torch.equal(den(z, a)[0], den(z, a)[0])


def test_scalar_alpha_accepted():
    den = model()
    z, _ = inputs()
    a = torch.full((3,), 0.3)
    assert torch.equal(den(z, 0.3)[0], den(z, a)[0])


def test_time_embed_properties():
    den = perturb(model())
    a = torch.linspace(0, 1, 1000)
    emb = den.time_embed(a)
    assert bool(torch.isfinite(emb).all())
    assert torch.equal(den.time_embed(a[:5]), den.time_embed(a[:5]))
    e0, e1 = den.time_embed(torch.tensor([0.0, 1.0]))
    assert e0.norm().item() != e1.norm().item()
    with pytest.raises(ValueError):
        den.time_embed(torch.tensor([1.5]))


def test_adaptive_norm_sites_counted():
    cfg = DenoiserConfig(latent_len=4, latent_dim=6, width=24, layers=12, heads=2, dense_connections=3)
    den = Denoiser(cfg)
    sites = [m for m in den.modules() if isinstance(m, AdaptiveLayerNorm)]
    assert len(sites) == cfg.layers + 1
    assert all(float(m.to_scale_shift.weight.abs().sum()) == 0 for m in sites)
    fused = [i for i, b in enumerate(den.blocks) if b.fuse is not None]
    assert fused == [9, 10, 11]


def test_dense_ablation_changes_output():
    z, a = inputs()
    with_skips = perturb(model())
    cfg0 = DenoiserConfig(**{**TINY.to_dict(), "dense_connections": 0})
    torch.manual_seed(0)
    without = Denoiser(cfg0).eval()
    # copy every shared weight so only the skip fusions differ
    state = {k: v for k, v in with_skips.state_dict().items() if k in without.state_dict()}
    without.load_state_dict(state)
    assert not torch.allclose(with_skips(z, a)[0], without(z, a)[0])


def test_self_conditioning_changes_output():
    den = perturb(model())
    z, a = inputs()
    prev = torch.randn_like(z)
    assert not torch.allclose(den(z, a)[0], den(z, a, Conditioning(self_cond=prev))[0])


def test_class_labels_required_and_effective():
    cfg = DenoiserConfig(**{**TINY.to_dict(), "num_classes": 2})
    den = perturb(model(cfg))
    z, a = inputs(cfg)
    with pytest.raises(ValueError):
        den(z, a)
    outs = [den(z, a, Conditioning(labels=torch.full((3,), c)))[0] for c in (0, 1, den.null_label)]
    assert not torch.allclose(outs[0], outs[1])
    assert not torch.allclose(outs[0], outs[2])


def test_cross_attention_source_and_drop():
    cfg = DenoiserConfig(**{**TINY.to_dict(), "cross_attention": True, "source_dim": 10})
    den = perturb(model(cfg))
    z, a = inputs(cfg)
    g = torch.Generator().manual_seed(2)
    src = torch.randn(3, 5, 10, generator=g)
    mask = torch.ones(3, 5, dtype=torch.bool)
    mask[1, 3:] = False
    with_src = den(z, a, Conditioning(source=src, source_mask=mask))[0]
    null = den(z, a, Conditioning())[0]
    assert not torch.allclose(with_src, null)
    # a dropped sample matches the no-source path exactly; kept ones are untouched
    drop = torch.tensor([True, False, False])
    mixed = den(z, a, Conditioning(source=src, source_mask=mask, source_drop=drop))[0]
    assert torch.allclose(mixed[0], null[0], atol=1e-6)
    assert torch.allclose(mixed[1:], with_src[1:], atol=1e-6)
    # padded source positions are ignored
    src2 = src.clone()
    src2[1, 3:] = 99.0
    assert torch.allclose(den(z, a, Conditioning(source=src2, source_mask=mask))[0], with_src, atol=1e-6)


def test_time_added_instead_of_appended():
    cfg = DenoiserConfig(**{**TINY.to_dict(), "time_as_token": False})
    den = model(cfg)
    assert den.pos.shape[0] == cfg.latent_len
    z, a = inputs(cfg)
    assert den(z, a)[0].shape == z.shape


def test_nan_input_fails_fast():
    den = model()
    z, a = inputs()
    z[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        den(z, a)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(layers=4, dense_connections=3)
    with pytest.raises(ValueError):
        DenoiserConfig(width=30, heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(cross_attention=True)


@pytest.mark.parametrize("extra", [{}, {"num_classes": 2}, {"cross_attention": True, "source_dim": 5}])
def test_gradient_matches_finite_differences(extra):
    cfg = DenoiserConfig(**{**TINY.to_dict(), **extra})
    den = perturb(model(cfg)).double()
    z, a = inputs(cfg, dtype=torch.float64)
    target = torch.randn(z.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
    cond = Conditioning(self_cond=torch.randn_like(z))
    if "num_classes" in extra:
        cond.labels = torch.tensor([0, 1, 2])
    if "source_dim" in extra:
        cond.source = torch.randn(3, 4, 5, dtype=torch.float64)

    def loss():
        return ((den(z, a, cond)[0] - target) ** 2).mean()

    assert fd_check(den, loss, n_params=15, seed=1) <= 1e-4
