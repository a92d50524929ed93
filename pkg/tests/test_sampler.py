import itertools

import pytest
import torch

from latentlang import diffusion_math as dm
from latentlang.denoiser import Conditioning, Denoiser, DenoiserConfig
from latentlang.sampler import (SampleTrace, SamplerConfig, SamplingError, cfg_predict, ddpm_sample, mbr_index,
                                mbr_scores, mbr_select, neg_rouge_l, oracle_index, repeat_conditioning,
                                sample_latents)

MU, SIGMA = 1.5, 0.7


def gaussian_predictor(mu=MU, sigma=SIGMA):
    # exact posterior mean E[x | z_t] for x ~ N(mu, sigma^2)
    def predict(z, alpha_t, prev):
        a = alpha_t.view(-1, *([1] * (z.dim() - 1)))
        gain = a.sqrt() * sigma ** 2 / (a * sigma ** 2 + 1 - a)
        return mu + gain * (z - a.sqrt() * mu)
    return predict


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_analytic_oracle_recovers_gaussian():
    x = ddpm_sample(gaussian_predictor(), (10_000, 1, 1), 250, generator=gen(), dtype=torch.float64)
    assert abs(float(x.mean()) - MU) <= 0.05
    assert abs(float(x.var()) - SIGMA ** 2) <= 0.1 * SIGMA ** 2


def test_single_transition_returns_estimate():
    seen = []

    def predict(z, alpha_t, prev):
        seen.append((z.clone(), float(alpha_t[0]), prev))
        return torch.full_like(z, 3.0)

    out = ddpm_sample(predict, (2, 3, 4), 1, generator=gen())
    assert len(seen) == 1 and seen[0][1] == pytest.approx(0.0, abs=1e-12) and seen[0][2] is None
    assert torch.equal(out, torch.full((2, 3, 4), 3.0))


def test_noise_variance_matches_generative_variance():
    trace = SampleTrace()
    ddpm_sample(gaussian_predictor(), (4, 1, 1), 40, generator=gen(), dtype=torch.float64, trace=trace)
    assert len(trace.noise_var) == 40
    assert trace.t[0] == 1.0 and trace.s[-1] == 0.0
    for t, s, v in zip(trace.t[:-1], trace.s[:-1], trace.noise_var[:-1]):
        assert v == pytest.approx(dm.generative_variance(s, t), rel=1e-12)
        assert 0 < v <= 1
    assert trace.noise_var[-1] == 0.0
    assert len(trace.to_tsv().splitlines()) == 41


def test_self_cond_absent_only_on_first_step():
    prevs, outs = [], []

    def predict(z, alpha_t, prev):
        prevs.append(prev)
        out = torch.randn(z.shape, generator=gen(len(outs)))
        outs.append(out)
        return out

    ddpm_sample(predict, (2, 3, 4), 6, generator=gen())
    assert prevs[0] is None
    for i in range(1, 6):
        assert torch.equal(prevs[i], outs[i - 1])


def test_rescaled_estimates_have_fixed_row_norm():
    trace = SampleTrace()
    prevs = []

    def predict(z, alpha_t, prev):
        prevs.append(prev)
        return 5.0 * z + 1.0

    out = ddpm_sample(predict, (3, 4, 8), 10, generator=gen(), rescale_estimates=True,
                      dtype=torch.float64, trace=trace)
    assert torch.allclose(out.norm(dim=-1), torch.full((3, 4), 8 ** 0.5, dtype=torch.float64), atol=1e-9)
    for p in prevs[1:]:
        assert torch.allclose(p.norm(dim=-1), torch.full((3, 4), 8 ** 0.5, dtype=torch.float64), atol=1e-9)
    assert all(v == pytest.approx(8 ** 0.5) for v in trace.x_norm)


def test_non_finite_estimate_raises():
    def predict(z, alpha_t, prev):
        return torch.full_like(z, float("nan"))

    with pytest.raises(SamplingError, match="step 0"):
        ddpm_sample(predict, (1, 1, 1), 5, generator=gen())


def test_seeded_reproducibility():
    a = ddpm_sample(gaussian_predictor(), (5, 2, 2), 20, generator=gen(7))
    b = ddpm_sample(gaussian_predictor(), (5, 2, 2), 20, generator=gen(7))
    c = ddpm_sample(gaussian_predictor(), (5, 2, 2), 20, generator=gen(8))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_w=-0.5)


# ---- guidance ------------------------------------------------------------------

def guided_model():
    cfg = DenoiserConfig(latent_len=3, latent_dim=4, width=16, layers=2, heads=2, dense_connections=1,
                         num_classes=2, dropout=0.0)
    torch.manual_seed(0)
    den = Denoiser(cfg).eval()
    g = gen(1)
    with torch.no_grad():
        for p in den.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g))
    return den


@pytest.mark.parametrize("w", [0.0, 1.0, 2.0, 3.5])
def test_guidance_matches_independent_forwards(w):
    den = guided_model()
    z = torch.randn(4, 3, 4, generator=gen(2))
    a = torch.full((4,), 0.4)
    labels = torch.tensor([0, 1, 1, 0])
    with torch.no_grad():
        x_c = den(z, a, Conditioning(labels=labels))[1]
        x_u = den(z, a, Conditioning(labels=torch.full((4,), den.null_label)))[1]
    got = cfg_predict(den, z, a, Conditioning(labels=labels), w)
    assert torch.allclose(got, w * x_c + (1 - w) * x_u, atol=1e-6)


def test_negative_guidance_rejected():
    den = guided_model()
    with pytest.raises(ValueError):
        cfg_predict(den, torch.zeros(1, 3, 4), torch.full((1,), 0.5), Conditioning(labels=torch.tensor([0])), -1.0)


def test_sample_latents_batches_slice_conditioning():
    den = guided_model()
    labels = torch.tensor([0, 1, 0, 1, 1])
    cfg = SamplerConfig(steps=3, guidance_w=2.0, batch_size=2, seed=3)
    out = sample_latents(den, 5, cfg, Conditioning(labels=labels))
    assert out.shape == (5, 3, 4)
    assert torch.equal(out, sample_latents(den, 5, cfg, Conditioning(labels=labels)))


def test_repeat_conditioning_interleaves():
    cond = repeat_conditioning(Conditioning(labels=torch.tensor([3, 7])), 3)
    assert cond.labels.tolist() == [3, 3, 3, 7, 7, 7]


# ---- candidate selection --------------------------------------------------------

A, B = "the cat sat on the mat".split(), "a dog ran far away".split()


def test_mbr_majority_wins():
    assert mbr_select([A, A, B]) == A
    assert mbr_index([B, A, A]) == 1


def test_mbr_singleton_and_empty():
    assert mbr_select([B]) == B
    with pytest.raises(ValueError):
        mbr_select([])
    with pytest.raises(ValueError):
        oracle_index([], A)


def test_mbr_ties_take_lowest_index():
    assert mbr_index([A, B]) == 0
    assert mbr_index([B, A]) == 0


def test_mbr_matches_brute_force():
    words = "a b c d e".split()
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        cands = [[words[int(i)] for i in torch.randint(5, (int(torch.randint(1, 8, (1,), generator=g)),),
                                                      generator=g)] for _ in range(5)]
        risk = [sum(neg_rouge_l(c, o) for o in cands) for c in cands]
        best = min(range(5), key=lambda i: (risk[i], i))
        assert mbr_index(cands) == best
        assert mbr_scores(cands) == pytest.approx([r / 5 for r in risk])


def test_oracle_never_below_mbr():
    words = "a b c d".split()
    g = torch.Generator().manual_seed(1)

    def rand_seq():
        return [words[int(i)] for i in torch.randint(4, (int(torch.randint(1, 7, (1,), generator=g)),),
                                                      generator=g)]
    for _ in range(200):
        cands, ref = [rand_seq() for _ in range(5)], rand_seq()
        oracle = -neg_rouge_l(cands[oracle_index(cands, ref)], ref)
        mbr = -neg_rouge_l(mbr_select(cands), ref)
        assert oracle >= mbr
        assert oracle == max(-neg_rouge_l(c, ref) for c in cands)


def test_permutation_exhaustive_selection_stable():
    cands = [A, A[:4], B, A[1:]]
    chosen = mbr_select(cands)
    for perm in itertools.permutations(cands):
        assert mbr_select(list(perm)) == chosen
