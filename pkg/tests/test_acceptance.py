"""End-to-end acceptance checks, one test per criterion.

The trained-model criteria share session fixtures that run the real
pipeline on synthetic grammars with the ``toy`` profile on one CPU thread.
Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import random
import time
from dataclasses import replace

import pytest
import torch

from latentlang import checkpoint as C
from latentlang import diffusion_math as dm
from latentlang.autoencoder import AutoencoderConfig, LanguageAutoencoder
from latentlang.config import build_config
from latentlang.data import pad_batch, synth_grammar, tokenize
from latentlang.denoiser import Conditioning, Denoiser, DenoiserConfig
from latentlang.metrics import NgramIndex, bleu, diversity, format_report, memorization, rouge
from latentlang.pipeline import (evaluate, generate, load_autoencoder, load_denoiser, reconstruction_accuracy,
                                 train_autoencoder, train_diffusion)
from latentlang.sampler import ddpm_sample, mbr_index, oracle_index

from criteria import record
from helpers import fd_check
from references import random_corpus, ref_bleu, ref_diversity, ref_memorization, ref_rouge

pytestmark = pytest.mark.slow

CORPUS_SIZE = 10_000
ARITH = ()
TOPICS = ("ae_train.steps=1000", "diff_train.steps=3000")
REVERSAL = ("ae_train.steps=1000", "diff_train.steps=3000")


def corpus_file(tmp_path_factory, grammar, n=CORPUS_SIZE, seed=0):
    synth = synth_grammar(grammar, n, seed=seed)
    path = tmp_path_factory.mktemp(grammar) / "corpus.txt"
    synth.write(path)
    return synth, path


def train(tmp_path_factory, grammar, mode, overrides):
    synth, path = corpus_file(tmp_path_factory, grammar)
    cfg = build_config("toy", mode, {"data": {"corpus": str(path)}}, overrides)
    out = path.parent
    t0 = time.time()
    ae_run = train_autoencoder(cfg, out)
    ae_time = time.time() - t0
    t0 = time.time()
    diff_run = train_diffusion(cfg, ae_run.checkpoint, out)
    return dict(synth=synth, cfg=cfg, out=out, ae=ae_run, ae_time=ae_time, diff=diff_run,
                diff_time=time.time() - t0)


@pytest.fixture(scope="session")
def arith(tmp_path_factory):
    return train(tmp_path_factory, "arith", "unconditional", ARITH)


@pytest.fixture(scope="session")
def topics(tmp_path_factory):
    return train(tmp_path_factory, "topics", "class", TOPICS)


@pytest.fixture(scope="session")
def reversal(tmp_path_factory):
    return train(tmp_path_factory, "reversal", "seq2seq", REVERSAL)


# ---- 1: math identities ----------------------------------------------------------

def test_criterion_01_math_identities():
    t0 = time.time()
    worst = 0.0
    f64 = torch.float64
    t = torch.linspace(0, 1, 1001, dtype=f64)
    cos, shifted = dm.COSINE, dm.NoiseSchedule("shifted-cosine", 0.3)
    ends_ok = all(abs(float(dm.alpha(s, 0.0)) - 1) <= 1e-9 and abs(float(dm.alpha(s, 1.0))) <= 1e-9
                  for s in (cos, shifted))
    mono_ok = all(bool((dm.alpha(s, t).diff() <= 0).all()) for s in (cos, shifted))
    identity = dm.NoiseSchedule("shifted-cosine", 1.0)
    worst = max(worst, float((dm.alpha(identity, t) - dm.alpha(cos, t)).abs().max()))
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1000, 4, 8, generator=g, dtype=f64)
    eps = torch.randn(1000, 4, 8, generator=g, dtype=f64)
    a = torch.rand(1000, generator=g, dtype=f64).view(-1, 1, 1) * 0.98 + 0.01
    z = dm.forward_sample_at(x, eps, a)
    v = dm.v_at(x, eps, a)
    worst = max(worst, float((dm.x_from_v_at(z, v, a) - x).abs().max()))
    worst = max(worst, float((dm.eps_from_v_at(z, v, a) - eps).abs().max()))
    # s = 0: the posterior collapses onto x
    for t_ in (0.01, 0.5, 0.99):
        post = dm.posterior(x, z, 0.0, t_)
        coef_x, coef_z, var = dm.posterior_coefficients(1.0, float(dm.alpha(cos, t_)))
        worst = max(worst, float((post.mean - x).abs().max()), post.variance, abs(coef_x - 1), abs(coef_z), var)
    elapsed = time.time() - t0
    ok = ends_ok and mono_ok and worst <= 1e-9 and elapsed < 5
    record(1, ok, f"endpoints={ends_ok} monotone={mono_ok} max identity error {worst:.1e} (<= 1e-9) "
                  f"in {elapsed:.2f}s (< 5s)")
    assert ok


# ---- 2: gradient checks ------------------------------------------------------------

def test_criterion_02_gradient_checks():
    t0 = time.time()
    torch.manual_seed(0)
    ae_cfg = AutoencoderConfig(vocab_size=23, max_len=12, d_model=16, heads=2, encoder_layers=2, decoder_layers=2,
                               compress_layers=1, reconstruct_layers=1, latent_len=4, latent_dim=8)
    ae = LanguageAutoencoder(ae_cfg).double()
    ids, mask = pad_batch([[1, 5, 9, 11, 2], [1, 7, 2]])
    ae_err = fd_check(ae, lambda: ae.loss(ids, mask), n_params=20, seed=0)

    den_cfg = DenoiserConfig(latent_len=4, latent_dim=6, width=16, layers=2, heads=2, dense_connections=1,
                             dropout=0.0)
    den = Denoiser(den_cfg).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # modulation starts at zero; perturb so every path carries gradient
        for p in den.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    z = torch.randn(3, 4, 6, generator=g, dtype=torch.float64)
    a = torch.rand(3, generator=g, dtype=torch.float64)
    target = torch.randn(3, 4, 6, generator=g, dtype=torch.float64)
    cond = Conditioning(self_cond=torch.randn(3, 4, 6, generator=g, dtype=torch.float64))
    den_err = fd_check(den, lambda: ((den(z, a, cond)[0] - target) ** 2).mean(), n_params=20, seed=1)
    elapsed = time.time() - t0
    ok = ae_err <= 1e-4 and den_err <= 1e-4 and elapsed < 120
    record(2, ok, f"autoencoder rel err {ae_err:.1e}, denoiser rel err {den_err:.1e} (<= 1e-4) "
                  f"in {elapsed:.1f}s (< 120s)")
    assert ok


# ---- 3: analytic sampler oracle -------------------------------------------------------

def test_criterion_03_analytic_sampler():
    mu, sigma = 1.5, 0.7

    def predict(z, alpha_t, prev):
        a = alpha_t.view(-1, 1, 1)
        return mu + a.sqrt() * sigma ** 2 / (a * sigma ** 2 + 1 - a) * (z - a.sqrt() * mu)

    t0 = time.time()
    x = ddpm_sample(predict, (10_000, 1, 1), 250, generator=torch.Generator().manual_seed(0),
                    dtype=torch.float64)
    elapsed = time.time() - t0
    mean, var = float(x.mean()), float(x.var())
    ok = abs(mean - mu) <= 0.05 and abs(var - sigma ** 2) <= 0.1 * sigma ** 2 and elapsed < 300
    record(3, ok, f"mean {mean:.4f} (target {mu}, tol 0.05), variance {var:.4f} (target {sigma ** 2:.2f}, "
                  f"tol 10%) in {elapsed:.1f}s (< 300s)")
    assert ok


# ---- 4: autoencoder reconstruction ----------------------------------------------------------

def test_criterion_04_autoencoder_reconstruction(arith):
    run = arith["ae"]
    corpus = run.corpus
    tok_acc, exact = reconstruction_accuracy(run.model, corpus.test)
    steps = run.checkpoint.extra["ae_steps"]
    vocab_ok = len(corpus.vocab) <= 200
    len_ok = max(len(e.ids) for e in corpus.train + corpus.valid + corpus.test) <= 64
    init, final = sum(run.losses[:20]) / 20, sum(run.losses[-100:]) / 100
    minutes = arith["ae_time"] / 60
    ok = (tok_acc >= 0.99 and steps <= 20_000 and minutes <= 30 and vocab_ok and len_ok
          and final < 0.1 * init and len(corpus.train) + len(corpus.valid) + len(corpus.test) == CORPUS_SIZE)
    record(4, ok, f"held-out token accuracy {tok_acc:.4f} (>= 0.99), exact {exact:.4f}, {steps} steps "
                  f"(<= 20000), {minutes:.1f} min (<= 30), vocab {len(corpus.vocab)}, "
                  f"loss {init:.3f} -> {final:.4f}")
    assert ok


# ---- 5: unconditional generation ------------------------------------------------------------

def test_criterion_05_unconditional_generation(arith):
    run, cfg = arith["diff"], arith["cfg"]
    ae, vocab = run.autoencoder, run.corpus.vocab
    check = arith["synth"].validators["all"]
    index = NgramIndex([tokenize(e.text) for e in run.corpus.train])
    stats = {}
    for steps in (250, 50):
        c = replace(cfg, sampler=replace(cfg.sampler, steps=steps))
        gen = generate(c, ae, run.ema_model, vocab, 1000)
        samples = [tokenize(t) for t in gen.texts]
        stats[steps] = (sum(map(check, gen.texts)) / 1000, diversity(samples), memorization(samples, index))
    valid, div, mem = stats[250]
    ok_quality = valid >= 0.9 and div > 0 and mem < 1.0
    ok_direction = stats[50][1] > div and stats[50][2] < mem
    ok = ok_quality and ok_direction
    record(5, ok, f"T=250 valid {valid:.3f} (>= 0.9) div {div:.4f} mem {mem:.4f}; T=50 valid {stats[50][0]:.3f} "
                  f"div {stats[50][1]:.4f} mem {stats[50][2]:.4f}; need div50 > div250 and mem50 < mem250")
    assert ok


# ---- 6: class-conditional diagonal dominance --------------------------------------------------

def test_criterion_06_class_conditional(topics):
    run, cfg = topics["diff"], topics["cfg"]
    names = run.checkpoint.extra["labels"]
    validators = topics["synth"].validators
    rates = {}
    for c in names:
        gen = generate(cfg, run.autoencoder, run.ema_model, run.corpus.vocab, 250, labels=[c] * 250,
                       label_names=names)
        good = [validators[c](t) and not any(validators[o](t) for o in names if o != c) for t in gen.texts]
        rates[c] = sum(good) / len(good)
    ok = all(r >= 0.95 for r in rates.values())
    record(6, ok, "in-class and out-of-class rejection rate " +
           ", ".join(f"{c} {r:.3f}" for c, r in rates.items()) + " (each >= 0.95)")
    assert ok


# ---- 7: seq2seq ordering and guidance ----------------------------------------------------------

def seq2seq_scores(run, cfg, w, n_sources=100, k=5):
    c = replace(cfg, sampler=replace(cfg.sampler, guidance_w=w))
    examples = run.corpus.valid[:n_sources]
    gen = generate(c, run.autoencoder, run.ema_model, run.corpus.vocab, len(examples),
                   sources=[e.source for e in examples], candidates=k, select="mbr")
    totals = {"oracle": 0.0, "mbr": 0.0, "random": 0.0}
    for group, ex in zip(gen.candidates, examples):
        ref = tokenize(ex.text)
        totals["oracle"] += rouge(group[oracle_index(group, ref)], ref)[2]
        totals["mbr"] += rouge(group[mbr_index(group)], ref)[2]
        totals["random"] += rouge(group[0], ref)[2]
    return {key: v / len(examples) for key, v in totals.items()}


def test_criterion_07_seq2seq_selection_and_guidance(reversal):
    run, cfg = reversal["diff"], reversal["cfg"]
    runs = {w: seq2seq_scores(run, cfg, w) for w in (1.0, 2.0)}
    ordered = all(s["oracle"] >= s["mbr"] >= s["random"] for s in runs.values())
    guided = runs[2.0]["mbr"] >= runs[1.0]["mbr"]
    ok = ordered and guided
    detail = "; ".join(f"w={w}: oracle-5 {s['oracle']:.2f} mbr-5 {s['mbr']:.2f} random {s['random']:.2f}"
                       for w, s in runs.items())
    record(7, ok, f"ROUGE-L {detail}; ordering {ordered}, w=2 >= w=1 {guided}")
    assert ok


# ---- 8: metric oracles ---------------------------------------------------------------------

def test_criterion_08_metric_oracles():
    t0 = time.time()
    rng = random.Random(8)
    mismatches = 0
    for _ in range(1000):
        samples, train = random_corpus(rng), random_corpus(rng, vocab="abc")
        refs = [random_corpus(rng, n_max=1)[0] for _ in samples]
        mismatches += diversity(samples) != ref_diversity(samples)
        mismatches += memorization(samples, NgramIndex(train)) != ref_memorization(samples, train)
        mismatches += any(rouge(c, r) != ref_rouge(c, r) for c, r in zip(samples, refs))
        mismatches += bleu(samples, refs) != ref_bleu(samples, refs)
    elapsed = time.time() - t0
    ok = mismatches == 0 and elapsed < 60
    record(8, ok, f"{mismatches} mismatches over 1000 random corpora (Div, Mem, ROUGE, BLEU; exact) "
                  f"in {elapsed:.1f}s (< 60s)")
    assert ok


# ---- 9: determinism --------------------------------------------------------------------------

TINY = ("ae.d_model=32", "ae.heads=2", "ae.latent_len=4", "ae.latent_dim=8", "ae_train.steps=30",
        "ae_train.batch_size=16", "ae_train.warmup_steps=5", "ae_train.log_every=10",
        "denoiser.width=32", "denoiser.layers=2", "denoiser.heads=2", "denoiser.dense_connections=1",
        "diff_train.steps=30", "diff_train.batch_size=16", "diff_train.warmup_steps=5", "diff_train.log_every=10",
        "sampler.steps=10")


def test_criterion_09_determinism(tmp_path):
    synth = synth_grammar("arith", 300, seed=9)
    synth.write(tmp_path / "c.txt")
    artefacts = []
    for name in ("a", "b"):
        out = tmp_path / name
        cfg = build_config("toy", file={"data": {"corpus": str(tmp_path / "c.txt")}}, overrides=TINY, seed=9)
        ae_run = train_autoencoder(cfg, out)
        run = train_diffusion(cfg, ae_run.checkpoint, out)
        gen = generate(cfg, run.autoencoder, run.ema_model, run.corpus.vocab, 20, candidates=2)
        metrics, _ = evaluate(gen.texts, [e.text for e in run.corpus.train])
        artefacts.append({f: (out / f).read_bytes() for f in ("ae.ckpt", "model.ckpt", "ae_scalars.tsv",
                                                                 "diff_scalars.tsv")}
                         | {"report": format_report(metrics).encode()})
    same = [k for k in artefacts[0] if artefacts[0][k] == artefacts[1][k]]
    ok = len(same) == len(artefacts[0])
    record(9, ok, f"bitwise identical across two seeded single-thread runs: {sorted(same)}")
    assert ok


# ---- 10: checkpoint round trip ----------------------------------------------------------------

def test_criterion_10_checkpoint_roundtrip(arith, tmp_path):
    src = arith["out"] / "model.ckpt"
    data = src.read_bytes()
    ck = C.load_checkpoint(src)
    C.save_checkpoint(tmp_path / "again.ckpt", ck)
    bitwise = (tmp_path / "again.ckpt").read_bytes() == data
    ae, _ = load_autoencoder(ck)
    den = load_denoiser(ck)
    weights_ok = all(torch.equal(v, arith["diff"].ema_model.state_dict()[k]) for k, v in den.state_dict().items())
    rng = random.Random(10)
    flips = 0
    positions = [rng.randrange(len(data)) for _ in range(200)]
    for pos in positions:
        bad = bytearray(data)
        bad[pos] ^= 1 << rng.randrange(8)
        try:
            C.from_bytes(bytes(bad))
        except C.CheckpointError:
            flips += 1
    truncations = 0
    for cut in (1, 100, len(data) // 2):
        try:
            C.from_bytes(data[:-cut])
        except C.CheckpointError:
            truncations += 1
    ok = bitwise and weights_ok and flips == len(positions) and truncations == 3
    record(10, ok, f"save->load->save bitwise {bitwise}, EMA weights restored {weights_ok}, "
                   f"{flips}/{len(positions)} bit flips and {truncations}/3 truncations detected")
    assert ok
