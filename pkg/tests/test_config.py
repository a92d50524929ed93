import json

import pytest

from latentlang.config import PAPER_PINS, PROFILES, ConfigError, build_config, from_dict, parse_override


@pytest.mark.parametrize("profile", PROFILES)
def test_profiles_build_and_roundtrip(profile):
    cfg = build_config(profile)
    assert cfg.profile == profile
    assert (cfg.denoiser.latent_len, cfg.denoiser.latent_dim) == (cfg.ae.latent_len, cfg.ae.latent_dim)
    again = from_dict(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict()


def test_paper_profile_values():
    cfg = build_config("paper")
    for (section, key), want in PAPER_PINS.items():
        assert getattr(getattr(cfg, section), key) == want
    assert cfg.denoiser.dense_connections == 3
    assert cfg.diff_train.lr == 2e-4 and cfg.diff_train.batch_size == 128
    assert cfg.ae_train.lr == 1e-4 and cfg.ae_train.steps == 50_000


def test_paper_pins_enforced():
    with pytest.raises(ConfigError, match="paper profile pins"):
        build_config("paper", overrides=("sampler.steps=50",))
    # other profiles are free to change them
    assert build_config("desk", overrides=("sampler.steps=50",)).sampler.steps == 50


def test_layering_order():
    file = {"profile": "toy", "diff_train": {"lr": 1e-3, "steps": 10}}
    cfg = build_config(file=file, overrides=("diff_train.steps=20",))
    assert cfg.profile == "toy"
    assert cfg.diff_train.lr == 1e-3 and cfg.diff_train.steps == 20
    assert cfg.ae.d_model == 64
    # explicit profile argument beats the file's
    assert build_config("desk", file=file).ae.d_model == 256


def test_seq2seq_mode_defaults_and_override():
    cfg = build_config("toy", "seq2seq")
    assert cfg.sampler.guidance_w == 2.0 and cfg.diff_train.loss == "l1"
    assert build_config("toy", "seq2seq", overrides=("sampler.guidance_w=1",)).sampler.guidance_w == 1.0


def test_seed_propagates_unless_set():
    cfg = build_config("toy", seed=5, overrides=("sampler.seed=9",))
    assert cfg.seed == cfg.ae_train.seed == cfg.diff_train.seed == 5
    assert cfg.sampler.seed == 9


def test_latent_shape_follows_autoencoder():
    cfg = build_config("toy", overrides=("ae.latent_len=8",))
    assert cfg.denoiser.latent_len == 8
    with pytest.raises(ConfigError, match="latent shape"):
        build_config("toy", overrides=("denoiser.latent_len=7",))


@pytest.mark.parametrize("text,want", [("a.b=3", ("a", "b", 3)), ("a.b=x y", ("a", "b", "x y")),
                                       ("seed=2", ("seed", None, 2)), ("a.b=true", ("a", "b", True)),
                                       ("a.b=[0.9, 0.99]", ("a", "b", [0.9, 0.99]))])
def test_parse_override(text, want):
    assert parse_override(text) == want


@pytest.mark.parametrize("overrides", [("nope.x=1",), ("ae.nope=1",), ("colour=1",), ("a.b.c=1",), ("novalue",),
                                       ("ae.heads=3",), ("schedule.kind=linear",), ("data.max_len=500",),
                                       ("diff_train.grad_clip=0",)])
def test_invalid_configs_rejected(overrides):
    with pytest.raises(ConfigError):
        build_config("toy", overrides=overrides)


def test_unknown_profile_and_mode():
    with pytest.raises(ConfigError):
        build_config("huge")
    with pytest.raises(ConfigError):
        build_config("toy", "translate")
