"""Smoke tests for the python bindings."""

import numpy as np
import pytest

import miaformer as mf


@pytest.fixture(scope="module")
def cfg():
    return mf.Config.tiny()


@pytest.fixture(scope="module")
def model(cfg):
    return mf.Model.init(cfg, seed=7)


@pytest.fixture(scope="module")
def images():
    pixels, labels = mf.synth_generate(10, 8, seed=3)
    return pixels.astype(np.float64) / 255.0, labels.astype(int).tolist()


def test_config_fields(cfg):
    assert cfg.num_blocks == 4
    assert cfg.num_heads == 4
    assert cfg.head_dim == 16
    assert cfg.num_tokens == 16
    assert cfg.embed_dim == 64
    text = cfg.to_json()
    assert mf.Config(text).to_json() == text


def test_synth_determinism():
    a, la = mf.synth_generate(10, 20, seed=5)
    b, lb = mf.synth_generate(10, 20, seed=5)
    assert a.shape == (20, 3, 32, 32)
    assert np.array_equal(a, b)
    assert np.array_equal(la, lb)
    c, _ = mf.synth_generate(10, 20, seed=6)
    assert not np.array_equal(a, c)


def test_forward_shapes_and_policies(model, images):
    x, labels = images
    logits, traces = model.forward(x, labels)
    assert logits.shape == (8, 10)
    assert np.isfinite(logits).all()
    assert len(traces) == 8
    assert len(traces[0]["blocks"]) == 4

    logits_on, traces_on = model.forward(x, labels, policy="all-on")
    assert all(t["exec_ratio"] == 1.0 for t in traces_on)
    logits_skip, traces_skip = model.forward(x, labels, policy="all-skip")
    assert all(b["skipped"] for t in traces_skip for b in t["blocks"])
    assert all(t["exec_ratio"] < 1.0 for t in traces_skip)


def test_flops_accounting(cfg):
    msa, mlp = mf.block_flops(cfg.num_heads, cfg.num_tokens, cfg)
    assert msa > 0 and mlp > 0
    msa_h, mlp_h = mf.block_flops(cfg.num_heads // 2, cfg.num_tokens, cfg)
    assert mlp_h == pytest.approx(mlp / 4.0)
    assert mf.controller_flops(cfg, True) < mf.controller_flops(cfg, False)
    assert mf.total_model_flops(cfg) > 0


def test_gumbel_binary():
    hard, soft = mf.gumbel_binary(3.0, 1.0, "eval")
    assert hard == 1
    hard0, soft0 = mf.gumbel_binary(0.0, 1.0, "eval")
    assert soft0 == pytest.approx(0.5)
    assert hard0 == 1  # tie keeps
    keeps = sum(mf.gumbel_binary(0.0, 1.0, "train", seed=i)[0] for i in range(2000))
    assert abs(keeps / 2000 - 0.5) < 0.05


def test_attacks_respect_norms(model, images):
    x, labels = images
    adv = model.pgd_attack(x, labels, epsilon=0.002, steps=3)
    delta = np.abs(adv - x)
    assert delta.max() <= 0.002
    assert adv.min() >= 0.0 and adv.max() <= 1.0

    adv2 = model.fgsm_l2_attack(x, labels, epsilon=0.03)
    norms = np.sqrt(((adv2 - x) ** 2).reshape(len(x), -1).sum(axis=1))
    assert (norms <= 0.03 + 1e-12).all()


def test_skip_ratio_stats(model, images):
    x, _ = images
    rows = mf.skip_ratio_stats(model, x)
    assert len(rows) == model.cfg.num_blocks
    for r in rows:
        assert 0.0 <= r["block_skip"] <= 1.0
        assert 0.0 <= r["head_skip"] <= 1.0
        assert 0.0 <= r["token_skip"] <= 1.0
