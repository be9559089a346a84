import numpy as np
import pytest

from ucad.encoder import EncoderConfig, PromptSet, init_encoder, patchify
from ucad.numerics import finite_diff_grad, grad
from ucad.scl import SclConfig, train_prompts


def _images(n=2, size=16, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, size, size))


def test_same_seed_same_weights():
    a, b = init_encoder(EncoderConfig()), init_encoder(EncoderConfig())
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()


def test_seed_changes_weights():
    a, b = init_encoder(EncoderConfig(seed=0)), init_encoder(EncoderConfig(seed=1))
    assert any(not np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_weight_scale():
    enc = init_encoder(EncoderConfig())
    bound = 1 / np.sqrt(enc.config.embed_dim)
    assert all(np.abs(w).max() <= bound for w in enc.weights.values())


def test_heads_must_divide_embed_dim():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(embed_dim=65, num_heads=8)


@pytest.mark.parametrize("kw", [{"tap_layer": 0}, {"tap_layer": 7}, {"prompt_mode": "bogus"},
                                {"prompt_mode": "additive", "prompt_tokens": 2}])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        EncoderConfig(**kw)


def test_patchify_shapes():
    assert patchify(np.zeros((16, 16)), 8).shape == (4, 64)
    assert patchify(np.zeros((224, 224)), 16).shape[0] == 196
    assert patchify(np.zeros((16, 16, 3)), 8).shape == (4, 192)


def test_patchify_constant_and_layout():
    assert np.all(patchify(np.full((16, 16), 0.3), 8) == 0.3)
    img = np.arange(16 * 16, dtype=float).reshape(16, 16)
    tok = patchify(img, 8)
    np.testing.assert_array_equal(tok[1], img[0:8, 8:16].ravel())
    np.testing.assert_array_equal(tok[2], img[8:16, 0:8].ravel())


def test_patchify_non_divisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((10, 16)), 8)


def test_encode_shape_and_determinism():
    enc = init_encoder(EncoderConfig())
    img = _images(1, 64)[0]
    f1, f2 = enc.encode(img), enc.encode(img)
    assert f1.features.shape == (64, 64)
    assert (f1.grid_h, f1.grid_w) == (8, 8)
    assert f1.features.tobytes() == f2.features.tobytes()


@pytest.mark.parametrize("tap", range(1, 7))
def test_zero_prompts_are_identity(tap):
    enc = init_encoder(EncoderConfig(tap_layer=tap))
    img = _images(1, 32)[0]
    a = enc.encode(img).features
    b = enc.encode(img, PromptSet.zeros(enc.config)).features
    assert a.tobytes() == b.tobytes()


def test_prompt_layer_mismatch():
    enc = init_encoder(EncoderConfig(tap_layer=3))
    with pytest.raises(ValueError):
        enc.encode(_images(1, 16)[0], PromptSet(np.zeros((2, 1, 64))))


def test_prepend_mode_keeps_patch_count():
    enc = init_encoder(EncoderConfig(prompt_mode="prepend", prompt_tokens=5))
    p = PromptSet(np.random.default_rng(0).normal(size=(3, 5, 64)), mode="prepend")
    feats = enc.encode(_images(1, 32)[0], p).features
    assert feats.shape == (16, 64)
    assert not np.array_equal(feats, enc.encode(_images(1, 32)[0]).features)


@pytest.mark.parametrize("mode,tokens", [("additive", 1), ("prepend", 2)])
def test_prompt_gradient_matches_finite_differences(mode, tokens):
    cfg = EncoderConfig(patch_size=4, embed_dim=8, num_layers=2, num_heads=2, tap_layer=2,
                        prompt_mode=mode, prompt_tokens=tokens)
    enc = init_encoder(cfg)
    imgs = _images(2, 8)
    p0 = np.random.default_rng(1).normal(scale=0.3, size=(2, tokens, 8))
    w = np.random.default_rng(2).normal(size=(2, 4, 8))
    fn = lambda p: (enc.forward(imgs, p) * w).sum()
    (g,) = grad(fn, [p0])
    (f,) = finite_diff_grad(fn, [p0], h=1e-5)
    assert np.max(np.abs(g - f)) / np.max(np.abs(f)) <= 1e-4


def test_weights_frozen_through_training(tiny_encoder):
    before = tiny_encoder.fingerprint()
    imgs = _images(3, 8)
    labels = np.zeros((3, 2, 2), int)
    labels[:, :, 1] = 1
    train_prompts(tiny_encoder, imgs, labels, cfg=SclConfig(epochs=2))
    assert tiny_encoder.fingerprint() == before
    with pytest.raises(ValueError):
        tiny_encoder.weights["embed.w"][0, 0] = 1.0
