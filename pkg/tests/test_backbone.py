import math

import numpy as np
import pytest

from layerflow_kit import tensor as T
from layerflow_kit.backbone import MASK_BIAS, BackboneConfig, Denoiser, sinusoid
from layerflow_kit.tensor import Tensor, finite_diff_check
from layerflow_kit.textcond import PAD, encode

WORDS = ["1,", "2,", "3,", "a", "red", "ball", "blue", "sky"]


def small_model(n_blocks=6, seed=0, **kw):
    cfg = BackboneConfig(d_model=16, n_blocks=n_blocks, n_heads=2, frames=1, height=8, width=8,
                         text_len=4, n_timesteps=10, **kw)
    return Denoiser(cfg, WORDS, seed=seed)


def randomize(model, rng, scale=0.3):
    """Give the zero-initialised parts (modulation, head) non-trivial values."""
    for name, p in model.named_parameters().items():
        if not p.data.any():
            p.data = rng.normal(0.0, scale, p.shape).astype(np.float32)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(n_blocks=4)
    with pytest.raises(ValueError):
        BackboneConfig(height=10)
    cfg = BackboneConfig()
    assert cfg.trainable_blocks == (5,)
    assert BackboneConfig(n_blocks=12).trainable_blocks == (10, 11)
    assert cfg.video_tokens == 4 * 4 * 16 and cfg.patch_dim == 48


def test_sinusoid_phase_zero():
    s = sinusoid(0, 8)
    np.testing.assert_array_equal(s[:4], 0.0)
    np.testing.assert_array_equal(s[4:], 1.0)


def test_timestep_embed_determinism_and_distinctness():
    m = small_model()
    randomize(m, np.random.default_rng(0))
    np.testing.assert_array_equal(m.timestep_embed(3).data, m.timestep_embed(3).data)
    outs = [m.timestep_embed(t).data for t in range(10)]
    for i in range(10):
        for j in range(i + 1, 10):
            assert not np.array_equal(outs[i], outs[j])
    with pytest.raises(ValueError):
        m.timestep_embed(10)


def oracle_attention(x, Wq, Wk, Wv, Wo, heads, key_bias=None):
    L, d = x.shape
    hd = d // heads
    q, k, v = x @ Wq, x @ Wk, x @ Wv
    out = np.zeros((L, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        if key_bias is not None:
            s = s + key_bias
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return out @ Wo


def test_attention_single_token():
    m = small_model()
    b = m.blocks[0]
    x = np.random.default_rng(1).normal(size=(1, 16)).astype(np.float32)
    out = m.attention(Tensor(x), b).data
    expected = (x @ b.params["attn.v"].data) @ b.params["attn.o"].data
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_attention_equal_keys_average_values():
    m = small_model()
    b = m.blocks[0]
    b.params["attn.k"].data = np.zeros((16, 16), np.float32)
    x = np.random.default_rng(2).normal(size=(5, 16)).astype(np.float32)
    out = m.attention(Tensor(x), b).data
    v = x @ b.params["attn.v"].data
    expected = np.tile(v.mean(axis=0), (5, 1)) @ b.params["attn.o"].data
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_attention_hand_set_oracle():
    cfg = BackboneConfig(d_model=4, n_blocks=6, n_heads=1, frames=1, height=4, width=4, text_len=2)
    m = Denoiser(cfg, WORDS)
    b = m.blocks[0]
    Wq = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 1]], np.float32)
    Wk = np.eye(4, dtype=np.float32) * 0.5
    Wv = np.arange(16, dtype=np.float32).reshape(4, 4) / 10
    Wo = np.eye(4, dtype=np.float32)[::-1].copy()
    for name, W in zip(("q", "k", "v", "o"), (Wq, Wk, Wv, Wo)):
        b.params[f"attn.{name}"].data = W
    x = np.array([[1, 2, 0, -1], [0.5, 0, 1, 1], [-1, 1, 2, 0]], np.float32)
    np.testing.assert_allclose(m.attention(Tensor(x), b).data, oracle_attention(x, Wq, Wk, Wv, Wo, 1),
                               atol=1e-5)


def test_attention_multihead_random_oracle():
    m = small_model()
    b = m.blocks[1]
    x = np.random.default_rng(3).normal(size=(7, 16)).astype(np.float32)
    p = b.params
    expected = oracle_attention(x, *(p[f"attn.{n}"].data for n in "qkvo"), heads=2)
    np.testing.assert_allclose(m.attention(Tensor(x), b).data, expected, atol=1e-5)


def test_zero_head_predicts_zero():
    m = small_model()
    rng = np.random.default_rng(4)
    ctx = encode(["a red ball", "blue sky", ""], m.vocab, m.layers, 4)
    x = rng.normal(size=(m.config.video_tokens, 48)).astype(np.float32)
    out = m.forward(x, ctx, 7)
    assert out.shape == (16, 48)
    np.testing.assert_array_equal(out.data, 0.0)


def test_pad_permutation_invariance():
    m = small_model()
    randomize(m, np.random.default_rng(5))
    ctx = encode(["a", "blue sky", "red"], m.vocab, m.layers, 4)
    x = np.random.default_rng(6).normal(size=(16, 48)).astype(np.float32)
    base = m.forward(x, ctx, 3).data
    emb = ctx.embeddings.data.copy()
    pads = np.flatnonzero(ctx.ids[:4] == PAD)
    assert len(pads) >= 2
    emb[[pads[0], pads[1]]] = emb[[pads[1], pads[0]]]
    ctx.embeddings = Tensor(emb)
    np.testing.assert_array_equal(m.forward(x, ctx, 3).data, base)


def test_dropping_pad_keys_matches_masked_attention_oracle():
    m = small_model()
    b = m.blocks[2]
    rng = np.random.default_rng(7)
    x = rng.normal(size=(9, 16)).astype(np.float32)
    pad = np.array([False, True, True, False, False, False, False, False, False])
    bias = np.where(pad, MASK_BIAS, 0.0).astype(np.float32)
    masked = m.attention(Tensor(x), b, key_bias=bias).data
    dropped = m.attention(Tensor(x[~pad]), b).data
    np.testing.assert_allclose(masked[~pad], dropped, atol=1e-6)
    p = b.params
    np.testing.assert_allclose(masked, oracle_attention(x, *(p[f"attn.{n}"].data for n in "qkvo"), 2, bias),
                               atol=1e-5)


def test_forward_rejects_bad_tokens_and_gate():
    m = small_model()
    ctx = encode(["", "", ""], m.vocab, m.layers, 4)
    with pytest.raises(T.ShapeError):
        m.forward(np.zeros((16, 12), np.float32), ctx, 0)
    with pytest.raises(ValueError):
        m.forward(np.zeros((16, 48), np.float32), ctx, 0, gate_alpha=0.5)


def test_one_block_loss_gradient_matches_finite_differences():
    cfg = BackboneConfig(d_model=8, n_blocks=6, n_heads=2, patch=2, frames=1, height=2, width=2, text_len=2,
                         n_timesteps=10)
    rng = np.random.default_rng(8)
    m = Denoiser(cfg, WORDS, seed=1)
    m.blocks = m.blocks[:1]
    randomize(m, rng)
    ctx = encode(["red", "", ""], m.vocab, m.layers, 2)
    target = rng.normal(size=(4, 12))

    def loss(tokens):
        return T.mse(m.forward(tokens, ctx, 4), target)

    x = Tensor(rng.normal(size=(4, 12)))
    rep = finite_diff_check(loss, x, tol=5e-3)
    assert rep.passed, rep

    def mean_out(tokens):
        return T.mean(m.forward(tokens, ctx, 4))

    assert finite_diff_check(mean_out, x, tol=5e-3).passed


def test_named_parameters_are_stable_and_complete():
    m = small_model()
    names = list(m.named_parameters())
    assert names == list(m.named_parameters())
    assert "text.vocab" in names and "final.head.weight" in names
    assert sum(n.startswith("blocks.0.") for n in names) == 10
    m.attach_adapters("motion")
    lora = [n for n in m.named_parameters() if ".lora." in n]
    assert lora == [f"blocks.5.attn.{p}.lora.motion.{x}" for p in "kqv" for x in "AB"]
