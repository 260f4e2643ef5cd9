import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerflow_kit.layerpack import (VARIANTS, ConditionMask, IdentityEmbedding, LatentEmbedding,
                                     LayerQuadruple, PackedSequence, apply_condition, composite,
                                     load_quadruple, pack, patchify, position_ids, quadruple_bytes,
                                     save_quadruple, unpack, unpatchify)
from layerflow_kit.tensor import ShapeError


def random_quadruple(rng, f=2, h=8, w=8, prompts=("a", "b", "c")):
    fg = rng.random((f, h, w, 3), dtype=np.float32)
    alpha = rng.random((f, h, w, 1), dtype=np.float32)
    bg = rng.random((f, h, w, 3), dtype=np.float32)
    return LayerQuadruple(fg, alpha, bg, composite(fg, alpha, bg), prompts)


def test_composite_extremes():
    rng = np.random.default_rng(0)
    fg, bg = rng.random((2, 4, 4, 3)), rng.random((2, 4, 4, 3))
    np.testing.assert_array_equal(composite(fg, np.ones((2, 4, 4, 1)), bg), fg.astype(np.float32))
    np.testing.assert_array_equal(composite(fg, np.zeros((2, 4, 4, 1)), bg), bg.astype(np.float32))
    mid = composite(np.ones((1, 2, 2, 3)), np.full((1, 2, 2, 1), 0.5), np.zeros((1, 2, 2, 3)))
    np.testing.assert_array_equal(mid, np.full((1, 2, 2, 3), 0.5))


def test_composite_errors():
    with pytest.raises(ShapeError):
        composite(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2, 1)), np.zeros((1, 3, 2, 3)))
    with pytest.raises(ValueError):
        composite(np.zeros((1, 2, 2, 3)), np.full((1, 2, 2, 1), 1.5), np.zeros((1, 2, 2, 3)))


def test_quadruple_validation():
    rng = np.random.default_rng(1)
    q = random_quadruple(rng)
    with pytest.raises(ShapeError):
        LayerQuadruple(q.fg, q.alpha[:1], q.bg, q.blended)
    with pytest.raises(ValueError):
        LayerQuadruple(q.fg, q.alpha, q.bg, q.blended, prompts=("a", "b"))
    assert q.composite_error() < 1e-6


def test_packed_frame_count_for_sixteen_frame_clips():
    q = LayerQuadruple(*(np.zeros((16, 4, 4, c)) for c in (3, 1, 3, 3)))
    s = pack(q, patch=4)
    assert s.packed_frames == 64
    assert s.tokens.shape[0] == 4 * 16


def test_pack_length_and_offsets():
    q = random_quadruple(np.random.default_rng(2), f=2, h=8, w=8)
    s = pack(q, IdentityEmbedding(), patch=4)
    assert s.tokens.shape == (32, 48)
    assert s.segment_offsets == (0, 8, 16, 24)
    assert s.position_ids.shape == (32, 3)
    assert s.position_ids[9].tolist() == [1, 0, 1]


def test_pack_unpack_roundtrip_bit_exact():
    q = random_quadruple(np.random.default_rng(3))
    back = unpack(pack(q), prompts=q.prompts)
    for a, b in zip(q.videos(), back.videos()):
        np.testing.assert_array_equal(a, b)


def test_unpack_zero_tokens():
    seg = 2 * 2 * 2
    s = PackedSequence(np.zeros((4 * seg, 48), np.float32), (0, seg, 2 * seg, 3 * seg), 2, (2, 2), 4,
                       position_ids(2, (2, 2)))
    for v in unpack(s).videos():
        assert not v.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.sampled_from([4, 8]))
def test_repack_of_unpacked_tokens_is_identity(seed, frames, size):
    rng = np.random.default_rng(seed)
    grid = (size // 4, size // 4)
    seg = frames * grid[0] * grid[1]
    blocks = [rng.normal(size=(seg, 48)).astype(np.float32) for _ in range(4)]
    # alpha tokens live in [0, 1] with replicated channels
    a = rng.random((frames, size, size, 1), dtype=np.float32)
    blocks[1] = patchify(np.repeat(a, 3, axis=-1), 4)
    s = PackedSequence(np.concatenate(blocks), tuple(i * seg for i in range(4)), frames, grid, 4,
                       position_ids(frames, grid))
    np.testing.assert_array_equal(pack(unpack(s)).tokens, s.tokens)


def test_patchify_order_and_inverse():
    v = np.arange(1 * 8 * 8 * 3, dtype=np.float32).reshape(1, 8, 8, 3)
    t = patchify(v, 4)
    np.testing.assert_array_equal(t[1].reshape(4, 4, 3), v[0, 0:4, 4:8])
    np.testing.assert_array_equal(unpatchify(t, 1, (2, 2), 4), v)
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 6, 8, 3)), 4)


def test_latent_embedding_inverse():
    x = np.random.default_rng(4).random((5, 48), dtype=np.float32)
    emb = LatentEmbedding()
    np.testing.assert_allclose(emb.unembed(emb.embed(x)), x, atol=1e-7)
    assert emb.embed(np.zeros(1))[0] == -1 and emb.embed(np.ones(1))[0] == 1


def test_apply_condition_variants():
    rng = np.random.default_rng(5)
    xt, x0 = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    np.testing.assert_array_equal(apply_condition(xt, x0, VARIANTS["generate"]), xt)
    out = apply_condition(xt, x0, ConditionMask((True, True, False, False)))
    np.testing.assert_array_equal(out[:8], x0[:8])
    np.testing.assert_array_equal(out[8:], xt[8:])
    out = apply_condition(xt, x0, VARIANTS["decompose"])
    expected = xt.copy()
    expected[12:16] = x0[12:16]
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(xt, xt)  # input untouched
    with pytest.raises(ShapeError):
        apply_condition(xt, x0[:8], VARIANTS["decompose"])


def test_condition_mask_rules():
    with pytest.raises(ValueError):
        ConditionMask((True, True, True, True))
    with pytest.raises(ValueError):
        ConditionMask((True, False))
    assert VARIANTS["bg_cond"].fixed == (False, False, True, False)
    assert VARIANTS["fg_cond"].name == "fg_cond"
    np.testing.assert_array_equal(VARIANTS["decompose"].token_weights(8), [1, 1, 1, 1, 1, 1, 0, 0])


def test_quadruple_file_roundtrip(tmp_path):
    q = random_quadruple(np.random.default_rng(6), prompts=("ünï", "", "x y"))
    path = tmp_path / "q.lfq"
    save_quadruple(q, path)
    back = load_quadruple(path)
    assert back.prompts == q.prompts
    for a, b in zip(q.videos(), back.videos()):
        np.testing.assert_array_equal(a, b)
    blob = quadruple_bytes(q)
    assert blob[:4] == b"LFQ1"
    (tmp_path / "bad.lfq").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        load_quadruple(tmp_path / "bad.lfq")
    (tmp_path / "short.lfq").write_bytes(blob[:100])
    with pytest.raises(ValueError, match="truncated"):
        load_quadruple(tmp_path / "short.lfq")
