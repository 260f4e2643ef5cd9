import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerflow_kit.textcond import (EMPTY, PAD, UNK, LayerEmbedder, Vocabulary, encode, null_context,
                                    prefix_index, tokenize)

WORDS = ["1,", "2,", "3,", "a", "red", "ball", "over", "blue", "sky", "moving", "left"]


@pytest.fixture
def enc():
    return Vocabulary(WORDS, 8, np.random.default_rng(0)), LayerEmbedder(8, np.random.default_rng(1))


def test_prefix_index_examples():
    assert prefix_index("a red ball", 1) == "1, a red ball"
    assert prefix_index("", 2) == "2, "
    assert prefix_index("3, already prefixed", 3) == "3, 3, already prefixed"
    with pytest.raises(ValueError):
        prefix_index("x", 4)


def test_vocabulary_ids_and_unknowns(enc, tmp_path):
    vocab, _ = enc
    assert vocab.lookup("RED") == vocab.lookup("red") >= 3
    assert vocab.lookup("zebra") == UNK
    assert vocab.unknown_count("a zebra and a lion") == 3
    ids = vocab.encode_ids("a red ball", 5)
    assert ids[3:].tolist() == [PAD, PAD]
    assert len(vocab.encode_ids(" ".join(["a"] * 40), 16)) == 16
    vocab.save(tmp_path / "v.txt")
    back = Vocabulary.load(tmp_path / "v.txt", 8)
    assert back.ids == vocab.ids


def test_all_empty_prompts_differ_only_by_layer_rows(enc):
    vocab, layers = enc
    ctx = encode(["", "", ""], vocab, layers, length=4, index_prefix=False)
    e = ctx.embeddings.data.reshape(3, 4, -1)
    for b in range(3):
        np.testing.assert_allclose(e[b], np.tile(vocab.table.data[PAD] + layers.row(b + 1), (4, 1)), atol=1e-7)
    for b, c in ((0, 1), (0, 2), (1, 2)):
        np.testing.assert_allclose(e[b] - e[c], np.broadcast_to(layers.row(b + 1) - layers.row(c + 1), e[b].shape),
                                   atol=1e-7)


def test_identical_prompts_additivity(enc):
    vocab, layers = enc
    ctx = encode(["a red ball"] * 3, vocab, layers, length=6, index_prefix=False)
    e = ctx.embeddings.data.reshape(3, 6, -1)
    np.testing.assert_allclose(e[1] - e[2], np.broadcast_to(layers.row(2) - layers.row(3), e[1].shape), atol=1e-7)


def test_prefixed_blocks_differ_by_layer_row_and_index_token(enc):
    vocab, layers = enc
    ctx = encode(["a red ball"] * 3, vocab, layers, length=6)
    e = ctx.embeddings.data.reshape(3, 6, -1)
    t = vocab.table.data
    np.testing.assert_allclose(e[0, 1:] - e[1, 1:], np.broadcast_to(layers.row(1) - layers.row(2), (5, 8)),
                               atol=1e-7)
    np.testing.assert_allclose(e[0, 0] - e[1, 0],
                               t[vocab.lookup("1,")] - t[vocab.lookup("2,")] + layers.row(1) - layers.row(2),
                               atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from(WORDS + ["zzz"]), max_size=8), min_size=3, max_size=3))
def test_encode_matches_lookup_oracle(word_lists):
    vocab, layers = Vocabulary(WORDS, 8, np.random.default_rng(0)), LayerEmbedder(8, np.random.default_rng(1))
    prompts = [" ".join(w) for w in word_lists]
    ctx = encode(prompts, vocab, layers, length=6)
    rows = []
    for i, p in enumerate(prompts):
        toks = (f"{i + 1}, {p}").lower().split()[:6]
        ids = [vocab.ids.get(t, UNK) for t in toks] + [PAD] * (6 - min(len(toks), 6))
        for tid in ids:
            rows.append(vocab.table.data[tid] + layers.table.data[i])
    np.testing.assert_allclose(ctx.embeddings.data, np.array(rows), atol=1e-7)
    assert ctx.pad.tolist() == (ctx.ids == PAD).tolist()
    assert ctx.layer_index.tolist() == [1] * 6 + [2] * 6 + [3] * 6


def test_encode_rejects_wrong_prompt_count(enc):
    with pytest.raises(ValueError):
        encode(["a", "b"], *enc)


def test_null_context(enc):
    vocab, layers = enc
    a, b = null_context(vocab, layers, 5), null_context(vocab, layers, 5)
    np.testing.assert_array_equal(a.embeddings.data, b.embeddings.data)
    assert a.embeddings.shape == (15, 8)
    assert a.ids.tolist() == [EMPTY, PAD, PAD, PAD, PAD] * 3
    for prompts in (["a", "", ""], ["", "", ""], ["red ball", "sky", "x"]):
        c = encode(prompts, vocab, layers, 5)
        assert not np.array_equal(c.embeddings.data, a.embeddings.data)


def test_tokenize_lowercases():
    assert tokenize("A Red  BALL") == ["a", "red", "ball"]
