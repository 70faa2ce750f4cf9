import numpy as np
import pytest

from dymesh.text import (
    MAX_TEXT_TOKENS,
    ArchiveTextEncoder,
    MissingEmbeddingError,
    StubTextEncoder,
    TextEmbedding,
    archive_decode,
    archive_encode,
    archive_import,
    embed,
    prompt_key,
)


def test_stub_is_deterministic():
    enc = StubTextEncoder(32)
    assert np.array_equal(enc.embed("walk").tokens, enc.embed("walk").tokens)
    assert not np.array_equal(enc.embed("walk").tokens, StubTextEncoder(32, seed=1).embed("walk").tokens)


def test_stub_rows_unit_norm():
    tokens = StubTextEncoder(64).embed("a dog jumps over the fence").tokens
    assert tokens.shape == (6, 64)
    np.testing.assert_allclose(np.linalg.norm(tokens, axis=1), 1, atol=1e-6)


def test_stub_truncates_to_max_tokens():
    prompt = " ".join(f"w{i}" for i in range(100))
    assert StubTextEncoder(8).embed(prompt).length == MAX_TEXT_TOKENS == 77


def test_stub_empty_prompt_is_single_token():
    emb = embed("", StubTextEncoder(16))
    assert emb.tokens.shape == (1, 16)


def test_repeated_words_share_vectors():
    t = StubTextEncoder(16).embed("run run").tokens
    assert np.array_equal(t[0], t[1])


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    entries = {prompt_key("a"): rng.normal(size=(3, 5)).astype(np.float32),
               prompt_key("b"): rng.normal(size=(1, 5)).astype(np.float32)}
    data = archive_encode(entries)
    back = archive_decode(data)
    assert back.keys() == entries.keys()
    for k in entries:
        assert back[k].tobytes() == entries[k].tobytes()
    assert archive_encode(back) == data
    for bad in (data[:-1], data + b"x", b"NOPE" + data[4:], data[:5]):
        with pytest.raises(ValueError):
            archive_decode(bad)


def test_archive_encoder_hit_and_miss(tmp_path):
    path = tmp_path / "emb.dyte"
    mat = np.random.default_rng(1).normal(size=(90, 4)).astype(np.float32)
    archive_import(path, "a horse gallops", mat)
    archive_import(path, "", mat[:1])
    enc = ArchiveTextEncoder(path)
    got = enc.embed("a horse gallops")
    assert got.length == 77 and np.array_equal(got.tokens, mat[:77])
    assert enc.dim == 4
    with pytest.raises(MissingEmbeddingError):
        enc.embed("a cat")


def test_archive_import_replaces_entry(tmp_path):
    path = tmp_path / "emb.dyte"
    archive_import(path, "x", np.zeros((2, 3)))
    archive_import(path, "x", np.ones((2, 3)))
    assert (ArchiveTextEncoder(path).embed("x").tokens == 1).all()
    with pytest.raises(ValueError):
        archive_import(path, "y", np.zeros(3))


def test_text_embedding_validation():
    with pytest.raises(ValueError):
        TextEmbedding(np.zeros((0, 4)), "")
    with pytest.raises(ValueError):
        TextEmbedding(np.full((1, 4), np.nan), "")
