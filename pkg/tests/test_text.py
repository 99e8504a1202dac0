import numpy as np
import pytest

from ctxedit.text import (
    DEFAULT_TEXT_LEN,
    TextCodec,
    TextCodecError,
    Vocabulary,
    tokenize,
)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="module")
def codec(vocab):
    return TextCodec(vocab, dim=24, seed=0)


class TestTokenize:
    def test_indicator_tokens_are_single_ids(self, vocab):
        ids = tokenize("{image1} add a dot", vocab)
        assert ids[0] == vocab.indicator_id(1)
        assert len(ids) == 4

    def test_plain_image_token_reserved(self, vocab):
        ids = tokenize("invert {image}", vocab)
        assert ids[1] == vocab.reserved["{image}"]

    def test_truncates_at_120(self, vocab):
        text = " ".join(f"word{i}" for i in range(200))
        ids = tokenize(text, vocab)
        assert len(ids) == DEFAULT_TEXT_LEN
        # tail truncation: the first 120 words survive
        assert ids[0] == vocab.id_of("word0")
        assert ids[-1] == vocab.id_of("word119")

    def test_deterministic(self, vocab):
        text = "Fill the MARKED region, please!"
        assert np.array_equal(tokenize(text, vocab), tokenize(text, vocab))

    def test_case_and_punctuation_folded(self, vocab):
        assert np.array_equal(tokenize("Add a Dot.", vocab), tokenize("add a dot", vocab))

    def test_empty_instruction_yields_pad(self, vocab):
        ids = tokenize("", vocab)
        assert list(ids) == [vocab.pad_id]

    def test_random_strings_stay_in_range(self, vocab):
        rng = np.random.default_rng(0)
        letters = "abcdefghijklmnopqrstuvwxyz {}0123456789.,!?"
        for _ in range(200):
            text = "".join(rng.choice(list(letters), size=rng.integers(0, 60)))
            ids = tokenize(text, vocab)
            assert len(ids) >= 1
            assert ids.min() >= 0 and ids.max() < vocab.size
            assert np.array_equal(ids, tokenize(text, vocab))


class TestVocabulary:
    def test_reserved_ids_fixed_and_disjoint_from_buckets(self, vocab):
        assert vocab.pad_id == 0
        assert vocab.unk_id == 1
        for k in range(1, 10):
            assert vocab.indicator_id(k) == vocab.reserved[f"{{image{k}}}"]
            assert vocab.indicator_id(k) < vocab.reserved_count
        for word in ("add", "remove", "imagine", "image1"):
            assert vocab.id_of(word) >= vocab.reserved_count

    def test_hashing_is_stable(self):
        a, b = Vocabulary(), Vocabulary()
        for word in ("square", "background", "northwest"):
            assert a.id_of(word) == b.id_of(word)

    def test_hash_seed_changes_buckets(self):
        a, b = Vocabulary(hash_seed=0), Vocabulary(hash_seed=1)
        words = [f"word{i}" for i in range(50)]
        assert any(a.id_of(w) != b.id_of(w) for w in words)

    def test_manifest_round_trip(self, vocab):
        back = Vocabulary.from_manifest(vocab.to_manifest())
        assert back == vocab

    def test_too_small_vocab_rejected(self):
        with pytest.raises(TextCodecError):
            Vocabulary(size=4)

    def test_indicator_out_of_range(self, vocab):
        with pytest.raises(TextCodecError):
            vocab.indicator_id(0)
        with pytest.raises(TextCodecError):
            vocab.indicator_id(10)


class TestTextCodec:
    def test_pad_token_maps_to_pad_vector(self, codec):
        # the pad row is all zeros, so an encoded pad carries only its fixed
        # position offset: the same designated vector on every call
        emb = codec.encode_ids(np.array([codec.vocab.pad_id]))
        assert np.array_equal(codec.table[codec.vocab.pad_id], np.zeros(24, dtype=np.float32))
        assert np.array_equal(emb.vectors[0], codec.position_table[0])

    def test_encode_is_pure(self, codec):
        ids = codec.tokenize("swap red and blue")
        a = codec.encode_ids(ids).vectors
        b = codec.encode_ids(ids).vectors
        assert np.array_equal(a, b)

    def test_dimension_matches_config(self, codec):
        emb = codec.encode_text("draw a square")
        assert emb.vectors.shape == (3, 24)

    def test_out_of_range_id_rejected(self, codec):
        with pytest.raises(TextCodecError):
            codec.encode_ids(np.array([codec.vocab.size]))

    def test_indicator_embeddings_distinct(self, codec):
        rows = [codec.indicator_embedding(k) for k in range(1, 10)]
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                assert np.linalg.norm(rows[i] - rows[j]) > 0

    def test_indicator_embedding_is_table_row(self, codec):
        k = 4
        row = codec.table[codec.vocab.indicator_id(k)]
        assert np.array_equal(codec.indicator_embedding(k), row)

    def test_seeded_table_reproducible(self, vocab):
        a = TextCodec(vocab, dim=24, seed=7).table
        b = TextCodec(vocab, dim=24, seed=7).table
        assert np.array_equal(a, b)
        c = TextCodec(vocab, dim=24, seed=8).table
        assert not np.array_equal(a, c)
