import numpy as np
import pytest
from intent_sieve.errors import DimensionMismatch, InvalidConfig, InvalidInput, ParseError
from intent_sieve.textenc import (
    PAD_ID,
    UNK_ID,
    CharIndex,
    CharVocab,
    TextEncoder,
    encode,
    encode_ids,
    load_char_vectors,
    normalize_transcript,
    split_chars,
)


def vector_line(token: str, value: float, dim: int = 100) -> str:
    return " ".join([token, *[str(value)] * dim])


@pytest.fixture()
def vocab() -> CharVocab:
    chars = "가나다라마바사아자차카타파하 "
    return CharVocab(
        entries={ch: np.full(4, float(i + 1)) for i, ch in enumerate(chars)},
        dim=4,
    )


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("천천히  가고 있어?", "천천히 가고 있어"),
        ("  뭐 해!  ", "뭐 해"),
        ("가\t나\n다", "가 나 다"),
    ],
)
def test_normalize_transcript(text, expected):
    assert normalize_transcript(text) == expected


def test_split_chars_counts_spaces():
    assert split_chars("가 자") == ["가", " ", "자"]
    assert split_chars(" 가   자 ") == ["가", " ", "자"]


def test_split_chars_empty():
    with pytest.raises(InvalidInput, match="empty"):
        split_chars("   ")


def test_load_char_vectors(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text(vector_line("가", 0.5) + "\n" + vector_line("<space>", -1.0) + "\n")
    vocab = load_char_vectors(path)
    assert len(vocab) == 2
    assert vocab.dim == 100
    assert " " in vocab
    assert np.all(vocab.entries["가"] == 0.5)


def test_load_char_vectors_header(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("2 3\n가 1 2 3\n<space> 0 0 0\n")
    vocab = load_char_vectors(path)
    assert vocab.dim == 3
    assert vocab.entries["가"].tolist() == [1.0, 2.0, 3.0]


def test_load_char_vectors_duplicate(tmp_path, caplog):
    path = tmp_path / "vectors.txt"
    path.write_text("가 1 1\n<space> 0 0\n가 2 2\n")
    vocab = load_char_vectors(path)
    assert vocab.entries["가"].tolist() == [2.0, 2.0]
    assert "Duplicate token" in caplog.text


def test_load_char_vectors_dimension_mismatch(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text(vector_line("가", 0.5) + "\n" + vector_line("나", 0.5, dim=99) + "\n")
    with pytest.raises(DimensionMismatch, match=r"vectors.txt:2:.*Expected 100 values, got 99"):
        load_char_vectors(path)


def test_load_char_vectors_malformed(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("가 1 x\n")
    with pytest.raises(ParseError, match="Invalid vector values"):
        load_char_vectors(path)


def test_load_char_vectors_empty(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("")
    vocab = load_char_vectors(path)
    assert len(vocab) == 0
    assert vocab.dim == 100


def test_load_char_vectors_without_space(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("가 1 1\n")
    with pytest.raises(InvalidConfig, match="lack the space token"):
        load_char_vectors(path)


def test_encode_left_pads(vocab):
    feature = encode("가나다", vocab, max_chars=50)
    assert feature.shape == (50, 4)
    assert feature.valid_chars == 3
    assert np.all(feature.matrix[:47] == 0)
    assert feature.matrix[47:, 0].tolist() == [1.0, 2.0, 3.0]


def test_encode_keeps_last_characters(vocab):
    text = "가나다라마바" * 10
    feature = encode(text, vocab, max_chars=50)
    expected = encode(text[-50:], vocab, max_chars=50)
    assert feature.valid_chars == 50
    assert np.array_equal(feature.matrix, expected.matrix)


def test_encode_space_is_a_token(vocab):
    feature = encode("가 자", vocab, max_chars=50)
    assert feature.valid_chars == 3
    assert np.count_nonzero(np.any(feature.matrix != 0, axis=1)) == 3


def test_encode_unknown_character_is_zero(vocab):
    feature = encode("가?", vocab, max_chars=4)
    assert np.all(feature.matrix[-1] == 0)
    assert feature.valid_chars == 2


def test_encode_empty(vocab):
    with pytest.raises(InvalidInput):
        encode("", vocab)


def test_char_index():
    index = CharIndex.build(["나가", "가 다"])
    assert index.tokens == (" ", "가", "나", "다")
    assert len(index) == 6
    assert index.lookup("가") == 3
    assert index.lookup("없") == UNK_ID


def test_encode_ids():
    index = CharIndex.build(["가나"])
    ids = encode_ids("가나하", index, max_chars=5)
    assert ids.tolist() == [PAD_ID, PAD_ID, 2, 3, UNK_ID]


def test_text_encoder(vocab):
    index = CharIndex.build(["가나"])
    by_ids = TextEncoder(max_chars=6, index=index)
    by_vectors = TextEncoder(max_chars=6, vocab=vocab)
    assert by_ids.trainable
    assert not by_vectors.trainable
    assert by_ids.batch(["가", "나가"]).shape == (2, 6)
    assert by_vectors.batch(["가", "나가"]).shape == (2, 6, 4)


def test_text_encoder_needs_one_source(vocab):
    with pytest.raises(InvalidInput, match="exactly one"):
        TextEncoder()
    with pytest.raises(InvalidInput, match="exactly one"):
        TextEncoder(vocab=vocab, index=CharIndex.build(["가"]))


@pytest.mark.parametrize("max_chars", [0, -3])
def test_max_chars_must_be_positive(vocab, max_chars):
    with pytest.raises(InvalidConfig, match="max_chars must be positive"):
        encode("가나", vocab, max_chars=max_chars)
    with pytest.raises(InvalidConfig, match="max_chars must be positive"):
        encode_ids("가나", CharIndex.build(["가나"]), max_chars=max_chars)
    with pytest.raises(InvalidConfig, match="max_chars must be positive"):
        TextEncoder(max_chars=max_chars, vocab=vocab)


def test_char_vocab_invalid_dimension():
    with pytest.raises(InvalidConfig, match="dimension must be positive"):
        CharVocab(entries={" ": np.zeros(0)}, dim=0)


@pytest.mark.parametrize("seed", range(20))
def test_encoding_depends_only_on_the_suffix(vocab, seed):
    rng = np.random.default_rng(seed)
    chars = list("가나다라마바사아자차카타파하없")
    max_chars = int(rng.integers(1, 12))
    suffix = "".join(rng.choice(chars, size=max_chars))
    first = "".join(rng.choice(chars, size=int(rng.integers(1, 20)))) + suffix
    second = "".join(rng.choice(chars, size=int(rng.integers(1, 20)))) + suffix
    index = CharIndex.build([first, second])

    encoded = encode(first, vocab, max_chars).matrix
    assert np.array_equal(encoded, encode(second, vocab, max_chars).matrix)
    assert np.array_equal(encoded, encode(suffix, vocab, max_chars).matrix)
    ids = encode_ids(first, index, max_chars)
    assert np.array_equal(ids, encode_ids(second, index, max_chars))
