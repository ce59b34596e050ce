"""Character-level transcript encoding, tail-aligned like the acoustic features."""

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, InvalidInput, ParseError

logger = logging.getLogger(__name__)

DEFAULT_DIM = 100
DEFAULT_MAX_CHARS = 50
SPACE = " "
SPACE_TOKEN = "<space>"  # whitespace can't be a token in the vector text layout
PAD_ID = 0
UNK_ID = 1

_WHITESPACE = re.compile(r"\s+")


def normalize_transcript(text: str) -> str:
    """NFC-compose, drop punctuation and collapse whitespace."""
    text = unicodedata.normalize("NFC", text)
    text = "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))
    return _WHITESPACE.sub(SPACE, text).strip()


def split_chars(text: str) -> List[str]:
    """Unicode scalar values of the trimmed transcript; spaces are characters too."""
    text = unicodedata.normalize("NFC", text).strip()
    if not text:
        raise InvalidInput("Transcript is empty")
    return list(_WHITESPACE.sub(SPACE, text))


@dataclass(frozen=True)
class CharVocab:
    """Pretrained character vectors (immutable after loading)."""

    entries: Mapping[str, np.ndarray]
    dim: int = DEFAULT_DIM

    def __post_init__(self):
        if self.dim <= 0:
            raise InvalidConfig(f"Vector dimension must be positive: {self.dim}")
        # an empty vocabulary is allowed, it only backs the trainable embedding
        if self.entries and SPACE not in self.entries:
            raise InvalidConfig(f"Character vectors lack the space token ({SPACE_TOKEN})")
        for token, vector in self.entries.items():
            if vector.shape != (self.dim,):
                raise DimensionMismatch(
                    f"Vector of '{token}' has shape {vector.shape}, expected ({self.dim},)"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: object) -> bool:
        return token in self.entries


def _is_header(fields: Sequence[str]) -> bool:
    return len(fields) == 2 and all(f.isdigit() for f in fields)  # noqa: PLR2004


def load_char_vectors(path: Union[str, Path], dim: Optional[int] = None) -> CharVocab:
    """
    Load character vectors from the common word-vector text layout (`token v1 ... vdim`).

    An optional `count dim` header line is skipped. The dimension is taken from `dim`, the header
    or the first entry, in that order. The space character is stored as `<space>`.

    Raises:
        ParseError: If a line holds non-numeric values
        DimensionMismatch: If a line has a different number of values than the dimension
        InvalidConfig: If vectors are given but none for the space character
    """
    entries: Dict[str, np.ndarray] = {}
    with open(path, mode="r", encoding="utf-8") as file:
        for lineno, line_orig in enumerate(file, start=1):
            line = line_orig.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split()
            if lineno == 1 and _is_header(fields):
                dim = dim or int(fields[1])
                continue
            token, values = fields[0], fields[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                raise DimensionMismatch(
                    f"Expected {dim} values, got {len(values)}", path=path, lineno=lineno
                )
            try:
                vector = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise ParseError(
                    f"Invalid vector values for '{token}'", path=path, lineno=lineno
                ) from None
            if token == SPACE_TOKEN:
                token = SPACE
            if token in entries:
                logger.warning(
                    "Duplicate token %r at %s:%d, keeping the last one", token, path, lineno
                )
            entries[token] = vector
    return CharVocab(entries=entries, dim=dim or DEFAULT_DIM)


@dataclass(frozen=True)
class CharIndex:
    """Token ids for the trainable embedding: 0 is padding, 1 the shared unknown token."""

    tokens: Tuple[str, ...]
    _ids: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_ids", {t: i + 2 for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def lookup(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "CharIndex":
        """Index every character of the corpus, sorted for deterministic ids."""
        chars = {ch for text in texts for ch in split_chars(text)}
        return cls(tokens=tuple(sorted(chars)))


@dataclass(frozen=True)
class CharSequenceFeature:
    matrix: np.ndarray
    valid_chars: int

    @property
    def shape(self):
        return self.matrix.shape


def _check_max_chars(max_chars: int):
    if max_chars <= 0:
        raise InvalidConfig(f"max_chars must be positive: {max_chars}")


def encode(
    text: str,
    vocab: CharVocab,
    max_chars: int = DEFAULT_MAX_CHARS,
) -> CharSequenceFeature:
    """
    Encode the last `max_chars` characters as vectors, sentence-final character in the last row.

    Shorter transcripts are left-padded with zero rows. Characters missing from the vocabulary
    are encoded as zero vectors.

    Raises:
        InvalidInput: If the transcript is empty after trimming
    """
    _check_max_chars(max_chars)
    chars = split_chars(text)[-max_chars:]
    matrix = np.zeros((max_chars, vocab.dim), dtype=np.float64)
    offset = max_chars - len(chars)
    for row, ch in enumerate(chars, start=offset):
        vector = vocab.entries.get(ch)
        if vector is not None:
            matrix[row] = vector
    return CharSequenceFeature(matrix=matrix, valid_chars=len(chars))


def encode_ids(text: str, index: CharIndex, max_chars: int = DEFAULT_MAX_CHARS) -> np.ndarray:
    """Token ids of the last `max_chars` characters, left-padded with `PAD_ID`."""
    _check_max_chars(max_chars)
    chars = split_chars(text)[-max_chars:]
    ids = np.full(max_chars, PAD_ID, dtype=np.int64)
    ids[max_chars - len(chars) :] = [index.lookup(ch) for ch in chars]
    return ids


@dataclass(frozen=True)
class TextEncoder:
    """Model input builder: pretrained vectors or ids for a trainable embedding."""

    max_chars: int = DEFAULT_MAX_CHARS
    vocab: Optional[CharVocab] = None
    index: Optional[CharIndex] = None

    def __post_init__(self):
        if (self.vocab is None) == (self.index is None):
            raise InvalidInput("TextEncoder needs exactly one of vocab or index")
        _check_max_chars(self.max_chars)

    @property
    def trainable(self) -> bool:
        return self.index is not None

    def __call__(self, text: str) -> np.ndarray:
        if self.index is not None:
            return encode_ids(text, self.index, self.max_chars)
        assert self.vocab is not None
        return encode(text, self.vocab, self.max_chars).matrix

    def batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self(text) for text in texts])
