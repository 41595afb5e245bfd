"""
Data Loader - Copy-task sequences and character corpora
"""

import logging
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional

import numpy as np

from okgrad.errors import ShapeError, VocabError
from okgrad.signs import SignStream

logger = logging.getLogger(__name__)

COPY_ALPHABET = "01#*"
COPY_MARK = COPY_ALPHABET.index("#")
COPY_BLANK = COPY_ALPHABET.index("*")
COPY_WINDOW = 5
RESET_SALT = 7


class CopySample(NamedTuple):
    inputs: List[int]
    targets: List[int]
    mask: List[bool]     # True on the positions that reproduce the bits
    length: int


def copy_sample(t_max: int, rng) -> CopySample:
    """'#' + L bits + (L+1) blanks  ->  (L+1) blanks + '#' + the same L bits"""
    if t_max < 1:
        raise ShapeError(f"t_max must be >= 1, got {t_max}")
    low = max(1, t_max - COPY_WINDOW)
    length = int(rng.integers(low, t_max + 1))
    bits = [int(b) for b in rng.bits(length)]
    inputs = [COPY_MARK] + bits + [COPY_BLANK] * (length + 1)
    targets = [COPY_BLANK] * (length + 1) + [COPY_MARK] + bits
    mask = [False] * (length + 2) + [True] * length
    return CopySample(inputs, targets, mask, length)


def decode_copy(ids):
    return "".join(COPY_ALPHABET[i] for i in ids)


class CharVocab:
    """Sorted unique codepoints of a training text"""

    def __init__(self, chars: List[str]):
        self.chars = list(chars)
        self.index = {c: i for i, c in enumerate(self.chars)}
        if len(self.index) != len(self.chars):
            raise ShapeError("vocabulary characters must be unique")

    @classmethod
    def from_text(cls, text: str) -> "CharVocab":
        if not text:
            raise ShapeError("cannot build a vocabulary from empty text")
        return cls(sorted(set(text)))

    def __len__(self):
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        ids = np.empty(len(text), dtype=np.int64)
        for pos, ch in enumerate(text):
            try:
                ids[pos] = self.index[ch]
            except KeyError:
                raise VocabError(ord(ch)) from None
        return ids

    def decode(self, ids) -> str:
        return "".join(self.chars[int(i)] for i in ids)


def load_corpus(path: str) -> str:
    """Read a UTF-8 corpus; raises OSError when unreadable and ShapeError when empty"""
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        raise ShapeError(f"corpus {path} is empty")
    logger.info(f"Loaded corpus {path}: {len(text)} characters")
    return text


class LmBatch(NamedTuple):
    inputs: np.ndarray   # (batch,) ids
    targets: np.ndarray  # (batch,) ids
    resets: np.ndarray   # (batch,) bool, reset hidden state before this step


def lm_stream(ids, batch: int, reset_prob: float = 0.01, seed: int = 0) -> Iterator[LmBatch]:
    """Endless next-character pairs, one contiguous corpus slice per lane

    Lane b walks ids[b*L:(b+1)*L] with L = len(ids) // batch. A pass yields the L - 1 adjacent
    pairs of the slice, then starts over at its first character.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if batch < 1:
        raise ShapeError(f"batch must be positive, got {batch}")
    span = len(ids) // batch
    if span < 2:
        raise ShapeError(f"corpus of {len(ids)} characters too short for {batch} lanes")
    if not 0.0 <= reset_prob <= 1.0:
        raise ShapeError(f"reset_prob must lie in [0, 1], got {reset_prob}")
    slices = ids[:span * batch].reshape(batch, span)
    rngs = [SignStream(seed, lane, salt=RESET_SALT) for lane in range(batch)]
    return _lane_pairs(slices, rngs, reset_prob)


def _lane_pairs(slices, rngs, reset_prob):
    batch, span = slices.shape
    lanes = np.arange(batch)
    pos = 0
    while True:
        resets = np.array([rng.uniform() < reset_prob for rng in rngs], dtype=bool)
        yield LmBatch(slices[lanes, pos], slices[lanes, pos + 1], resets)
        pos = (pos + 1) % (span - 1)


def unigram_entropy_bpc(ids) -> float:
    """Entropy of the character distribution in bits, the no-context baseline"""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ShapeError("cannot compute entropy of an empty corpus")
    _, counts = np.unique(ids, return_counts=True)
    probs = counts / counts.sum()
    return float(-(probs * np.log2(probs)).sum())


def random_text_ids(length: int, vocab_size: int, seed: int, salt: Optional[int] = 0) -> np.ndarray:
    """Uniform random character ids, the stand-in corpus for noise measurements"""
    return SignStream(seed, salt=salt).integers(0, vocab_size, size=length)
