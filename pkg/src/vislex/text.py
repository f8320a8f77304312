"""Closed-vocabulary tokenizer and BERT-style masked-language masking."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
RESERVED = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"]
N_RESERVED = len(RESERVED)

_WORD_RE = re.compile(r"[a-z0-9]+")


def normalize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]               # position = id
    ids: dict[str, int]

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]


def build_vocab(corpus) -> Vocabulary:
    """Reserved ids first, then corpus words sorted lexicographically."""
    words: set[str] = set()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        words.update(normalize(text))
    if n_texts == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    tokens = RESERVED + sorted(words)
    return Vocabulary(tokens=tokens, ids={t: i for i, t in enumerate(tokens)})


@dataclass
class TokenSequence:
    ids: np.ndarray        # (max_len,) int64, [CLS] w1 .. wn [SEP] [PAD]...
    mask: np.ndarray       # (max_len,) 1 for real tokens incl. [CLS]/[SEP]

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """[CLS] + word ids + [SEP], truncated then padded to max_len."""
    if max_len < 3:
        raise ConfigError(f"max_len must be >= 3, got {max_len}")
    word_ids = [vocab.id_of(w) for w in normalize(text)][: max_len - 2]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = CLS
    ids[1: 1 + len(word_ids)] = word_ids
    ids[1 + len(word_ids)] = SEP
    mask = (ids != PAD).astype(np.int64)
    mask[0] = 1
    return TokenSequence(ids=ids, mask=mask)


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    words = []
    for idx in seq.ids:
        if idx in (CLS, PAD):
            continue
        if idx == SEP:
            break
        words.append(vocab.token_of(int(idx)))
    return " ".join(words)


def mlm_mask(
    seq: TokenSequence, p: float, rng: np.random.Generator, vocab_size: int
) -> tuple[TokenSequence, dict[int, int]]:
    """BERT masking: select candidates w.p. p, then 80/10/10 replace.

    Candidates are word positions only; [CLS], [SEP] and [PAD] are never
    touched. Labels hold the original id at each selected position. Of the
    selected positions, 80% become [MASK], 10% a uniform random non-reserved
    token, 10% stay unchanged.
    """
    ids = seq.ids.copy()
    labels: dict[int, int] = {}
    candidates = [
        i for i in range(len(ids)) if seq.mask[i] and ids[i] not in (CLS, SEP, PAD)
    ]
    for i in candidates:
        if rng.random() >= p:
            continue
        labels[i] = int(ids[i])
        branch = rng.random()
        if branch < 0.8:
            ids[i] = MASK
        elif branch < 0.9:
            ids[i] = int(rng.integers(N_RESERVED, vocab_size))
        # else: unchanged
    return TokenSequence(ids=ids, mask=seq.mask.copy()), labels
