"""Corpus-derived word vocabulary and caption tokenization."""

from __future__ import annotations

import string
from collections import Counter
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


class Vocabulary:
    def __init__(self, tokens: list[str], min_freq: int = 5):
        self.min_freq = min_freq
        self.id_to_token = list(SPECIALS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigurationError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, text: str, max_len: int) -> np.ndarray:
        """start + body + end, body truncated to max_len - 2, padded with pad."""
        if max_len < 3:
            raise ConfigurationError("max_len must be >= 3")
        body = [self.token_to_id.get(t, UNK) for t in tokenize(text)][: max_len - 2]
        ids = [START] + body + [END]
        ids += [PAD] * (max_len - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, token_ids) -> str:
        words = []
        for tid in np.asarray(token_ids).tolist():
            if tid == END:
                break
            if tid in (PAD, START):
                continue
            words.append(self.id_to_token[tid])
        return " ".join(words)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for tok in self.id_to_token[len(SPECIALS) :]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path, min_freq: int = 5):
        tokens = [line.rstrip("\n") for line in Path(path).open(encoding="utf-8") if line.strip()]
        return cls(tokens, min_freq=min_freq)


def build_vocab(captions, min_freq: int = 5) -> Vocabulary:
    """Tokens occurring >= min_freq times, ordered by (count desc, lexicographic)."""
    captions = list(captions)
    if not captions:
        raise ConfigurationError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in captions:
        counts.update(tokenize(text))
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_freq=min_freq)
