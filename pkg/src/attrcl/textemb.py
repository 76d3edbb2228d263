"""Frozen word-level text embeddings for attribute names."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import split_words

DEFAULT_DIM = 512


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    attribute: str


class TextEncoder:
    """Deterministic word embeddings, summed over the words of an attribute.

    Words without an imported vector get a unit-norm Gaussian draw seeded by a
    SHA-256 digest of the word, so every process maps a word to the same vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM, vectors: dict[str, np.ndarray] | None = None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}
        for word, vec in (vectors or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"vector for {word!r} has shape {vec.shape}, expected ({dim},)")
            self._vectors[word] = vec.copy()
            self._vectors[word].setflags(write=False)

    @classmethod
    def from_file(cls, path, dim: int = DEFAULT_DIM) -> "TextEncoder":
        """Load ``word f1 f2 ... fD`` lines, one word per line."""
        vectors = {}
        with open(Path(path), encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim + 1:
                    raise ValueError(
                        f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
        return cls(dim, vectors)

    def embed_word(self, word: str) -> np.ndarray:
        if not word:
            raise ValueError("word must be non-empty")
        if word in self._vectors:
            return self._vectors[word].copy()
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_attribute(self, attribute: str) -> TextEmbedding:
        words = split_words(attribute)
        if not words:
            raise ValueError(f"attribute {attribute!r} has no words")
        vec = np.zeros(self.dim)
        for w in words:
            vec = vec + self.embed_word(w)
        return TextEmbedding(vec, attribute)
