from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

SPECIALS = ("<bos>", "<eos>", "<pad>", "<img>")
BOS, EOS, PAD, IMG = range(4)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class OOVError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"out-of-vocabulary word {self.word!r}"


def canonical_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split every punctuation character off."""
    return _TOKEN_RE.findall(text.lower())


def canonical(text: str) -> str:
    return " ".join(canonical_tokens(text))


@dataclass
class Vocabulary:
    words: list[str]

    def __post_init__(self):
        if tuple(self.words[:4]) != SPECIALS:
            raise ValueError("the first four ids must be the special tokens")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise OOVError(word) from None

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


def build_vocab(corpus) -> Vocabulary:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    words = sorted({t for text in corpus for t in canonical_tokens(text)})
    return Vocabulary(list(SPECIALS) + words)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(t) for t in canonical_tokens(text)]


def detokenize(ids, vocab: Vocabulary, strip_specials: bool = True) -> str:
    words = [vocab.words[int(i)] for i in ids]
    if strip_specials:
        words = [w for w in words if w not in SPECIALS]
    return " ".join(words)
