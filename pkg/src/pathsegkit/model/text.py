"""Whitespace tokenizer and vocabulary for prompt encoding.

The vocabulary is built from the prompts of a label taxonomy, so every
renderable prompt tokenizes without unknowns.  Token ids are assigned in
sorted token order for determinism.
"""

from __future__ import annotations

from pathlib import Path

from ..errors import UnknownToken
from ..taxonomy import HierLabel


def tokenize(prompt: str) -> list[str]:
    tokens = prompt.split()
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    return tokens


class Vocabulary:
    def __init__(self, tokens: list[str]):
        self.tokens = sorted(set(tokens))
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, prompt: str) -> list[int]:
        ids = []
        for tok in tokenize(prompt):
            if tok not in self._ids:
                raise UnknownToken(f"token {tok!r} not in vocabulary")
            ids.append(self._ids[tok])
        return ids

    @classmethod
    def from_labels(cls, labels: list[HierLabel]) -> "Vocabulary":
        tokens: list[str] = []
        for lb in labels:
            tokens.extend(tokenize(lb.prompt()))
        return cls(tokens)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.strip() for line in fh if line.strip()])
