"""Fixed word-level vocabulary shared by the scene generator, grammar, and model.

Token ids are line numbers in ``vocab.txt`` (shipped with the package).
The first twelve entries are reserved special tokens: ``<BOS>``/``<EOS>``
plus the ten block tags. Tags are single vocabulary items, never split.
"""

from __future__ import annotations

import importlib.resources
import re
from functools import lru_cache

TAG_TOKENS = (
    "<SUMMARY>",
    "</SUMMARY>",
    "<CAPTION>",
    "</CAPTION>",
    "<REASONING>",
    "</REASONING>",
    "<REFLECTION>",
    "</REFLECTION>",
    "<CONCLUSION>",
    "</CONCLUSION>",
)

_TAG_SPLIT = re.compile("(" + "|".join(re.escape(t) for t in ("<BOS>", "<EOS>") + TAG_TOKENS) + ")")


class Vocabulary:
    """Bidirectional token/id mapping over the fixed word list."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for tag in TAG_TOKENS:
            if tag not in self.index:
                raise ValueError(f"vocabulary is missing tag token {tag}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"token {token!r} is not in the vocabulary") from None

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def tokenize_text(self, text: str) -> list[str]:
        """Split free text into vocabulary tokens.

        Tags are recognized even when glued to neighbouring words, e.g.
        ``"<CONCLUSION>no</CONCLUSION>"`` yields three tokens. Unknown
        words are kept as-is so the grammar can still parse structure.
        """
        out: list[str] = []
        for piece in _TAG_SPLIT.split(text):
            piece = piece.strip()
            if not piece:
                continue
            if piece.startswith("<") and piece in self.index:
                out.append(piece)
            else:
                out.extend(piece.split())
        return out


@lru_cache(maxsize=1)
def default_vocab() -> Vocabulary:
    data = importlib.resources.files("microvlm").joinpath("vocab.txt").read_text()
    return Vocabulary([line for line in data.splitlines() if line])
