"""Whitespace/punctuation tokenizer and the fixed-order vocabulary file."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable

from .checkpoint import atomic_write_bytes

MAX_REGIONS = 16
PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
PLACEHOLDERS = tuple(f"<R{j}>" for j in range(MAX_REGIONS))
RESERVED = (PAD, EOS, UNK, *PLACEHOLDERS)

# digits are single tokens so every number is spellable from a closed vocabulary
TOKEN_RE = re.compile(r"<R\d+>|\d|[a-z]+|[^\sa-z\d]")


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text.lower().replace("<r", "<R"))


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    prev = ""
    for tok in tokens:
        numeric = tok.isdigit() or tok == "."
        glue = (
            not out
            or (numeric and (prev.isdigit() or prev == "."))
            or (not tok.isalnum() and not tok.startswith("<R") and tok not in "(")
        )
        out += tok if glue else " " + tok
        prev = tok
    return out


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        seen = set("0123456789.")
        for text in texts:
            seen.update(tokenize(text))
        return cls(sorted(seen - set(RESERVED)))

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def placeholder_id(self, j: int) -> int:
        return 3 + j

    def is_placeholder(self, token_id: int) -> bool:
        return 3 <= token_id < 3 + MAX_REGIONS

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(t, self.unk_id) for t in tokenize(text)]
        return ids + [self.eos_id] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> str:
        toks = []
        for i in ids:
            if i == self.eos_id:
                break
            if i == self.pad_id:
                continue
            toks.append(self.itos[i])
        return detokenize(toks)

    def save(self, path) -> None:
        atomic_write_bytes(path, ("\n".join(self.itos) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(lines[len(RESERVED) :])
