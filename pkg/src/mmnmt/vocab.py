from __future__ import annotations

import hashlib
from collections import Counter
from typing import Iterable, Sequence

EOS, UNK, PAD = "</s>", "<unk>", "<pad>"
EOS_ID, UNK_ID, PAD_ID = 0, 1, 2
RESERVED = (EOS, UNK, PAD)


class Vocabulary:
    """Token <-> index bijection with reserved eos/unk/pad at indices 0/1/2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        """Vocabulary from tokenized sentences; ties in frequency keep first-seen order."""
        counts: Counter = Counter()
        order: dict[str, int] = {}
        for sent in sentences:
            for tok in sent:
                counts[tok] += 1
                order.setdefault(tok, len(order))
        keep = [t for t in order if counts[t] >= min_count and t not in RESERVED]
        return cls(keep)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(t, UNK_ID) for t in tokens]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int], strip_eos: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_eos and i == EOS_ID:
                break
            out.append(self.itos[i])
        return out

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        """One token per line; the first three lines are the reserved eos, unk, pad."""
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f]
        return cls.from_list(lines)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        return cls(tokens[3:])
