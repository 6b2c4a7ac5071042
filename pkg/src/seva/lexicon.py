"""Phone inventory and word lexicon shared by the corpus generator and decoders."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

STATES_PER_PHONE = 3

# (name, F1 Hz, F2 Hz); names double as graphemes for the CTC models.
PHONE_TABLE = (
    ("i", 300, 2300), ("e", 450, 2000), ("a", 750, 1300), ("o", 500, 900),
    ("u", 320, 800), ("y", 300, 1700), ("m", 280, 1100), ("n", 300, 1600),
    ("l", 400, 1200), ("r", 450, 1450), ("w", 350, 700), ("s", 600, 2500),
)
PHONES = tuple(p[0] for p in PHONE_TABLE)
PHONE_FORMANTS = np.array([p[1:] for p in PHONE_TABLE], dtype=float)


class LexiconError(ValueError):
    pass


@dataclass
class Lexicon:
    entries: dict[str, tuple[int, ...]]
    phones: tuple[str, ...] = PHONES
    states_per_phone: int = STATES_PER_PHONE
    _words: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.entries:
            raise LexiconError("lexicon is empty")
        self.entries = {w: tuple(int(p) for p in seq) for w, seq in self.entries.items()}
        for word, seq in self.entries.items():
            if not seq:
                raise LexiconError(f"word {word!r} has no phones")
            if any(not 0 <= p < len(self.phones) for p in seq):
                raise LexiconError(f"word {word!r} uses a phone outside the inventory")
        self._words = sorted(self.entries)

    @classmethod
    def from_spellings(cls, words: Sequence[str], phones: Sequence[str] = PHONES) -> "Lexicon":
        index = {p: i for i, p in enumerate(phones)}
        if len(set(words)) != len(words):
            raise LexiconError("duplicate words")
        try:
            return cls({w: tuple(index[c] for c in w) for w in words}, tuple(phones))
        except KeyError as e:
            raise LexiconError(f"unknown phone {e.args[0]!r}") from None

    @property
    def words(self) -> list[str]:
        return self._words

    @property
    def n_phones(self) -> int:
        return len(self.phones)

    @property
    def n_states(self) -> int:
        return self.n_phones * self.states_per_phone

    def state_sequence(self, word: str) -> np.ndarray:
        s = self.states_per_phone
        return np.array([p * s + k for p in self.entries[word] for k in range(s)], dtype=int)

    def graphemes(self, word: str) -> list[int]:
        """Grapheme indices in [1, V]; 0 is reserved for the CTC blank."""
        return [p + 1 for p in self.entries[word]]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word) -> bool:
        return word in self.entries


def default_word_list(n_words: int = 30, seed: int = 2023) -> list[str]:
    """Deterministic unique pseudo-words of 2-4 phones, no phone repeated back to back."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    while len(words) < n_words:
        length = int(rng.integers(2, 5))
        seq = rng.choice(len(PHONES), size=length)
        if np.any(seq[1:] == seq[:-1]):
            continue
        w = "".join(PHONES[i] for i in seq)
        if w in words:
            continue
        words.append(w)
    return words


def default_lexicon(n_words: int = 30) -> Lexicon:
    return Lexicon.from_spellings(default_word_list(n_words))


def read_vocab(path) -> list[str]:
    """Grapheme vocabulary: one symbol per line, index = line number + 1."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def write_vocab(path, symbols: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in symbols:
            fh.write(f"{s}\n")


def vocab_index(symbols: Sequence[str]) -> Mapping[str, int]:
    return {s: i + 1 for i, s in enumerate(symbols)}
