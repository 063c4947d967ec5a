"""Object extraction from free text with a fixed lexicon.

The offline judge tokenises a description, matches the longest lexicon
phrase at each position and folds synonyms and plurals onto canonical
labels.  It is deterministic and needs no network access.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable

_TOKEN = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")
_ARTICLES = {"a", "an", "the", "some", "several", "two", "three", "many"}


@dataclass(frozen=True)
class ObjectSet:
    labels: frozenset
    source: str = "offline"

    def __contains__(self, label) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(sorted(self.labels))

    @classmethod
    def of(cls, labels: Iterable[str], source: str = "offline") -> "ObjectSet":
        return cls(frozenset(labels), source)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _plurals(word: str) -> set[str]:
    forms = {word, word + "s"}
    if word.endswith(("s", "x", "z", "ch", "sh", "o")):
        forms.add(word + "es")
    if len(word) > 1 and word.endswith("y") and word[-2] not in "aeiou":
        forms.add(word[:-1] + "ies")
    if word.endswith("f"):
        forms.add(word[:-1] + "ves")
    elif word.endswith("fe"):
        forms.add(word[:-2] + "ves")
    return forms


class Lexicon:
    """Surface-form to canonical-label table."""

    def __init__(self, entries: Iterable[tuple[str, Iterable[str]]] = ()):
        self.labels: list[str] = []
        self._surface: dict[tuple[str, ...], str] = {}
        self.max_len = 1
        for label, synonyms in entries:
            self.add(label, synonyms)

    def add(self, label: str, synonyms: Iterable[str] = ()) -> str:
        label = " ".join(tokenize(label))
        if not label:
            raise ValueError("empty lexicon label")
        if label not in self.labels:
            self.labels.append(label)
        for form in (label, *synonyms):
            words = tokenize(form)
            if not words:
                continue
            for last in _plurals(words[-1]):
                key = tuple(words[:-1]) + (last,)
                # first definition wins so the canonical label is stable
                self._surface.setdefault(key, label)
                self.max_len = max(self.max_len, len(key))
        return label

    @classmethod
    def parse(cls, text: str) -> "Lexicon":
        lex = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cols = [c.strip() for c in line.split("|")]
            lex.add(cols[0], [c for c in cols[1:] if c])
        return lex

    @classmethod
    def load(cls, path=None) -> "Lexicon":
        if path is None:
            text = resources.files("advedm.metrics").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.parse(text)

    def copy(self) -> "Lexicon":
        new = Lexicon()
        new.labels = list(self.labels)
        new._surface = dict(self._surface)
        new.max_len = self.max_len
        return new

    def merge(self, other: "Lexicon") -> "Lexicon":
        """Copy extended with ``other``'s forms; existing forms keep their label."""
        new = self.copy()
        for label in other.labels:
            if label not in new.labels:
                new.labels.append(label)
        for key, label in other._surface.items():
            new._surface.setdefault(key, label)
        new.max_len = max(new.max_len, other.max_len)
        return new

    def lookup(self, words: tuple[str, ...]) -> str | None:
        return self._surface.get(words)

    def canonical(self, phrase: str) -> str:
        """Canonical label of ``phrase``; unknown phrases map to themselves."""
        words = [w for w in tokenize(phrase) if w not in _ARTICLES]
        return self._surface.get(tuple(words)) or " ".join(words)

    def scan(self, text: str) -> set[str]:
        words = tokenize(text)
        found = set()
        i = 0
        while i < len(words):
            for n in range(min(self.max_len, len(words) - i), 0, -1):
                label = self._surface.get(tuple(words[i : i + n]))
                if label is not None:
                    found.add(label)
                    i += n
                    break
            else:
                i += 1
        return found

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self.labels


_DEFAULT: Lexicon | None = None


def default_lexicon() -> Lexicon:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Lexicon.load()
    return _DEFAULT


class OfflineJudge:
    """Lexicon-matching object extractor. Negations are not parsed: "no dog" still yields dog."""

    name = "offline"

    def __init__(self, lexicon: Lexicon | None = None):
        self.lexicon = lexicon or default_lexicon()

    def canonical(self, phrase: str) -> str:
        return self.lexicon.canonical(phrase)

    def extract(self, text: str, extra_labels: Iterable[str] = ()) -> ObjectSet:
        lex = self.lexicon
        extra = [e for e in (self.canonical(x) for x in extra_labels) if e and e not in lex]
        if extra:
            lex = lex.copy()
            for label in extra:
                lex.add(label)
        return ObjectSet.of(lex.scan(text), self.name)
