"""Pronunciation lexicon (SAMPA) and the manner-of-articulation class table."""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import FormatError, MappingError, OOVError


class MannerClass(str, Enum):
    NAS = "NAS"
    APR = "APR"
    FLP = "FLP"
    STP = "STP"
    FRC = "FRC"
    AFR = "AFR"
    VWL = "VWL"

    @property
    def index(self) -> int:
        return MANNER_ORDER.index(self)


# Column order of every articulation matrix and per-category report.
MANNER_ORDER: tuple[MannerClass, ...] = tuple(MannerClass)
N_MANNER = len(MANNER_ORDER)
SIL = "SIL"


def _read_tsv(text: str, source: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            raise FormatError(f"{source}:{lineno}: expected a TAB-separated entry")
        key, value = line.split("\t", 1)
        yield lineno, key.strip(), value.strip()


def load_manner_table(path=None) -> dict[str, MannerClass]:
    """Read a ``phoneme<TAB>class`` table; the bundled table when ``path`` is None."""
    if path is None:
        text = resources.files("articsep.data").joinpath("manner_table.tsv").read_text("utf-8")
        source = "manner_table.tsv"
    else:
        text, source = Path(path).read_text("utf-8"), str(path)
    table = {}
    for lineno, phone, cls in _read_tsv(text, source):
        try:
            table[phone] = MannerClass(cls.upper())
        except ValueError:
            raise FormatError(f"{source}:{lineno}: unknown manner class {cls!r}") from None
    return table


_DEFAULT_TABLE: dict[str, MannerClass] | None = None


def default_manner_table() -> dict[str, MannerClass]:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_manner_table()
    return _DEFAULT_TABLE


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, tuple[str, ...]]
    manner_table: dict[str, MannerClass]

    def __post_init__(self):
        for word, phones in self.entries.items():
            if not phones:
                raise FormatError(f"empty pronunciation for {word!r}")
            for ph in phones:
                if ph not in self.manner_table:
                    raise MappingError(f"phoneme {ph!r} in {word!r} has no manner class")

    @classmethod
    def load(cls, path=None, manner_table=None) -> "Lexicon":
        if path is None:
            text = resources.files("articsep.data").joinpath("demo_lexicon.tsv").read_text("utf-8")
            source = "demo_lexicon.tsv"
        else:
            text, source = Path(path).read_text("utf-8"), str(path)
        entries = {}
        for _, word, pron in _read_tsv(text, source):
            entries[word.lower()] = tuple(pron.split())
        table = default_manner_table() if manner_table is None else manner_table
        return cls(entries, table)

    def __contains__(self, word) -> bool:
        return word in self.entries


_PUNCT = re.compile(r"[^a-z0-9' ]+")


def normalize(text: str) -> list[str]:
    """Case-fold, strip punctuation (keeping word-internal apostrophes), split on whitespace."""
    words = _PUNCT.sub(" ", text.lower()).split()
    return [w.strip("'") for w in words if w.strip("'")]


def tokenize(text: str, lexicon: Lexicon) -> list[tuple[str, tuple[str, ...]]]:
    """Look up every word of ``text``; raises :class:`OOVError` naming all unknown words."""
    words = normalize(text)
    missing = [w for w in dict.fromkeys(words) if w not in lexicon.entries]
    if missing:
        raise OOVError(missing)
    return [(w, lexicon.entries[w]) for w in words]


def manner_of(phoneme: str, table: dict[str, MannerClass] | None = None) -> MannerClass:
    table = default_manner_table() if table is None else table
    try:
        return table[phoneme]
    except KeyError:
        raise MappingError(f"no manner class for phoneme {phoneme!r}") from None


def to_manner_tokens(phonemes, table=None) -> list[tuple[MannerClass, str]]:
    # Same-class neighbours stay separate tokens; each gets its own HMM segment.
    return [(manner_of(ph, table), ph) for ph in phonemes]


def text_to_manner_tokens(text: str, lexicon: Lexicon) -> list[tuple[MannerClass, str]]:
    phones = [ph for _, pron in tokenize(text, lexicon) for ph in pron]
    return to_manner_tokens(phones, lexicon.manner_table)
