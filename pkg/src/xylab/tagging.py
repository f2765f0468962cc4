"""Vocabulary with language-control tokens and the four tagging schemes.

Layout of the id space: specials first, then one SRC_ and one TGT_ token per
language, then the universe's surface tokens in order. Control tokens exist
for every language regardless of scheme, so switching schemes never changes
the embedding table shape or the id of any surface token.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Sequence

from .langspec import SentencePair, Universe

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class TokenScheme(enum.Enum):
    TE = "T-E"
    STT = "ST-T"
    ST = "S-T"
    TT = "T-T"

    @classmethod
    def parse(cls, name: "str | TokenScheme") -> "TokenScheme":
        if isinstance(name, TokenScheme):
            return name
        for s in cls:
            if name in (s.value, s.name):
                return s
        raise ValueError(f"unknown token scheme {name!r}; expected one of "
                         f"{[s.value for s in cls]}")


class Vocabulary:
    def __init__(self, codes: Sequence[str], surface_size: int):
        self.codes = list(codes)
        self.surface_size = surface_size
        self.n_special = len(SPECIALS)
        self.n_langs = len(self.codes)
        self._src = {c: self.n_special + 2 * i for i, c in enumerate(self.codes)}
        self._tgt = {c: self.n_special + 2 * i + 1 for i, c in enumerate(self.codes)}
        self.surface_base = self.n_special + 2 * self.n_langs

    @classmethod
    def from_universe(cls, universe: Universe) -> "Vocabulary":
        return cls(universe.codes, universe.surface_size)

    def __len__(self) -> int:
        return self.surface_base + self.surface_size

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocabulary) and self.codes == other.codes
                and self.surface_size == other.surface_size)

    def src_token(self, code: str) -> int:
        try:
            return self._src[code]
        except KeyError:
            raise KeyError(f"unknown language {code!r}") from None

    def tgt_token(self, code: str) -> int:
        try:
            return self._tgt[code]
        except KeyError:
            raise KeyError(f"unknown language {code!r}") from None

    def is_surface(self, token_id: int) -> bool:
        return self.surface_base <= token_id < len(self)

    def encode_surface(self, surface: Sequence[int]) -> list[int]:
        base = self.surface_base
        for s in surface:
            if not 0 <= s < self.surface_size:
                raise ValueError(f"surface id {s} outside universe")
        return [base + s for s in surface]

    def decode_surface(self, ids: Sequence[int]) -> tuple[int, ...]:
        return tuple(i - self.surface_base for i in ids)

    def token_table(self) -> dict[str, int]:
        table = {name: i for i, name in enumerate(SPECIALS)}
        for c in self.codes:
            table[f"<src:{c}>"] = self._src[c]
            table[f"<tgt:{c}>"] = self._tgt[c]
        for s in range(self.surface_size):
            table[f"w{s}"] = self.surface_base + s
        return table

    def to_json(self) -> str:
        return json.dumps({"languages": self.codes, "surface_size": self.surface_size,
                           "tokens": self.token_table()})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        vocab = cls(doc["languages"], doc["surface_size"])
        if "tokens" in doc and doc["tokens"] != vocab.token_table():
            raise ValueError("token table does not match the declared layout")
        return vocab


@dataclass(frozen=True)
class TaggedExample:
    encoder_ids: tuple[int, ...]
    decoder_input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]


def encoder_prefix(scheme: TokenScheme, src: str, tgt: str, vocab: Vocabulary) -> list[int]:
    if scheme is TokenScheme.STT:
        return [vocab.src_token(src), vocab.tgt_token(tgt)]
    if scheme is TokenScheme.ST:
        return [vocab.src_token(src)]
    return [vocab.tgt_token(tgt)]


def decode_start_token(scheme: TokenScheme, tgt: str, vocab: Vocabulary) -> int:
    tok = vocab.tgt_token(tgt)  # validates tgt even for T-E
    return BOS if scheme is TokenScheme.TE else tok


def encode_source(src_lang: str, tgt_lang: str, src: Sequence[int], scheme: TokenScheme,
                  vocab: Vocabulary) -> tuple[int, ...]:
    return tuple(encoder_prefix(scheme, src_lang, tgt_lang, vocab)
                 + vocab.encode_surface(src) + [EOS])


def apply_scheme(pair: SentencePair, scheme: TokenScheme, vocab: Vocabulary) -> TaggedExample:
    scheme = TokenScheme.parse(scheme)
    enc = encode_source(pair.src_lang, pair.tgt_lang, pair.src, scheme, vocab)
    tgt = vocab.encode_surface(pair.tgt)
    start = decode_start_token(scheme, pair.tgt_lang, vocab)
    return TaggedExample(enc, tuple([start] + tgt), tuple(tgt + [EOS]))


def strip_output(ids: Sequence[int], vocab: Vocabulary) -> tuple[int, ...]:
    """Cut at the first EOS and keep only surface tokens, as universe surface ids."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if vocab.is_surface(i):
            out.append(i - vocab.surface_base)
    return tuple(out)
