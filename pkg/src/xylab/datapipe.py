"""Corpus hygiene and composition: length/ratio/LID filtering, leakage-safe
dedup against held-out sets, capped per-direction mixing, and the TSV
corpus format."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .langspec import SentencePair, Universe

REJECT_REASONS = ("malformed", "length", "ratio", "lid")


@dataclass(frozen=True)
class FilterConfig:
    max_words: int = 250
    max_ratio: float = 3.0
    lid_enabled: bool = True

    def __post_init__(self):
        if self.max_words < 1:
            raise ValueError(f"max_words must be >= 1, got {self.max_words}")
        if self.max_ratio < 1.0:
            raise ValueError(f"max_ratio must be >= 1.0, got {self.max_ratio}")


def identity_normalizer(tokens: Sequence[int]) -> Sequence[int]:
    return tokens


def membership_detector(universe: Universe) -> Callable[[Sequence[int], str], bool]:
    """True iff every token lies in the declared language's surface range."""
    def passes(tokens: Sequence[int], lang: str) -> bool:
        cl = universe[lang]
        return all(cl.owns(t) for t in tokens)
    return passes


def rejection_reason(pair: SentencePair, cfg: FilterConfig, detector) -> str | None:
    """First failing rule, checked in the fixed order length, ratio, lid."""
    ns, nt = len(pair.src), len(pair.tgt)
    if ns == 0 or nt == 0:
        return "malformed"
    if ns > cfg.max_words or nt > cfg.max_words:
        return "length"
    if max(ns / nt, nt / ns) > cfg.max_ratio:
        return "ratio"
    if cfg.lid_enabled and not (detector(pair.src, pair.src_lang) and detector(pair.tgt, pair.tgt_lang)):
        return "lid"
    return None


class FilterResult:
    """Iterator over kept pairs; ``tally`` fills in as the stream is consumed."""

    def __init__(self, pairs: Iterable[SentencePair], cfg: FilterConfig, detector,
                 normalizer=identity_normalizer):
        self._pairs = pairs
        self.cfg = cfg
        self.detector = detector
        self.normalizer = normalizer
        self.tally: Counter = Counter()

    def __iter__(self) -> Iterator[SentencePair]:
        for p in self._pairs:
            norm = SentencePair(p.src_lang, p.tgt_lang, tuple(self.normalizer(p.src)),
                                tuple(self.normalizer(p.tgt)))
            reason = rejection_reason(norm, self.cfg, self.detector)
            if reason is None:
                self.tally["kept"] += 1
                yield norm
            else:
                self.tally[reason] += 1

    def tally_json(self) -> str:
        return json.dumps({k: self.tally.get(k, 0) for k in ("kept", *REJECT_REASONS)})


def filter_corpus(pairs: Iterable[SentencePair], cfg: FilterConfig, detector,
                  normalizer=identity_normalizer) -> tuple[list[SentencePair], Counter]:
    res = FilterResult(pairs, cfg, detector, normalizer)
    kept = list(res)
    return kept, res.tally


def mix_for_direct_ft(english_centric: Sequence[SentencePair], direct: Sequence[SentencePair],
                      cap_per_direction: int, seed: int) -> list[SentencePair]:
    """All direct pairs plus at most ``cap_per_direction`` pairs from each
    English-centric direction (sampled without replacement), shuffled."""
    if cap_per_direction < 1:
        raise ValueError("cap_per_direction must be >= 1")
    if not english_centric or not direct:
        raise ValueError("both corpora must be non-empty")
    rng = np.random.default_rng(seed)
    by_dir: dict[tuple[str, str], list[SentencePair]] = {}
    for p in english_centric:
        by_dir.setdefault(p.direction, []).append(p)
    out = list(direct)
    for d in sorted(by_dir):
        pool = by_dir[d]
        if len(pool) <= cap_per_direction:
            out.extend(pool)
        else:
            idx = np.sort(rng.choice(len(pool), size=cap_per_direction, replace=False))
            out.extend(pool[i] for i in idx)
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def dedup_against(train: Iterable[SentencePair], holdouts: Iterable[Iterable[SentencePair]]) -> list[SentencePair]:
    """Drop training pairs whose (src, tgt) surface sequences occur in any holdout."""
    seen = {(p.src, p.tgt) for h in holdouts for p in h}
    return [p for p in train if (p.src, p.tgt) not in seen]


# -- TSV --------------------------------------------------------------------

class CorpusFormatError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def format_line(p: SentencePair) -> str:
    return f"{p.src_lang}\t{p.tgt_lang}\t{' '.join(map(str, p.src))}\t{' '.join(map(str, p.tgt))}\n"


def parse_line(line: str, path="<string>", line_no: int = 0) -> SentencePair:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 4:
        raise CorpusFormatError(path, line_no, f"expected 4 tab-separated fields, got {len(fields)}")
    s, t, src, tgt = fields
    if not s or not t:
        raise CorpusFormatError(path, line_no, "empty language code")
    try:
        src_ids = tuple(int(x) for x in src.split())
        tgt_ids = tuple(int(x) for x in tgt.split())
    except ValueError as e:
        raise CorpusFormatError(path, line_no, f"bad token id ({e})") from None
    return SentencePair(s, t, src_ids, tgt_ids)


def write_corpus(pairs: Iterable[SentencePair], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pairs:
            f.write(format_line(p))
            n += 1
    return n


def read_corpus(path: str | Path) -> Iterator[SentencePair]:
    with open(path, encoding="utf-8", newline="\n") as f:
        for i, line in enumerate(f, 1):
            if line.strip() == "":
                continue
            yield parse_line(line, path, i)
