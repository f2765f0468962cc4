"""Synthetic multilingual universe built from cipher languages.

Every language renders the same pivot sentences (sequences of content-token
indices) through a private permutation into its own disjoint block of surface
ids. Translation between any two languages therefore has an exact reference,
and language identification reduces to range membership.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

UNIVERSE_FORMAT_VERSION = 1
PIVOT_CODE = "en"


@dataclass(frozen=True)
class LanguageId:
    code: str
    index: int


@dataclass(frozen=True)
class CipherLanguage:
    lang: LanguageId
    permutation: tuple[int, ...]
    surface_offset: int
    reorder: bool = False

    def __post_init__(self):
        inverse = [0] * len(self.permutation)
        for i, p in enumerate(self.permutation):
            inverse[p] = i
        object.__setattr__(self, "_inverse", tuple(inverse))

    @property
    def code(self) -> str:
        return self.lang.code

    @property
    def width(self) -> int:
        return len(self.permutation)

    @property
    def inverse(self) -> tuple[int, ...]:
        return self._inverse  # type: ignore[attr-defined]

    def owns(self, surface_id: int) -> bool:
        return self.surface_offset <= surface_id < self.surface_offset + self.width

    def _swap(self, seq: list[int]) -> list[int]:
        # Adjacent swap starting at position (language index parity); an involution.
        out = list(seq)
        for i in range(self.lang.index % 2, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out


@dataclass(frozen=True)
class PivotSentence:
    tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SentencePair:
    src_lang: str
    tgt_lang: str
    src: tuple[int, ...]
    tgt: tuple[int, ...]

    @property
    def direction(self) -> tuple[str, str]:
        return (self.src_lang, self.tgt_lang)


@dataclass(frozen=True)
class Universe:
    languages: tuple[CipherLanguage, ...]
    v_content: int
    seed: int
    pivot: str = PIVOT_CODE
    _by_code: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._by_code.update({lang.code: lang for lang in self.languages})

    def __getitem__(self, code: str) -> CipherLanguage:
        try:
            return self._by_code[code]
        except KeyError:
            raise KeyError(f"unknown language {code!r}") from None

    def __contains__(self, code: str) -> bool:
        return code in self._by_code

    def __len__(self) -> int:
        return len(self.languages)

    @property
    def codes(self) -> list[str]:
        return [lang.code for lang in self.languages]

    @property
    def non_pivot(self) -> list[str]:
        return [c for c in self.codes if c != self.pivot]

    @property
    def surface_size(self) -> int:
        return sum(lang.width for lang in self.languages)

    def language_of(self, surface_id: int) -> str | None:
        if surface_id < 0:
            return None
        k = surface_id // self.v_content
        if k < len(self.languages) and self.languages[k].owns(surface_id):
            return self.languages[k].code
        for lang in self.languages:
            if lang.owns(surface_id):
                return lang.code
        return None

    def english_centric(self) -> list[tuple[str, str]]:
        out = []
        for x in self.non_pivot:
            out.append((x, self.pivot))
            out.append((self.pivot, x))
        return out

    def direct(self) -> list[tuple[str, str]]:
        return [(a, b) for a in self.non_pivot for b in self.non_pivot if a != b]

    def all_directions(self) -> list[tuple[str, str]]:
        return [(a, b) for a in self.codes for b in self.codes if a != b]

    def to_json(self) -> str:
        doc = {
            "version": UNIVERSE_FORMAT_VERSION,
            "seed": self.seed,
            "v_content": self.v_content,
            "pivot": self.pivot,
            "languages": [
                {
                    "code": lang.code,
                    "index": lang.lang.index,
                    "offset": lang.surface_offset,
                    "reorder": lang.reorder,
                    "permutation": list(lang.permutation),
                }
                for lang in self.languages
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Universe":
        doc = json.loads(text)
        if doc.get("version") != UNIVERSE_FORMAT_VERSION:
            raise ValueError(f"unsupported universe version {doc.get('version')!r}")
        langs = tuple(
            CipherLanguage(
                LanguageId(d["code"], d["index"]),
                tuple(d["permutation"]),
                d["offset"],
                d.get("reorder", False),
            )
            for d in doc["languages"]
        )
        return cls(langs, doc["v_content"], doc["seed"], doc.get("pivot", PIVOT_CODE))


def default_codes(n_languages: int) -> list[str]:
    return [PIVOT_CODE] + [f"x{i}" for i in range(1, n_languages)]


def build_universe(n_languages: int, v_content: int, seed: int, reorder: bool = False) -> Universe:
    """Build ``n_languages`` cipher languages over ``v_content`` pivot tokens.

    Language 0 is the pivot ("en"). Surface ranges are laid out back to back, so
    language ``k`` owns ``[k * v_content, (k + 1) * v_content)``.
    """
    if n_languages < 3:
        raise ValueError(f"need >=3 languages for direct translation, got {n_languages}")
    if v_content < 2:
        raise ValueError(f"need v_content >= 2, got {v_content}")
    rng = np.random.default_rng(seed)
    langs = []
    for k, code in enumerate(default_codes(n_languages)):
        perm = tuple(int(p) for p in rng.permutation(v_content))
        langs.append(CipherLanguage(LanguageId(code, k), perm, k * v_content, reorder))
    return Universe(tuple(langs), v_content, seed)


@dataclass(frozen=True)
class LengthDist:
    """Sentence-length law: ``uniform`` on [low, max_len] or ``poisson`` around ``mean``."""

    kind: str = "uniform"
    low: int = 3
    mean: float = 8.0
    max_len: int = 16

    def validate(self):
        if self.kind not in ("uniform", "poisson", "fixed"):
            raise ValueError(f"unknown length distribution {self.kind!r}")
        if self.max_len < 1 or not 1 <= self.low <= self.max_len:
            raise ValueError(f"bad length bounds low={self.low} max_len={self.max_len}")
        if self.kind == "poisson" and self.mean <= 0:
            raise ValueError("poisson mean must be positive")

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        self.validate()
        if self.kind == "uniform":
            lengths = rng.integers(self.low, self.max_len + 1, size=count)
        elif self.kind == "poisson":
            lengths = rng.poisson(self.mean, size=count)
        else:
            lengths = np.full(count, self.max_len)
        return np.clip(lengths, 1, self.max_len)


def zipf_probs(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-s)
    return w / w.sum()


def sample_pivot(
    length_dist: LengthDist,
    zipf_s: float,
    count: int,
    seed: int,
    v_content: int,
    support: Sequence[int] | None = None,
) -> list[PivotSentence]:
    """Draw ``count`` pivot sentences with Zipf(``zipf_s``) token frequencies.

    ``support`` lists the content tokens in rank order (most frequent first);
    by default it is ``range(v_content)``, so token 0 is rank 1.
    """
    if zipf_s < 0:
        raise ValueError(f"zipf exponent must be >= 0, got {zipf_s}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    length_dist.validate()
    tokens = np.arange(v_content) if support is None else np.asarray(support)
    if tokens.size == 0 or tokens.min() < 0 or tokens.max() >= v_content:
        raise ValueError("support must be a non-empty subset of [0, v_content)")
    rng = np.random.default_rng(seed)
    lengths = length_dist.sample(rng, count)
    flat = rng.choice(tokens, size=int(lengths.sum()), p=zipf_probs(tokens.size, zipf_s))
    out = []
    pos = 0
    for n in lengths:
        out.append(PivotSentence(tuple(int(t) for t in flat[pos:pos + n])))
        pos += n
    return out


def render(p: PivotSentence | Sequence[int], lang: CipherLanguage) -> tuple[int, ...]:
    tokens = p.tokens if isinstance(p, PivotSentence) else p
    out = []
    for t in tokens:
        if not 0 <= t < lang.width:
            raise ValueError(f"pivot index {t} out of range [0, {lang.width})")
        out.append(lang.surface_offset + lang.permutation[t])
    if lang.reorder:
        out = lang._swap(out)
    return tuple(out)


def parse(s: Sequence[int], lang: CipherLanguage) -> PivotSentence:
    seq = lang._swap(list(s)) if lang.reorder else list(s)
    out = []
    for t in seq:
        if not lang.owns(t):
            raise ValueError(f"surface id {t} is not in language {lang.code!r}")
        out.append(lang.inverse[t - lang.surface_offset])
    return PivotSentence(tuple(out))


def oracle_translate(s: Sequence[int], src: CipherLanguage, tgt: CipherLanguage) -> tuple[int, ...]:
    return render(parse(s, src), tgt)


def _unique_pivots(
    n: int, seed: int, v_content: int, length_dist: LengthDist, zipf_s: float,
    exclude: set, support: Sequence[int] | None,
) -> list[PivotSentence]:
    out: list[PivotSentence] = []
    seen = set(exclude)
    round_ = 0
    while len(out) < n:
        if round_ > 50:
            raise ValueError("could not draw enough distinct pivot sentences; widen the length or token range")
        batch = sample_pivot(length_dist, zipf_s, max(2 * (n - len(out)), 16),
                             seed * 1000 + round_, v_content, support)
        for p in batch:
            if p.tokens not in seen:
                seen.add(p.tokens)
                out.append(p)
                if len(out) == n:
                    break
        round_ += 1
    return out


@dataclass
class Corpus:
    train: list[SentencePair]
    dev: list[SentencePair]
    test: list[SentencePair]


def make_corpus(
    universe: Universe,
    directions: Iterable[tuple[str, str]],
    pairs_per_direction: int,
    seed: int,
    *,
    dev_per_direction: int = 50,
    test_per_direction: int = 50,
    length_dist: LengthDist = LengthDist(),
    zipf_s: float = 1.0,
    support: Sequence[int] | None = None,
    eval_directions: Iterable[tuple[str, str]] | None = None,
) -> Corpus:
    """Build train/dev/test pairs whose pivot sentences never overlap across splits.

    Training pairs are drawn independently per direction from the training
    pool. Dev and test are multi-way: every direction in ``eval_directions``
    (default: all ordered pairs) renders the same held-out pivot sentences.
    """
    directions = list(directions)
    for a, b in directions:
        if a not in universe or b not in universe:
            raise ValueError(f"unknown direction {a}->{b}")
        if a == b:
            raise ValueError(f"degenerate direction {a}->{b}")
    eval_dirs = universe.all_directions() if eval_directions is None else list(eval_directions)
    v = universe.v_content
    heldout = _unique_pivots(dev_per_direction + test_per_direction, seed + 1, v, length_dist,
                             zipf_s, set(), support)
    dev_p, test_p = heldout[:dev_per_direction], heldout[dev_per_direction:]
    banned = {p.tokens for p in heldout}
    pool = _unique_pivots(pairs_per_direction * max(1, len(directions)) if directions else 0,
                          seed + 2, v, length_dist, zipf_s, banned, support) if directions else []

    rng = np.random.default_rng(seed)
    train = []
    for a, b in directions:
        idx = rng.choice(len(pool), size=min(pairs_per_direction, len(pool)), replace=False)
        for i in idx:
            p = pool[int(i)]
            train.append(SentencePair(a, b, render(p, universe[a]), render(p, universe[b])))

    def _multiway(pivots):
        return [SentencePair(a, b, render(p, universe[a]), render(p, universe[b]))
                for a, b in eval_dirs for p in pivots]

    return Corpus(train, _multiway(dev_p), _multiway(test_p))
