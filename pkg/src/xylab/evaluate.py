"""Decoding and measurement: greedy/beam search, corpus BLEU, off-target rate,
group aggregates and paired bootstrap significance."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .langspec import SentencePair, Universe
from .model import Checkpoint, ModelConfig, Params, decode, encode
from .tagging import EOS, PAD, TokenScheme, Vocabulary, decode_start_token, encode_source, strip_output

MAX_ORDER = 4


@dataclass(frozen=True)
class Hypothesis:
    src_lang: str
    tgt_lang: str
    output: tuple[int, ...]
    reference: tuple[int, ...]

    @property
    def direction(self) -> tuple[str, str]:
        return (self.src_lang, self.tgt_lang)


# -- decoding ---------------------------------------------------------------

def _encoder_batch(pairs: Sequence[SentencePair], scheme: TokenScheme, vocab: Vocabulary):
    rows = [encode_source(p.src_lang, p.tgt_lang, p.src, scheme, vocab) for p in pairs]
    width = max(len(r) for r in rows)
    enc = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        enc[i, :len(r)] = torch.tensor(r)
    start = torch.tensor([decode_start_token(scheme, p.tgt_lang, vocab) for p in pairs])
    return enc, start


def _normalized(logp: float, length: int, alpha: float) -> float:
    return logp / max(length, 1) ** alpha


@torch.no_grad()
def greedy_search(params: Params, cfg: ModelConfig, enc: torch.Tensor, start: torch.Tensor,
                  max_len: int) -> tuple[list[list[int]], list[float]]:
    """Token lists (EOS included when produced) and their summed log-probabilities."""
    memory = encode(params, cfg, enc)
    mask = enc != PAD
    B = enc.shape[0]
    dec = start[:, None]
    done = torch.zeros(B, dtype=torch.bool)
    logp = torch.zeros(B, dtype=torch.float64)
    for _ in range(max_len):
        logits = decode(params, cfg, memory, mask, dec)[:, -1]
        lp = torch.log_softmax(logits.double(), dim=-1)
        nxt = lp.argmax(-1)
        logp += torch.where(done, torch.zeros_like(logp), lp.gather(-1, nxt[:, None]).squeeze(-1))
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        dec = torch.cat([dec, nxt[:, None]], dim=1)
        done |= nxt == EOS
        if bool(done.all()):
            break
    out = []
    for row in dec[:, 1:].tolist():
        toks = []
        for t in row:
            if t == PAD:
                break
            toks.append(t)
            if t == EOS:
                break
        out.append(toks)
    return out, logp.tolist()


@torch.no_grad()
def beam_search(params: Params, cfg: ModelConfig, enc: torch.Tensor, start: torch.Tensor,
                max_len: int, width: int = 4, alpha: float = 1.0) -> list[list[int]]:
    """Length-normalized beam search.

    An EOS candidate is finalized only when it ranks inside the top ``width``
    at its step, so ``width=1`` follows the greedy path exactly. The greedy
    hypothesis is always among the final candidates, which makes the returned
    normalized score at least the greedy one.
    """
    greedy, greedy_lp = greedy_search(params, cfg, enc, start, max_len)
    if width == 1:
        return greedy
    B = enc.shape[0]
    k = width
    memory = encode(params, cfg, enc)
    mask = enc != PAD
    memory = memory.repeat_interleave(k, 0)
    mask = mask.repeat_interleave(k, 0)
    dec = start.repeat_interleave(k)[:, None]
    scores = torch.full((B, k), float("-inf"), dtype=torch.float64)
    scores[:, 0] = 0.0
    finished: list[list[tuple[float, list[int]]]] = [[] for _ in range(B)]
    for b in range(B):
        finished[b].append((_normalized(greedy_lp[b], len(greedy[b]), alpha), greedy[b]))
    n_final = [0] * B
    active = [True] * B
    V = cfg.vocab_size
    for step in range(max_len):
        logits = decode(params, cfg, memory, mask, dec)[:, -1]
        lp = torch.log_softmax(logits.double(), dim=-1).view(B, k, V)
        cand = (scores[:, :, None] + lp).view(B, k * V)
        top_s, top_i = cand.topk(2 * k, dim=-1)
        new_rows, new_scores = [], []
        for b in range(B):
            rows, sc = [], []
            for r in range(2 * k):
                s = float(top_s[b, r])
                if s == float("-inf"):
                    break
                beam, tok = divmod(int(top_i[b, r]), V)
                prefix = dec[b * k + beam, 1:].tolist()
                if tok == EOS:
                    if r < k and active[b]:
                        finished[b].append((_normalized(s, len(prefix) + 1, alpha), prefix + [EOS]))
                        n_final[b] += 1
                    continue
                if len(rows) < k:
                    rows.append((beam, tok))
                    sc.append(s)
            if n_final[b] >= k:
                active[b] = False
            while len(rows) < k:
                rows.append((0, PAD))
                sc.append(float("-inf"))
            new_rows.append(rows)
            new_scores.append(sc)
        idx = torch.tensor([b * k + beam for b in range(B) for beam, _ in new_rows[b]])
        toks = torch.tensor([tok for b in range(B) for _, tok in new_rows[b]])
        dec = torch.cat([dec[idx], toks[:, None]], dim=1)
        scores = torch.tensor(new_scores, dtype=torch.float64)
        if not any(active):
            break
    for b in range(B):
        if not active[b]:
            continue
        for j in range(k):
            s = float(scores[b, j])
            if s > float("-inf"):
                toks = dec[b * k + j, 1:].tolist()
                finished[b].append((_normalized(s, len(toks), alpha), toks))
    out = []
    for b in range(B):
        best = max(finished[b], key=lambda c: c[0])  # first max wins; greedy sits first
        out.append(best[1])
    return out


def sequence_logprob(params: Params, cfg: ModelConfig, enc: torch.Tensor, start: torch.Tensor,
                     outputs: Sequence[Sequence[int]]) -> list[float]:
    """Summed log-probability of each given output under teacher forcing."""
    with torch.no_grad():
        width = max(1, max(len(o) for o in outputs))
        dec = torch.full((len(outputs), width), PAD, dtype=torch.long)
        tgt = torch.full((len(outputs), width), PAD, dtype=torch.long)
        dec[:, 0] = start
        for i, o in enumerate(outputs):
            if o:
                tgt[i, :len(o)] = torch.tensor(o)
                dec[i, 1:len(o)] = torch.tensor(o[:-1])
        memory = encode(params, cfg, enc)
        lp = torch.log_softmax(decode(params, cfg, memory, enc != PAD, dec).double(), dim=-1)
        tok = lp.gather(-1, tgt[..., None]).squeeze(-1) * (tgt != PAD)
        return tok.sum(-1).tolist()


def generate(ckpt: Checkpoint | Params, pairs: Sequence[SentencePair], scheme, vocab: Vocabulary,
             mode: str = "greedy", beam: int = 4, max_len: int = 20, alpha: float = 1.0,
             batch_size: int = 256, cfg: ModelConfig | None = None) -> list[Hypothesis]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    scheme = TokenScheme.parse(scheme)
    params = ckpt.params if isinstance(ckpt, Checkpoint) else ckpt
    cfg = ckpt.config if isinstance(ckpt, Checkpoint) else cfg
    out = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        enc, start = _encoder_batch(chunk, scheme, vocab)
        if mode == "greedy":
            toks, _ = greedy_search(params, cfg, enc, start, max_len)
        elif mode == "beam":
            toks = beam_search(params, cfg, enc, start, max_len, beam, alpha)
        else:
            raise ValueError(f"unknown decoding mode {mode!r}")
        for p, t in zip(chunk, toks):
            out.append(Hypothesis(p.src_lang, p.tgt_lang, strip_output(t, vocab), p.tgt))
    return out


# -- BLEU -------------------------------------------------------------------

def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hyp: Sequence, ref: Sequence) -> np.ndarray:
    """Sufficient statistics: matches[1..4], totals[1..4], hyp length, ref length."""
    row = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for n in range(1, MAX_ORDER + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        row[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        row[MAX_ORDER + n - 1] = max(len(hyp) - n + 1, 0)
    row[-2] = len(hyp)
    row[-1] = len(ref)
    return row


def bleu_from_stats(stats: np.ndarray) -> np.ndarray:
    """BLEU-4 with exponential smoothing for each row of summed statistics.

    Accepts shape ``(10,)`` or ``(R, 10)``. An order with no matches gets
    precision ``1 / (2^k * total)`` where ``k`` counts the zero-match orders
    so far; an order with no candidate n-grams at all is smoothed the same
    way with ``total`` taken as 1. A row with no matching n-gram of any
    order scores 0.
    """
    s = np.atleast_2d(np.asarray(stats, dtype=np.float64))
    match = s[:, :MAX_ORDER]
    total = s[:, MAX_ORDER:2 * MAX_ORDER]
    hyp_len, ref_len = s[:, -2], s[:, -1]
    log_p = np.zeros(len(s))
    smooth = np.ones(len(s))
    for n in range(MAX_ORDER):
        zero = match[:, n] == 0
        smooth = np.where(zero, smooth * 2, smooth)
        safe_total = np.maximum(total[:, n], 1)
        p = np.where(zero, 1.0 / (smooth * safe_total), match[:, n] / safe_total)
        log_p += np.log(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.where(hyp_len >= ref_len, 1.0,
                      np.exp(1 - ref_len / np.where(hyp_len > 0, hyp_len, 1)))
    bp = np.where(hyp_len > 0, bp, 0.0)
    score = 100.0 * bp * np.exp(log_p / MAX_ORDER)
    score = np.where(match.sum(axis=1) > 0, score, 0.0)
    return score if np.ndim(stats) > 1 else score[0]


def corpus_bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> float:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("corpus_bleu needs at least one sentence")
    stats = sum(bleu_stats(h, r) for h, r in zip(hyps, refs))
    return float(bleu_from_stats(stats))


def sentence_bleu(hyp: Sequence, ref: Sequence) -> float:
    return float(bleu_from_stats(bleu_stats(hyp, ref)))


# -- off-target -------------------------------------------------------------

def majority_detector(universe: Universe) -> Callable[[Sequence[int]], str | None]:
    """Language with the most tokens in the sequence; ``None`` if empty or tied."""
    def detect(seq: Sequence[int]) -> str | None:
        votes = Counter(universe.language_of(t) for t in seq)
        votes.pop(None, None)
        if not votes:
            return None
        ranked = votes.most_common(2)
        if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
            return None
        return ranked[0][0]
    return detect


def off_target_rate(hyps: Sequence[Hypothesis], detector: Callable[[Sequence[int]], str | None]) -> float:
    if not hyps:
        return 0.0
    miss = sum(1 for h in hyps if detector(h.output) != h.tgt_lang)
    return miss / len(hyps)


# -- significance -----------------------------------------------------------

@dataclass(frozen=True)
class SignificanceResult:
    direction: tuple[str, str] | None
    win: str  # "A", "B" or "tie"
    p_value: float
    resamples: int
    bleu_a: float = 0.0
    bleu_b: float = 0.0
    ttest_p: float | None = None


def _stats_matrix(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> np.ndarray:
    return np.stack([bleu_stats(h, r) for h, r in zip(hyps, refs)])


def paired_bootstrap(hyps_a: Sequence[Sequence], hyps_b: Sequence[Sequence], refs: Sequence[Sequence],
                     resamples: int = 1000, seed: int = 0, alpha: float = 0.05,
                     direction: tuple[str, str] | None = None, ttest: bool = True) -> SignificanceResult:
    """Paired bootstrap resampling over sentences.

    ``p`` is twice the smaller of the fractions of resamples in which one
    system fails to beat the other, capped at 1. A paired t-test over
    sentence-level BLEU is reported alongside as a cross-check.
    """
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise ValueError(f"misaligned inputs: {len(hyps_a)}/{len(hyps_b)}/{len(refs)}")
    if not refs:
        raise ValueError("empty test set")
    if resamples < 100:
        raise ValueError("use at least 100 resamples")
    sa, sb = _stats_matrix(hyps_a, refs), _stats_matrix(hyps_b, refs)
    n = len(refs)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    counts = np.zeros((resamples, n), dtype=np.int64)
    np.add.at(counts, (np.arange(resamples)[:, None], idx), 1)
    ba = bleu_from_stats(counts @ sa)
    bb = bleu_from_stats(counts @ sb)
    a_not_better = float(np.mean(ba <= bb))
    b_not_better = float(np.mean(bb <= ba))
    p = min(1.0, 2.0 * min(a_not_better, b_not_better))
    full_a = float(bleu_from_stats(sa.sum(0)))
    full_b = float(bleu_from_stats(sb.sum(0)))
    win = "tie"
    if p < alpha:
        win = "A" if a_not_better < b_not_better else "B"
    t_p = None
    if ttest:
        t_p = paired_ttest(hyps_a, hyps_b, refs)
    return SignificanceResult(direction, win, p, resamples, full_a, full_b, t_p)


def paired_ttest(hyps_a, hyps_b, refs) -> float:
    from scipy import stats

    a = np.array([sentence_bleu(h, r) for h, r in zip(hyps_a, refs)])
    b = np.array([sentence_bleu(h, r) for h, r in zip(hyps_b, refs)])
    if np.allclose(a, b):
        return 1.0
    return float(stats.ttest_rel(a, b).pvalue)


# -- reports ----------------------------------------------------------------

GROUPS = ("X=>E", "E=>X", "X<=>Y", "E<=>X", "all")


def group_directions(universe: Universe) -> dict[str, list[tuple[str, str]]]:
    piv = universe.pivot
    xe = [(x, piv) for x in universe.non_pivot]
    ex = [(piv, x) for x in universe.non_pivot]
    xy = universe.direct()
    return {"X=>E": xe, "E=>X": ex, "X<=>Y": xy, "E<=>X": xe + ex, "all": xe + ex + xy}


@dataclass
class EvalReport:
    bleu: dict[str, float]
    off_target: dict[str, float]
    counts: dict[str, int]
    group_bleu: dict[str, float]
    group_off_target: dict[str, float]
    step: int | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "bleu": self.bleu,
            "off_target": self.off_target,
            "counts": self.counts,
            "group_bleu": self.group_bleu,
            "group_off_target": self.group_off_target,
        }


def dir_label(d: tuple[str, str]) -> str:
    return f"{d[0]}-{d[1]}"


def evaluate_hypotheses(hyps: Sequence[Hypothesis], universe: Universe,
                        detector=None, step: int | None = None) -> EvalReport:
    detector = detector or majority_detector(universe)
    by_dir: dict[tuple[str, str], list[Hypothesis]] = {}
    for h in hyps:
        by_dir.setdefault(h.direction, []).append(h)
    bleu, off, counts = {}, {}, {}
    for d, hs in sorted(by_dir.items()):
        lab = dir_label(d)
        bleu[lab] = corpus_bleu([h.output for h in hs], [h.reference for h in hs])
        off[lab] = off_target_rate(hs, detector)
        counts[lab] = len(hs)
    gb, go = {}, {}
    for g, dirs in group_directions(universe).items():
        present = [dir_label(d) for d in dirs if dir_label(d) in bleu]
        if present:
            gb[g] = float(np.mean([bleu[x] for x in present]))
            go[g] = float(np.mean([off[x] for x in present]))
    return EvalReport(bleu, off, counts, gb, go, step)


@dataclass
class ComparisonReport:
    reports: dict[str, EvalReport]
    baseline: str
    wins: dict[str, dict[str, int]] = field(default_factory=dict)
    losses: dict[str, dict[str, int]] = field(default_factory=dict)
    significance: dict[str, list[SignificanceResult]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "systems": {k: v.to_dict() for k, v in self.reports.items()},
            "wins": self.wins,
            "losses": self.losses,
            "significance": {
                k: [{"direction": dir_label(r.direction) if r.direction else None, "win": r.win,
                     "p_value": r.p_value, "ttest_p": r.ttest_p, "bleu_a": r.bleu_a,
                     "bleu_b": r.bleu_b, "resamples": r.resamples} for r in v]
                for k, v in self.significance.items()
            },
        }


def build_report(systems: Mapping[str, Sequence[Hypothesis]], universe: Universe, baseline: str,
                 resamples: int = 1000, seed: int = 0, detector=None) -> ComparisonReport:
    """Per-system reports plus significance win counts of every system against ``baseline``."""
    if baseline not in systems:
        raise ValueError(f"baseline {baseline!r} not among systems")
    for name, hyps in systems.items():
        if len(hyps) != len(systems[baseline]) or any(
                (a.direction, a.reference) != (b.direction, b.reference)
                for a, b in zip(hyps, systems[baseline])):
            raise ValueError(f"system {name!r} covers different inputs than {baseline!r}")
    reports = {name: evaluate_hypotheses(h, universe, detector) for name, h in systems.items()}
    out = ComparisonReport(reports, baseline)
    groups = group_directions(universe)
    base = systems[baseline]
    for name, hyps in systems.items():
        if name == baseline:
            continue
        results = []
        for d in sorted({h.direction for h in base}):
            ia = [i for i, h in enumerate(hyps) if h.direction == d]
            r = paired_bootstrap([hyps[i].output for i in ia], [base[i].output for i in ia],
                                 [base[i].reference for i in ia], resamples, seed, direction=d)
            results.append(r)
        out.significance[name] = results
        wins, losses = {}, {}
        for g, dirs in list(groups.items()) + [("total", None)]:
            members = results if dirs is None else [r for r in results if r.direction in set(dirs)]
            if g in ("E<=>X", "all"):
                continue
            wins[g] = sum(r.win == "A" for r in members)
            losses[g] = sum(r.win == "B" for r in members)
        out.wins[name] = wins
        out.losses[name] = losses
    return out


def format_table(reports: Mapping[str, EvalReport], columns: Iterable[str] = ("X<=>Y", "E<=>X", "X=>E", "E=>X"),
                 best_at: Mapping[str, int] | None = None) -> str:
    cols = list(columns)
    header = ["system", *cols, "off-tgt X<=>Y"] + (["best at"] if best_at else [])
    rows = [header]
    for name, r in reports.items():
        row = [name] + [f"{r.group_bleu.get(c, float('nan')):.2f}" for c in cols]
        row.append(f"{100 * r.group_off_target.get('X<=>Y', float('nan')):.2f}%")
        if best_at:
            row.append(str(best_at.get(name, "-")))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def format_wins(comp: ComparisonReport) -> str:
    groups = ["X=>E", "E=>X", "X<=>Y", "total"]
    lines = [f"wins vs {comp.baseline}: " + "  ".join(f"{g:>6}" for g in groups)]
    for name, w in comp.wins.items():
        lines.append(f"{name}: " + "  ".join(f"{w[g]:>6}" for g in groups))
    return "\n".join(lines)
