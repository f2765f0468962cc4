import math
import random

import numpy as np
import pytest
import torch

from xylab.evaluate import (Hypothesis, beam_search, bleu_from_stats, bleu_stats, build_report, corpus_bleu,
                            format_table, format_wins, generate, greedy_search, group_directions,
                            majority_detector, off_target_rate, paired_bootstrap, sentence_bleu,
                            sequence_logprob, evaluate_hypotheses)
from xylab.langspec import build_universe, make_corpus, oracle_translate, render
from xylab.model import ModelConfig, init_params
from xylab.tagging import EOS, TokenScheme, Vocabulary


def geo(*ps):
    return math.exp(sum(math.log(p) for p in ps) / 4)


# (hyps, refs, expected) with expected written out from the BLEU-4 definition:
# clipped precisions, exp smoothing 1/(2^k * total) for zero-match orders,
# brevity penalty exp(1 - r/c) when c < r.
FIXTURES = [
    ([[1, 2, 3, 4]], [[1, 2, 3, 4]], 100.0),
    ([[1, 2, 3, 4]], [[1, 2, 3, 4, 5]], 100 * math.exp(-0.25)),
    ([[1, 2, 3, 4, 5]], [[1, 2, 3, 4, 6]], 100 * geo(4 / 5, 3 / 4, 2 / 3, 1 / 2)),
    ([[1, 2, 3, 4]], [[5, 6, 7, 8]], 0.0),
    ([[1, 1, 1, 1]], [[1, 2, 3, 4]], 100 * geo(1 / 4, 1 / 6, 1 / 8, 1 / 8)),
    ([[1, 2, 3, 4, 5, 6]], [[1, 2, 3, 4]], 100 * geo(4 / 6, 3 / 5, 2 / 4, 1 / 3)),
    ([[5, 1, 6, 7]], [[1, 2, 3, 4]], 100 * geo(1 / 4, 1 / 6, 1 / 8, 1 / 8)),
    ([[]], [[1, 2, 3]], 0.0),
    ([[7]], [[7]], 100 * geo(1, 1 / 2, 1 / 4, 1 / 8)),
    ([[1, 2]], [[1, 2, 3, 4]], 100 * math.exp(1 - 2) * geo(1, 1, 1 / 2, 1 / 4)),
    # corpus level: statistics are summed before the precisions are formed
    ([[1, 2, 3, 4], [5, 6, 7, 8]], [[1, 2, 3, 4], [5, 6, 9, 8]], 100 * geo(7 / 8, 4 / 6, 2 / 4, 1 / 2)),
    ([[1, 2, 3], [4, 5, 6, 7, 8]], [[1, 2, 3, 9], [4, 5, 6, 7, 8]],
     100 * math.exp(1 - 9 / 8) * geo(8 / 8, 6 / 6, 4 / 4, 2 / 2)),
    ([[3, 1, 2, 4, 9]], [[1, 2, 3, 4, 9]], 100 * geo(5 / 5, 2 / 4, 1 / 6, 1 / 8)),
]


@pytest.mark.parametrize("hyps,refs,expected", FIXTURES)
def test_bleu_fixtures(hyps, refs, expected):
    assert corpus_bleu(hyps, refs) == pytest.approx(expected, abs=5e-5)


def test_bleu_7788_case():
    assert round(corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5]]), 2) == 77.88


@pytest.mark.parametrize("hyps,refs,expected", [f for f in FIXTURES if min(map(len, f[0])) >= 4])
def test_bleu_agrees_with_sacrebleu(hyps, refs, expected):
    sacrebleu = pytest.importorskip("sacrebleu")
    metric = sacrebleu.metrics.BLEU(tokenize="none", smooth_method="exp")
    score = metric.corpus_score([" ".join(f"w{t}" for t in h) for h in hyps],
                                [[" ".join(f"w{t}" for t in r) for r in refs]]).score
    assert corpus_bleu(hyps, refs) == pytest.approx(score, abs=5e-5)


def test_bleu_random_corpora_agree_with_sacrebleu():
    sacrebleu = pytest.importorskip("sacrebleu")
    metric = sacrebleu.metrics.BLEU(tokenize="none", smooth_method="exp")
    rng = random.Random(0)
    for _ in range(20):
        refs = [[rng.randrange(12) for _ in range(rng.randint(4, 12))] for _ in range(15)]
        hyps = [[t if rng.random() < 0.7 else rng.randrange(12) for t in r][:len(r) - rng.randint(0, 2)] for r in refs]
        hyps = [h if len(h) >= 4 else r for h, r in zip(hyps, refs)]
        score = metric.corpus_score([" ".join(map(str, h)) for h in hyps],
                                    [[" ".join(map(str, r)) for r in refs]]).score
        assert corpus_bleu(hyps, refs) == pytest.approx(score, abs=1e-6)


def test_bleu_properties():
    rng = random.Random(1)
    refs = [[rng.randrange(9) for _ in range(rng.randint(4, 10))] for _ in range(20)]
    hyps = [[t if rng.random() < 0.6 else rng.randrange(9) for t in r] for r in refs]
    base = corpus_bleu(hyps, refs)
    order = list(range(20))
    rng.shuffle(order)
    assert corpus_bleu([hyps[i] for i in order], [refs[i] for i in order]) == pytest.approx(base, abs=1e-12)
    # equal lengths keep BP = 1 on both sides, so injecting a perfect pair cannot lower the score
    assert corpus_bleu(hyps + [refs[0]], refs + [refs[0]]) >= base
    assert 0.0 <= base <= 100.0


def test_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([[1]], [[1], [2]])
    with pytest.raises(ValueError):
        corpus_bleu([], [])


def test_vectorized_stats_match_scalar():
    rng = np.random.default_rng(0)
    rows = np.stack([bleu_stats(rng.integers(0, 5, 6).tolist(), rng.integers(0, 5, 7).tolist()) for _ in range(8)])
    vec = bleu_from_stats(rows)
    for i in range(8):
        assert vec[i] == pytest.approx(bleu_from_stats(rows[i]))


# -- off-target -------------------------------------------------------------

U5 = build_universe(5, 64, seed=0)
C5 = make_corpus(U5, U5.all_directions(), 1, seed=0, dev_per_direction=20, test_per_direction=20)


def test_off_target_oracle_is_zero():
    det = majority_detector(U5)
    hyps = [Hypothesis(p.src_lang, p.tgt_lang, oracle_translate(p.src, U5[p.src_lang], U5[p.tgt_lang]), p.tgt)
            for p in C5.test]
    assert off_target_rate(hyps, det) == 0.0


def test_off_target_wrong_language_is_one():
    det = majority_detector(U5)
    hyps = []
    for p in C5.test:
        wrong = next(c for c in U5.codes if c != p.tgt_lang)
        hyps.append(Hypothesis(p.src_lang, p.tgt_lang,
                               oracle_translate(p.src, U5[p.src_lang], U5[wrong]), p.tgt))
    assert off_target_rate(hyps, det) == 1.0


def test_detector_edge_cases():
    det = majority_detector(U5)
    en, x1 = U5["en"], U5["x1"]
    assert det(()) is None
    assert det(render((0, 1), en) + render((2,), x1)) == "en"
    assert det(render((0,), en) + render((2,), x1)) is None  # tie counts as off-target
    h = Hypothesis("x1", "en", (), (1,))
    assert off_target_rate([h], det) == 1.0


# -- significance -----------------------------------------------------------

def _noisy(refs, rate, rng):
    return [[t if rng.random() > rate else rng.randrange(50) for t in r] for r in refs]


def test_bootstrap_identical_systems_tie():
    rng = random.Random(0)
    refs = [[rng.randrange(50) for _ in range(8)] for _ in range(60)]
    hyps = _noisy(refs, 0.3, rng)
    r = paired_bootstrap(hyps, hyps, refs, resamples=200, seed=1)
    assert r.win == "tie" and r.p_value == 1.0 and r.ttest_p == 1.0


def test_bootstrap_extreme_win():
    rng = random.Random(0)
    refs = [[rng.randrange(50) for _ in range(8)] for _ in range(60)]
    r = paired_bootstrap(refs, _noisy(refs, 0.8, rng), refs, resamples=200, seed=1)
    assert r.win == "A" and r.p_value == 0.0 and r.ttest_p < 1e-6
    r = paired_bootstrap(_noisy(refs, 0.8, rng), refs, refs, resamples=200, seed=1)
    assert r.win == "B"


def test_bootstrap_deterministic_and_validated():
    rng = random.Random(3)
    refs = [[rng.randrange(50) for _ in range(8)] for _ in range(30)]
    a, b = _noisy(refs, 0.3, rng), _noisy(refs, 0.3, rng)
    assert paired_bootstrap(a, b, refs, 300, seed=4) == paired_bootstrap(a, b, refs, 300, seed=4)
    with pytest.raises(ValueError):
        paired_bootstrap(a, b[:-1], refs)
    with pytest.raises(ValueError):
        paired_bootstrap(a, b, refs, resamples=10)


def equal_system_false_positive_rate(trials=200, n=100, resamples=1000):
    """Fraction of trials where two equal-quality systems are declared different."""
    rng = random.Random(12345)
    wins = 0
    for t in range(trials):
        refs = [[rng.randrange(50) for _ in range(rng.randint(5, 12))] for _ in range(n)]
        a, b = _noisy(refs, 0.35, rng), _noisy(refs, 0.35, rng)
        r = paired_bootstrap(a, b, refs, resamples=resamples, seed=t, ttest=False)
        wins += r.win != "tie"
    return wins / trials


@pytest.mark.slow
def test_bootstrap_calibration():
    assert equal_system_false_positive_rate() <= 0.07


# -- decoding ---------------------------------------------------------------

CFG = ModelConfig(vocab_size=30, d_model=16, d_ff=32, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                  max_positions=32, dropout=0.0)


def _enc(seed, B=6):
    g = torch.Generator().manual_seed(seed)
    enc = torch.randint(4, 30, (B, 7), generator=g)
    enc[:, -1] = EOS
    return enc, torch.full((B,), 5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_beam_one_is_greedy(seed):
    p = init_params(CFG, seed)
    enc, start = _enc(seed)
    g, _ = greedy_search(p, CFG, enc, start, 10)
    assert beam_search(p, CFG, enc, start, 10, width=1) == g


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_beam_score_dominates_greedy(seed):
    p = init_params(CFG, seed)
    enc, start = _enc(seed)
    g, _ = greedy_search(p, CFG, enc, start, 10)
    b = beam_search(p, CFG, enc, start, 10, width=4, alpha=1.0)
    lg = sequence_logprob(p, CFG, enc, start, g)
    lb = sequence_logprob(p, CFG, enc, start, b)
    for i in range(len(g)):
        assert lb[i] / max(len(b[i]), 1) >= lg[i] / max(len(g[i]), 1) - 1e-9
        assert len(b[i]) <= 10


def test_greedy_logprob_matches_teacher_forcing():
    p = init_params(CFG, 5)
    enc, start = _enc(5)
    g, lp = greedy_search(p, CFG, enc, start, 8)
    assert np.allclose(lp, sequence_logprob(p, CFG, enc, start, g), atol=1e-5)


def test_generate_modes_and_errors():
    u = build_universe(3, 8, seed=0)
    vocab = Vocabulary.from_universe(u)
    cfg = ModelConfig(len(vocab), d_model=16, d_ff=32, n_heads=2, n_enc_layers=1, n_dec_layers=1, dropout=0.0)
    p = init_params(cfg, 0)
    pairs = make_corpus(u, u.all_directions(), 1, 0, dev_per_direction=2, test_per_direction=2).test
    for mode in ("greedy", "beam"):
        hyps = generate(p, pairs, TokenScheme.STT, vocab, mode=mode, max_len=6, cfg=cfg)
        assert len(hyps) == len(pairs)
        assert all(len(h.output) <= 6 for h in hyps)
    with pytest.raises(ValueError):
        generate(p, pairs, "T-E", vocab, mode="sample", cfg=cfg)
    with pytest.raises(ValueError):
        generate(p, pairs, "T-E", vocab, max_len=0, cfg=cfg)


# -- reports ----------------------------------------------------------------

def test_group_counts_five_languages():
    g = group_directions(U5)
    assert len(g["X<=>Y"]) == 12
    assert len(g["E<=>X"]) == 8
    assert len(g["all"]) == 20


def _oracle_system(pairs, u):
    return [Hypothesis(p.src_lang, p.tgt_lang, p.tgt, p.tgt) for p in pairs]


def test_report_oracle_and_wins():
    oracle = _oracle_system(C5.test, U5)
    rng = random.Random(0)
    noisy = [Hypothesis(h.src_lang, h.tgt_lang,
                        tuple(t if rng.random() > 0.7 else U5[h.tgt_lang].surface_offset for t in h.output),
                        h.reference) for h in oracle]
    comp = build_report({"oracle": oracle, "noisy": noisy}, U5, baseline="noisy", resamples=200)
    rep = comp.reports["oracle"]
    assert all(v == 100.0 for v in rep.bleu.values())
    assert all(v == 0.0 for v in rep.off_target.values())
    assert rep.counts == {k: 20 for k in rep.counts} and len(rep.counts) == 20
    assert comp.wins["oracle"] == {"X=>E": 4, "E=>X": 4, "X<=>Y": 12, "total": 20}
    assert comp.losses["oracle"]["total"] == 0
    text = format_table(comp.reports)
    assert "oracle" in text and "100.00" in text
    assert "20" in format_wins(comp)
    d = comp.to_dict()
    assert d["systems"]["oracle"]["group_bleu"]["X<=>Y"] == 100.0


def test_report_rejects_misaligned_systems():
    oracle = _oracle_system(C5.test, U5)
    with pytest.raises(ValueError):
        build_report({"a": oracle, "b": oracle[:-1]}, U5, baseline="a")
    with pytest.raises(ValueError):
        build_report({"a": oracle}, U5, baseline="zz")


def test_evaluate_hypotheses_group_means():
    hyps = _oracle_system([p for p in C5.test if p.direction in (("en", "x1"), ("x1", "x2"))], U5)
    rep = evaluate_hypotheses(hyps, U5)
    assert set(rep.group_bleu) == {"E=>X", "X<=>Y", "E<=>X", "all"}
