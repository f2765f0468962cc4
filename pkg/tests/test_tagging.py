import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xylab.langspec import SentencePair, build_universe, render
from xylab.tagging import (BOS, EOS, PAD, TokenScheme, Vocabulary, apply_scheme, decode_start_token,
                           strip_output)

U = build_universe(5, 16, seed=0)
VOCAB = Vocabulary.from_universe(U)


def _pair(src="x1", tgt="x2", tokens=(0, 3, 5)):
    return SentencePair(src, tgt, render(tokens, U[src]), render(tokens, U[tgt]))


def test_vocab_dense_and_complete():
    table = VOCAB.token_table()
    assert sorted(table.values()) == list(range(len(VOCAB)))
    for c in U.codes:
        assert f"<src:{c}>" in table and f"<tgt:{c}>" in table
    assert len(VOCAB) == 4 + 2 * 5 + 5 * 16


def test_vocab_json_roundtrip():
    assert Vocabulary.from_json(VOCAB.to_json()) == VOCAB


def test_scheme_names():
    assert [s.value for s in TokenScheme] == ["T-E", "ST-T", "S-T", "T-T"]
    assert TokenScheme.parse("ST-T") is TokenScheme.STT
    with pytest.raises(ValueError):
        TokenScheme.parse("TS-T")


def test_te_layout():
    p = _pair()
    ex = apply_scheme(p, TokenScheme.TE, VOCAB)
    src_ids = VOCAB.encode_surface(p.src)
    tgt_ids = VOCAB.encode_surface(p.tgt)
    assert list(ex.encoder_ids) == [VOCAB.tgt_token("x2"), *src_ids, EOS]
    assert list(ex.decoder_input_ids) == [BOS, *tgt_ids]
    assert list(ex.target_ids) == [*tgt_ids, EOS]


def test_stt_layout():
    p = _pair()
    ex = apply_scheme(p, "ST-T", VOCAB)
    assert list(ex.encoder_ids) == [VOCAB.src_token("x1"), VOCAB.tgt_token("x2"),
                                    *VOCAB.encode_surface(p.src), EOS]
    assert list(ex.decoder_input_ids) == [VOCAB.tgt_token("x2"), *VOCAB.encode_surface(p.tgt)]


def test_stt_strip_roundtrip():
    p = _pair()
    ex = apply_scheme(p, TokenScheme.STT, VOCAB)
    assert VOCAB.decode_surface(ex.encoder_ids[2:-1]) == p.src
    assert VOCAB.decode_surface(ex.decoder_input_ids[1:]) == p.tgt


@pytest.mark.parametrize("scheme,expected", [
    (TokenScheme.TE, BOS), (TokenScheme.STT, "tgt"), (TokenScheme.TT, "tgt"), (TokenScheme.ST, "tgt")])
def test_decode_start_token(scheme, expected):
    want = VOCAB.tgt_token("x3") if expected == "tgt" else expected
    assert decode_start_token(scheme, "x3", VOCAB) == want


def test_unknown_language():
    with pytest.raises(KeyError):
        decode_start_token(TokenScheme.TE, "zz", VOCAB)
    with pytest.raises(KeyError):
        apply_scheme(SentencePair("zz", "en", (1,), (2,)), TokenScheme.STT, VOCAB)


def test_strip_output():
    t = VOCAB.tgt_token("x2")
    a, b, c = VOCAB.encode_surface((40, 41, 7))
    assert strip_output([t, a, b, EOS, c], VOCAB) == (40, 41)
    assert strip_output([EOS], VOCAB) == ()
    assert strip_output([a, b, c], VOCAB) == (40, 41, 7)
    assert strip_output([PAD, BOS, a, 9999, -3], VOCAB) == (40,)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(U.all_directions()), st.lists(st.integers(0, 15), min_size=1, max_size=12))
def test_scheme_structure(direction, tokens):
    p = _pair(direction[0], direction[1], tuple(tokens))
    ex = {s: apply_scheme(p, s, VOCAB) for s in TokenScheme}
    stt, st_ = list(ex[TokenScheme.STT].encoder_ids), list(ex[TokenScheme.ST].encoder_ids)
    assert stt == st_[:1] + [VOCAB.tgt_token(p.tgt_lang)] + st_[1:]
    assert ex[TokenScheme.TE].encoder_ids == ex[TokenScheme.TT].encoder_ids
    for e in ex.values():
        assert len(e.decoder_input_ids) == len(e.target_ids)
        assert all(VOCAB.is_surface(i) for i in e.target_ids[:-1]) and e.target_ids[-1] == EOS
        assert VOCAB.decode_surface(e.target_ids[:-1]) == p.tgt
        assert VOCAB.decode_surface(e.encoder_ids[-1 - len(p.src):-1]) == p.src
