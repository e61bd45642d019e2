"""Tokenizer: round trips, reserved-id hygiene, persistence."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speccont.text import Vocabulary, build_vocab, load_vocab, save_vocab


class TestBuild:
    def test_two_symbol_corpus_gives_v5(self):
        v = build_vocab(["ab", "ba"])
        assert v.size == 5
        assert v.symbols[3:] == ("a", "b")

    def test_single_symbol_corpus_gives_v4(self):
        assert build_vocab(["a", "aa"]).size == 4

    def test_deterministic_across_orderings(self):
        assert build_vocab(["ab", "cd"]) == build_vocab(["cd", "ab"])

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_vocab([])

    def test_reserved_ids_distinct_and_dense(self):
        v = build_vocab(["xyz"])
        assert {v.pad_id, v.sos_id, v.eos_id} == {0, 1, 2}
        assert [v.encode(s)[0] for s in "xyz"] == [3, 4, 5]


class TestCodec:
    def test_round_trip(self):
        v = build_vocab(["hello world"])
        assert v.decode(v.encode("hello")) == "hello"

    def test_empty_string(self):
        assert build_vocab(["ab"]).encode("") == []

    def test_oov_named_in_error(self):
        v = build_vocab(["ab"])
        with pytest.raises(ValueError, match="'z'"):
            v.encode("az")

    def test_encode_never_emits_reserved(self):
        v = build_vocab(["abc"])
        assert all(i >= 3 for i in v.encode("abcabc"))

    def test_decode_strips_reserved(self):
        v = build_vocab(["ab"])
        assert v.decode([v.sos_id, 3, 4, v.eos_id, v.pad_id]) == "ab"

    def test_decode_rejects_out_of_range(self):
        v = build_vocab(["ab"])
        with pytest.raises(ValueError, match="outside"):
            v.decode([99])


class TestPersistence:
    def test_file_round_trip(self, tmp_path):
        v = build_vocab(["the quick brown fox"])
        p = tmp_path / "vocab.txt"
        save_vocab(p, v)
        assert load_vocab(p) == v

    def test_file_layout_reserved_first(self, tmp_path):
        p = tmp_path / "vocab.txt"
        save_vocab(p, build_vocab(["ba"]))
        assert p.read_text().splitlines() == ["<pad>", "<sos>", "<eos>", "a", "b"]

    def test_malformed_file_rejected(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("a\nb\nc\nd\n")
        with pytest.raises(ValueError, match="first three"):
            load_vocab(p)


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126), min_size=1))
def test_round_trip_property(s):
    v = build_vocab([s])
    assert v.decode(v.encode(s)) == s
