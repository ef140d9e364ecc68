"""Tokenizer, vocabulary construction, sequence encoding."""

from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from madlab.asmtok import (
    ADDR,
    NUM,
    PAD,
    RESERVED_TOKENS,
    UNK,
    Vocabulary,
    build_vocab,
    encode,
    tokenize,
)


class TestTokenize:
    def test_numeric_literal(self):
        assert tokenize("mov eax, 0x10") == ["mov", "eax", "<num>"]

    def test_line_leading_address(self):
        assert tokenize("401000: push ebp") == ["<addr>", "push", "ebp"]

    def test_empty(self):
        assert tokenize("") == []

    def test_lowercasing_and_brackets(self):
        assert tokenize("MOV EAX, [EBX]") == ["mov", "eax", "ebx"]

    def test_decimal_literal(self):
        assert tokenize("add esp, 16") == ["add", "esp", "<num>"]

    def test_all_letter_mnemonic_not_eaten_at_line_start(self):
        # "add"/"dec" are valid hex strings but carry no digit
        assert tokenize("add eax, ebx\ndec ecx") == ["add", "eax", "ebx", "dec", "ecx"]

    def test_address_only_at_line_start(self):
        # the same bare hex token mid-line is a numeric literal
        assert tokenize("401000: jmp 401000") == ["<addr>", "jmp", "<num>"]

    def test_multiline(self):
        text = "401000: push ebp\n401001: mov ebp, esp\n"
        assert tokenize(text) == ["<addr>", "push", "ebp", "<addr>", "mov", "ebp", "esp"]


class TestBuildVocab:
    def test_frequency_then_lexicographic(self):
        corpus = [["a"] * 3 + ["b"] * 3 + ["c"]]
        v = build_vocab(corpus, max_size=6)
        # 2 open slots beyond the 4 reserved ids: a and b win the count tie
        # lexicographically, c is dropped
        assert v.id_of("a") == 4 and v.id_of("b") == 5
        assert v.id_of("c") == UNK
        assert len(v) == 6

    def test_third_slot_admits_c(self):
        v = build_vocab([["a"] * 3 + ["b"] * 3 + ["c"]], max_size=7)
        assert v.id_of("c") == 6

    def test_empty_corpus(self):
        v = build_vocab([], max_size=64)
        assert v.id_to_token == RESERVED_TOKENS

    def test_deterministic(self):
        corpus = [["push", "mov", "mov"], ["pop", "push"]]
        assert build_vocab(corpus, 32).id_to_token == build_vocab(corpus, 32).id_to_token

    def test_max_size_too_small(self):
        with pytest.raises(ValueError):
            build_vocab([], max_size=4)

    def test_reserved_tokens_in_input_not_duplicated(self):
        v = build_vocab([["<num>", "<num>", "mov"]], max_size=16)
        assert v.id_of("<num>") == NUM
        assert v.id_to_token.count("<num>") == 1

    @given(st.lists(st.lists(st.sampled_from("abcdefgh"), max_size=30), max_size=8),
           st.integers(min_value=5, max_value=12))
    def test_matches_brute_force_ranking(self, corpus, max_size):
        counts = Counter()
        for toks in corpus:
            counts.update(toks)
        expected = [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
        expected = expected[: max_size - 4]
        v = build_vocab(corpus, max_size=max_size)
        assert v.id_to_token[4:] == expected
        assert len(v) <= max_size


class TestEncode:
    def setup_method(self):
        self.vocab = build_vocab([["mov", "mov", "push"]], max_size=8)

    def test_oov_and_padding(self):
        seq = encode(["mov", "zzz"], self.vocab, max_seq_len=4)
        assert seq.ids == [self.vocab.id_of("mov"), UNK, PAD, PAD]
        assert seq.true_len == 2

    def test_truncation(self):
        seq = encode(["mov"] * 10, self.vocab, max_seq_len=4)
        assert len(seq.ids) == 4 and seq.true_len == 4

    def test_empty(self):
        seq = encode([], self.vocab, max_seq_len=4)
        assert seq.ids == [PAD] * 4 and seq.true_len == 0

    def test_bad_max_seq_len(self):
        with pytest.raises(ValueError):
            encode([], self.vocab, max_seq_len=0)

    @given(st.text(alphabet=st.characters(codec="ascii"), max_size=200))
    def test_encode_tokenize_properties(self, text):
        v = build_vocab([tokenize(text)], max_size=64)
        seq = encode(tokenize(text), v, max_seq_len=16)
        assert len(seq.ids) == 16
        assert all(0 <= i < len(v) for i in seq.ids)
        # PAD only after all non-PAD ids
        tail = seq.ids[seq.true_len:]
        assert all(i == PAD for i in tail)
        assert encode(tokenize(text), v, 16) == seq  # deterministic


class TestVocabularySerialization:
    def test_round_trip(self, tmp_path):
        v = build_vocab([["mov", "push", "pop"]], max_size=32)
        v.save(tmp_path / "vocab.json")
        v2 = Vocabulary.load(tmp_path / "vocab.json")
        assert v2.id_to_token == v.id_to_token
        assert v2.max_size == v.max_size
        assert v2.fingerprint() == v.fingerprint()

    def test_reserved_ids_fixed(self):
        v = build_vocab([], max_size=8)
        assert v.id_of("<pad>") == PAD == 0
        assert v.id_of("<unk>") == UNK == 1
        assert v.id_of("<num>") == NUM == 2
        assert v.id_of("<addr>") == ADDR == 3
