"""Disassembly tokenizer and vocabulary.

Consumes disassembler text output (the disassembler itself is external) and
produces bounded integer sequences.  Numeric literals collapse to ``<num>``
and line-leading hex offsets to ``<addr>`` so that unbounded constants do
not explode the vocabulary.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD, UNK, NUM, ADDR = 0, 1, 2, 3
RESERVED_TOKENS = ["<pad>", "<unk>", "<num>", "<addr>"]

_SPLIT = re.compile(r"[\s,\[\]:]+")
_NUM = re.compile(r"^(0x[0-9a-f]+|[0-9]+)$")
# a line-leading offset: bare hex digits, at least one decimal digit so that
# all-letter mnemonics like "add" or "dec" are not swallowed
_ADDR = re.compile(r"^[0-9a-f]+$")
_HAS_DIGIT = re.compile(r"[0-9]")


def tokenize(asm_text: str) -> list[str]:
    """Split disassembly text into normalized tokens.

    Lines are split on whitespace, commas, brackets and colons; tokens are
    lowercased.  The first token of a line that looks like a bare hex offset
    becomes ``<addr>``; any other hex/decimal literal becomes ``<num>``.
    """
    out: list[str] = []
    for line in asm_text.splitlines():
        first = True
        for tok in _SPLIT.split(line.lower()):
            if not tok:
                continue
            if first and _ADDR.match(tok) and _HAS_DIGIT.search(tok):
                out.append("<addr>")
            elif _NUM.match(tok):
                out.append("<num>")
            else:
                out.append(tok)
            first = False
    return out


@dataclass
class Vocabulary:
    """Token/id bijection with fixed reserved ids PAD=0 UNK=1 NUM=2 ADDR=3."""

    id_to_token: list[str]
    max_size: int
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        assert self.id_to_token[:4] == RESERVED_TOKENS
        assert len(self.id_to_token) <= self.max_size
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(self.id_to_token, ensure_ascii=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        payload = {"max_size": self.max_size, "tokens": self.id_to_token}
        Path(path).write_text(json.dumps(payload, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(id_to_token=payload["tokens"], max_size=payload["max_size"])


@dataclass
class TokenSequence:
    """Fixed-length id sequence; ``true_len`` counts the pre-pad ids."""

    ids: list[int]
    true_len: int


def build_vocab(corpora, max_size: int = 4096) -> Vocabulary:
    """Build a vocabulary from a stream of token lists.

    The ``max_size - 4`` most frequent tokens (ties broken lexicographically
    ascending) receive ids 4 onward.  Counting is a single pass, so the
    result is deterministic for any iteration order that yields the same
    multiset of tokens.
    """
    if max_size <= 4:
        raise ValueError("max_size must leave room beyond the 4 reserved tokens")
    counts: Counter[str] = Counter()
    for tokens in corpora:
        counts.update(tokens)
    # reserved sentinels may appear in input (e.g. "<num>"); they already
    # have ids and must not be assigned a second one
    for t in RESERVED_TOKENS:
        counts.pop(t, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: max_size - 4]]
    return Vocabulary(id_to_token=RESERVED_TOKENS + kept, max_size=max_size)


def encode(tokens: list[str], v: Vocabulary, max_seq_len: int = 512) -> TokenSequence:
    """Map tokens to ids, truncate to ``max_seq_len`` and right-pad with PAD."""
    if max_seq_len < 1:
        raise ValueError("max_seq_len must be >= 1")
    ids = [v.id_of(t) for t in tokens[:max_seq_len]]
    true_len = len(ids)
    ids.extend([PAD] * (max_seq_len - true_len))
    return TokenSequence(ids=ids, true_len=true_len)
