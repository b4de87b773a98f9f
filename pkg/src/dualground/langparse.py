"""Description decoupling, tokenization, and the trainable text encoder.

The template grammar puts the subject noun phrase first: a determiner, an
optional size word, an optional color word, then the head noun. ``decouple``
splits on that rule; the spatial sub-sentence replaces the whole span with
"the object".
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .blocks import AttentionBlock, FeedForwardBlock
from .config import CATEGORIES, COLORS, SIZES
from .params import ParamStore


class ParseError(ValueError):
    def __init__(self, message, tokens=None):
        super().__init__(f"{message}: {tokens!r}" if tokens is not None else message)
        self.tokens = tokens


UNK = "<unk>"
CLS = "<cls>"

GRAMMAR_WORDS = (
    ["the", "object"]
    + list(SIZES)
    + list(COLORS)
    + list(CATEGORIES)
    + ["closest", "to", "farthest", "from", "left", "right", "of", "in",
       "front", "behind", "between", "and", "corner", "center", "room"]
)


class Vocabulary:
    def __init__(self, words):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ContractError("vocabulary words must be unique")
        self.index = {w: i for i, w in enumerate(self.words)}
        if UNK not in self.index or CLS not in self.index:
            raise ContractError("vocabulary must contain the reserved tokens")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls([UNK, CLS] + GRAMMAR_WORDS)

    def __len__(self):
        return len(self.words)

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    def tokenize(self, tokens) -> list:
        if isinstance(tokens, str):
            tokens = tokens.split()
        return [self.index.get(t, self.unk_id) for t in tokens]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(fh.read().splitlines())


@dataclass
class DecoupledText:
    original_tokens: list
    att_tokens: list
    spa_tokens: list


def decouple(tokens) -> DecoupledText:
    tokens = list(tokens)
    if not tokens or tokens[0] != "the":
        raise ParseError("expected a leading determiner", tokens)
    i = 1
    if i < len(tokens) and tokens[i] in SIZES:
        i += 1
    if i < len(tokens) and tokens[i] in COLORS:
        i += 1
    if i >= len(tokens) or tokens[i] not in CATEGORIES:
        raise ParseError("no head noun in the subject position", tokens)
    att = tokens[: i + 1]
    spa = ["the", "object"] + tokens[i + 1:]
    return DecoupledText(original_tokens=tokens, att_tokens=att, spa_tokens=spa)


def reconstruct(dec: DecoupledText) -> list:
    if dec.spa_tokens[:2] != ["the", "object"]:
        raise ParseError("spatial sentence lost its placeholder", dec.spa_tokens)
    return dec.att_tokens + dec.spa_tokens[2:]


class TextEncoder:
    """Embeddings + learned positions + CLS + a small self-attention stack."""

    def __init__(self, d: int, layers: int, heads: int, max_tokens: int,
                 vocab_size: int, nonlinearity: str = "gelu", prefix: str = "text"):
        if d % heads != 0:
            raise ContractError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.layers = layers
        self.heads = heads
        self.max_tokens = max_tokens
        self.vocab_size = vocab_size
        self.nonlinearity = nonlinearity
        self.prefix = prefix

    def register(self, store: ParamStore) -> None:
        store.normal(f"{self.prefix}.embed", (self.vocab_size, self.d))
        store.normal(f"{self.prefix}.pos", (self.max_tokens, self.d))
        for i in range(self.layers):
            AttentionBlock.register(store, f"{self.prefix}.layer{i}.attn", self.d)
            FeedForwardBlock.register(store, f"{self.prefix}.layer{i}.ffn", self.d)

    def encode_text(self, store: ParamStore, token_ids, cls_id: int) -> Tensor:
        ids = [cls_id] + list(token_ids)
        if len(ids) > self.max_tokens:
            raise ContractError(
                f"{len(ids)} positions exceed the encoder's {self.max_tokens}")
        x = ad.embedding_lookup(store[f"{self.prefix}.embed"], ids)
        pos = ad.slice_rows(store[f"{self.prefix}.pos"], 0, len(ids))
        x = ad.add(x, pos)
        for i in range(self.layers):
            attn = AttentionBlock.from_store(store, f"{self.prefix}.layer{i}.attn")
            x, _ = attn.apply(x, x, x, self.heads)
            ffn = FeedForwardBlock.from_store(store, f"{self.prefix}.layer{i}.ffn")
            x = ffn.apply(x, self.nonlinearity)
        return x

    def encode_sentence(self, store: ParamStore, token_ids, cls_id: int) -> Tensor:
        return ad.row(self.encode_text(store, token_ids, cls_id), 0)
