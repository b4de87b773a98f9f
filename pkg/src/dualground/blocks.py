"""Reusable attention / feed-forward blocks over a ParamStore.

A block is a named bundle of tensors fetched from (or registered into) a
store under a prefix. ``use_out_proj`` / ``use_norm`` exist so tests can run
a block in its bare single-equation form.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore


@dataclass
class AttentionBlock:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_g: Tensor
    ln_b: Tensor

    NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_g", "ln_b")

    @classmethod
    def register(cls, store: ParamStore, prefix: str, d: int) -> "AttentionBlock":
        for nm in ("wq", "wk", "wv", "wo"):
            store.xavier(f"{prefix}.{nm}", d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            store.zeros(f"{prefix}.{nm}", (d,))
        store.ones(f"{prefix}.ln_g", (d,))
        store.zeros(f"{prefix}.ln_b", (d,))
        return cls.from_store(store, prefix)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "AttentionBlock":
        return cls(*(store[f"{prefix}.{nm}"] for nm in cls.NAMES))

    def apply(self, q_src: Tensor, k_src: Tensor, v_src: Tensor, heads: int,
              use_out_proj: bool = True, use_norm: bool = True):
        """Returns (output, attention_weights ndarray (heads, Kq, Kk))."""
        q = ad.affine(q_src, self.wq, self.bq)
        k = ad.affine(k_src, self.wk, self.bk)
        v = ad.affine(v_src, self.wv, self.bv)
        mixed = ad.multihead_attention(q, k, v, heads)
        weights = mixed.aux
        out = mixed
        if use_out_proj:
            out = ad.affine(out, self.wo, self.bo)
        if use_norm:
            out = ad.layer_norm(ad.add(q_src, out), self.ln_g, self.ln_b)
        return out, weights


@dataclass
class FeedForwardBlock:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_g: Tensor
    ln_b: Tensor

    NAMES = ("w1", "b1", "w2", "b2", "ln_g", "ln_b")

    @classmethod
    def register(cls, store: ParamStore, prefix: str, d: int,
                 hidden: int | None = None) -> "FeedForwardBlock":
        hidden = 4 * d if hidden is None else hidden
        store.xavier(f"{prefix}.w1", d, hidden)
        store.zeros(f"{prefix}.b1", (hidden,))
        store.xavier(f"{prefix}.w2", hidden, d)
        store.zeros(f"{prefix}.b2", (d,))
        store.ones(f"{prefix}.ln_g", (d,))
        store.zeros(f"{prefix}.ln_b", (d,))
        return cls.from_store(store, prefix)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "FeedForwardBlock":
        return cls(*(store[f"{prefix}.{nm}"] for nm in cls.NAMES))

    def apply(self, x: Tensor, nonlinearity: str, use_norm: bool = True) -> Tensor:
        act = ad.NONLINEARITIES[nonlinearity]
        out = ad.affine(act(ad.affine(x, self.w1, self.b1)), self.w2, self.b2)
        if use_norm:
            out = ad.layer_norm(ad.add(x, out), self.ln_g, self.ln_b)
        return out
