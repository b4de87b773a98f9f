"""Dual-branch fusion stack and per-branch alignment scoring.

Both branches advance in lockstep per layer: the shared fused feature F is
recomputed from the current branch features and serves as the key source in
each branch's self-attention, the query/value come from the branch itself,
then cross-attention against the token-level text feature and a feed-forward
map. The branch score is the cosine similarity of projected object and
sub-sentence features; the grounding score is their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .blocks import AttentionBlock, FeedForwardBlock
from .config import ModelConfig
from .langparse import TextEncoder, Vocabulary, decouple
from .objenc import (
    AttributePointEncoder,
    AttributeTeacherEncoder,
    SpatialEncoder,
    fuse_global,
)
from .params import ParamStore


def branch_self_attention(f_branch: Tensor, f_global: Tensor, block: AttentionBlock,
                          heads: int, use_out_proj: bool = True,
                          use_norm: bool = True):
    """Query/value from the branch, key from the fused global feature."""
    if f_branch.shape != f_global.shape:
        raise ContractError(
            f"branch_self_attention: shapes {f_branch.shape} vs {f_global.shape}")
    return block.apply(f_branch, f_global, f_branch, heads,
                       use_out_proj=use_out_proj, use_norm=use_norm)


def branch_cross_attention(f_self: Tensor, text: Tensor, block: AttentionBlock,
                           heads: int, use_out_proj: bool = True,
                           use_norm: bool = True):
    """Query from the branch, key and value from the token-level text rows."""
    if f_self.shape[1] != text.shape[1]:
        raise ContractError(
            f"branch_cross_attention: widths {f_self.shape} vs {text.shape}")
    return block.apply(f_self, text, text, heads,
                       use_out_proj=use_out_proj, use_norm=use_norm)


@dataclass
class StackLayer:
    att_self: AttentionBlock
    att_cross: AttentionBlock
    att_ffn: FeedForwardBlock
    spa_self: AttentionBlock
    spa_cross: AttentionBlock
    spa_ffn: FeedForwardBlock
    fuse_proj: tuple | None  # (w, b) for concat_project fusion

    @classmethod
    def register(cls, store: ParamStore, prefix: str, d: int, fusion: str) -> "StackLayer":
        for branch in ("att", "spa"):
            AttentionBlock.register(store, f"{prefix}.{branch}.self", d)
            AttentionBlock.register(store, f"{prefix}.{branch}.cross", d)
            FeedForwardBlock.register(store, f"{prefix}.{branch}.ffn", d)
        if fusion == "concat_project":
            store.xavier(f"{prefix}.fuse.w", 2 * d, d)
            store.zeros(f"{prefix}.fuse.b", (d,))
        return cls.from_store(store, prefix, fusion)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, fusion: str) -> "StackLayer":
        proj = None
        if fusion == "concat_project":
            proj = (store[f"{prefix}.fuse.w"], store[f"{prefix}.fuse.b"])
        return cls(
            att_self=AttentionBlock.from_store(store, f"{prefix}.att.self"),
            att_cross=AttentionBlock.from_store(store, f"{prefix}.att.cross"),
            att_ffn=FeedForwardBlock.from_store(store, f"{prefix}.att.ffn"),
            spa_self=AttentionBlock.from_store(store, f"{prefix}.spa.self"),
            spa_cross=AttentionBlock.from_store(store, f"{prefix}.spa.cross"),
            spa_ffn=FeedForwardBlock.from_store(store, f"{prefix}.spa.ffn"),
            fuse_proj=proj,
        )


def forward_stack(f_att: Tensor, f_spa: Tensor, text: Tensor, layers,
                  heads: int, fusion: str = "add", nonlinearity: str = "gelu",
                  use_residual_norm: bool = True):
    """Run both branches through the stacked layers; returns (F̂att, F̂spa)."""
    if not layers:
        raise ContractError("forward_stack: at least one layer required")
    for layer in layers:
        fused = fuse_global(f_att, f_spa, fusion, layer.fuse_proj)
        new = {}
        for branch, self_blk, cross_blk, ffn in (
            ("att", layer.att_self, layer.att_cross, layer.att_ffn),
            ("spa", layer.spa_self, layer.spa_cross, layer.spa_ffn),
        ):
            f_branch = f_att if branch == "att" else f_spa
            x, _ = branch_self_attention(f_branch, fused, self_blk, heads,
                                         use_out_proj=use_residual_norm,
                                         use_norm=use_residual_norm)
            x, _ = branch_cross_attention(x, text, cross_blk, heads,
                                          use_out_proj=use_residual_norm,
                                          use_norm=use_residual_norm)
            new[branch] = ffn.apply(x, nonlinearity, use_norm=use_residual_norm)
        f_att, f_spa = new["att"], new["spa"]
    return f_att, f_spa


def score_branch(f_hat: Tensor, t_branch: Tensor, w_obj: Tensor, w_txt: Tensor) -> Tensor:
    """Cosine of projected object rows against the projected sub-sentence."""
    return ad.cosine_rows(ad.matmul(f_hat, w_obj), ad.matmul(t_branch, w_txt))


@dataclass
class ScoreTriple:
    s_att: np.ndarray
    s_spa: np.ndarray
    s: np.ndarray

    def assert_consistent(self) -> None:
        if not np.array_equal(self.s, self.s_att + self.s_spa):
            raise ContractError("score triple broke s = s_att + s_spa")


def combine_scores(s_att: Tensor, s_spa: Tensor) -> Tensor:
    if s_att.shape != s_spa.shape:
        raise ContractError(f"combine_scores: lengths {s_att.shape} vs {s_spa.shape}")
    return ad.add(s_att, s_spa)


@dataclass
class ForwardOut:
    text: Tensor      # (n+1, d) token-level features of the full description
    t_att: Tensor     # (d,)
    t_spa: Tensor     # (d,)
    f_att: Tensor     # (K, d) encoder-level branch features
    f_spa: Tensor
    fhat_att: Tensor  # (K, d) stack outputs
    fhat_spa: Tensor
    s_att: Tensor     # (K,)
    s_spa: Tensor
    s: Tensor

    def triple(self) -> ScoreTriple:
        t = ScoreTriple(self.s_att.data.copy(), self.s_spa.data.copy(), self.s.data.copy())
        t.assert_consistent()
        return t


@dataclass
class GroundingResult:
    predicted_index: int
    predicted_id: int
    triple: ScoreTriple


class GroundingModel:
    """Bundles config, vocabularies, encoders and a ParamStore for one role."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, categories, colors,
                 role: str, init_seed: int):
        if role not in ("teacher", "student"):
            raise ContractError(f"unknown role {role!r}")
        if cfg.d % cfg.heads != 0:
            raise ContractError(f"width {cfg.d} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.vocab = vocab
        self.categories = list(categories)
        self.colors = list(colors)
        self.role = role
        self.text_encoder = TextEncoder(cfg.d, cfg.text_layers, cfg.heads,
                                        cfg.max_tokens, len(vocab), cfg.nonlinearity)
        self.spatial_encoder = SpatialEncoder(cfg.d)
        if role == "teacher":
            self.attribute_encoder = AttributeTeacherEncoder(
                cfg.d, len(self.categories), len(self.colors))
        else:
            self.attribute_encoder = AttributePointEncoder(
                cfg.d, cfg.point_hidden, cfg.nonlinearity)
        self.store = ParamStore(init_seed)
        self._register()

    def _register(self) -> None:
        st = self.store
        self.text_encoder.register(st)
        self.attribute_encoder.register(st)
        self.spatial_encoder.register(st)
        self.stack = [
            StackLayer.register(st, f"stack.layer{i}", self.cfg.d, self.cfg.fusion)
            for i in range(self.cfg.stack_layers)
        ]
        for branch in ("att", "spa"):
            st.xavier(f"score.{branch}.w_obj", self.cfg.d, self.cfg.d)
            st.xavier(f"score.{branch}.w_txt", self.cfg.d, self.cfg.d)
        n_cat = len(self.categories)
        st.xavier("head.fg.w", self.cfg.d, n_cat)
        st.zeros("head.fg.b", (n_cat,))
        st.xavier("head.text.w", self.cfg.d, n_cat)
        st.zeros("head.text.b", (n_cat,))

    def checkpoint_meta(self) -> dict:
        from dataclasses import asdict

        return {
            "model": asdict(self.cfg),
            "role": self.role,
            "categories": self.categories,
            "colors": self.colors,
            "vocab_digest": self.vocab.digest(),
            # the VD/VI labels follow a fixed relation-kind rule, a stand-in
            # for human view-dependence judgments
            "vd_rule": "relation-kind",
        }

    @classmethod
    def from_checkpoint(cls, path, vocab: Vocabulary) -> "GroundingModel":
        store, meta = ParamStore.load(path)
        cfg = ModelConfig(**meta["model"])
        model = cls(cfg, vocab, meta["categories"], meta["colors"],
                    meta["role"], store.init_seed)
        if meta["vocab_digest"] != vocab.digest():
            raise ContractError("checkpoint was trained with a different vocabulary")
        model.store.copy_from(store)
        return model

    # -- forward ------------------------------------------------------------

    def encode_attributes(self, example) -> Tensor:
        if self.role == "teacher":
            return self.attribute_encoder.encode(self.store, example.cat_ids,
                                                 example.col_ids)
        if example.points is None:
            raise ContractError("student forward needs point sets in the example")
        return self.attribute_encoder.encode(self.store, example.points)

    def forward(self, example) -> ForwardOut:
        st = self.store
        cls_id = self.vocab.cls_id
        text = self.text_encoder.encode_text(st, example.token_ids, cls_id)
        t_att = self.text_encoder.encode_sentence(st, example.att_ids, cls_id)
        t_spa = self.text_encoder.encode_sentence(st, example.spa_ids, cls_id)
        f_att = self.encode_attributes(example)
        f_spa = self.spatial_encoder.encode(st, example.bbox_feats)
        fhat_att, fhat_spa = forward_stack(
            f_att, f_spa, text, self.stack, self.cfg.heads,
            fusion=self.cfg.fusion, nonlinearity=self.cfg.nonlinearity)
        s_att = score_branch(fhat_att, t_att,
                             st["score.att.w_obj"], st["score.att.w_txt"])
        s_spa = score_branch(fhat_spa, t_spa,
                             st["score.spa.w_obj"], st["score.spa.w_txt"])
        s = combine_scores(s_att, s_spa)
        return ForwardOut(text=text, t_att=t_att, t_spa=t_spa, f_att=f_att,
                          f_spa=f_spa, fhat_att=fhat_att, fhat_spa=fhat_spa,
                          s_att=s_att, s_spa=s_spa, s=s)

    def predict(self, example) -> GroundingResult:
        with ad.no_grad():
            out = self.forward(example)
        triple = out.triple()
        # ties break toward the lowest object index
        idx = int(np.argmax(triple.s))
        return GroundingResult(predicted_index=idx,
                               predicted_id=example.object_ids[idx],
                               triple=triple)


def predict_scene(model: GroundingModel, scene, record, gen_cfg, points_seed: int = 0):
    """Convenience wrapper: build the example from raw scene + record."""
    from .data import make_example

    example = make_example(scene, record, model.vocab, model.categories,
                           model.colors, gen_cfg,
                           with_points=model.role == "student",
                           points_seed=points_seed)
    return model.predict(example)


def decoupled_token_ids(vocab: Vocabulary, tokens):
    dec = decouple(tokens)
    return (vocab.tokenize(dec.original_tokens), vocab.tokenize(dec.att_tokens),
            vocab.tokenize(dec.spa_tokens))
