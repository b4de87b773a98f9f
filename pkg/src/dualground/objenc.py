"""Per-object attribute and spatial feature encoders.

The teacher consumes ground-truth category/color identifiers; the student
consumes normalized surface points through a shared per-point MLP with max
pooling. Everything downstream of these encoders is shared architecture.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DegenerateInputError, Tensor
from .params import ParamStore

CENTROID_TOL = 1e-6


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Zero-centroid, unit-max-radius xyz; rgb stays in [0, 1].

    Position and absolute scale are deliberately stripped here; they reach
    the model only through the bbox features.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 6 or pts.shape[0] == 0:
        raise ContractError(f"normalize_points: bad shape {pts.shape}")
    xyz = pts[:, :3] - pts[:, :3].mean(axis=0)
    radius = np.linalg.norm(xyz, axis=1).max()
    if radius < 1e-12:
        raise DegenerateInputError("normalize_points: zero-radius point set")
    rgb = pts[:, 3:]
    if rgb.min() < -1e-9 or rgb.max() > 1.0 + 1e-9:
        raise ContractError("normalize_points: rgb outside [0, 1]")
    return np.concatenate([xyz / radius, np.clip(rgb, 0.0, 1.0)], axis=1)


class AttributeTeacherEncoder:
    """Ground-truth category + color embeddings, summed, one affine to d."""

    def __init__(self, d: int, n_categories: int, n_colors: int,
                 prefix: str = "obj.teacher"):
        self.d = d
        self.n_categories = n_categories
        self.n_colors = n_colors
        self.prefix = prefix

    def register(self, store: ParamStore) -> None:
        store.normal(f"{self.prefix}.cat_embed", (self.n_categories, self.d))
        store.normal(f"{self.prefix}.col_embed", (self.n_colors, self.d))
        store.xavier(f"{self.prefix}.proj.w", self.d, self.d)
        store.zeros(f"{self.prefix}.proj.b", (self.d,))

    def encode(self, store: ParamStore, cat_ids, col_ids) -> Tensor:
        cat_ids = np.asarray(cat_ids)
        col_ids = np.asarray(col_ids)
        if cat_ids.size and cat_ids.max() >= self.n_categories:
            raise ContractError("unknown category id")
        if col_ids.size and col_ids.max() >= self.n_colors:
            raise ContractError("unknown color id")
        cats = ad.embedding_lookup(store[f"{self.prefix}.cat_embed"], cat_ids)
        cols = ad.embedding_lookup(store[f"{self.prefix}.col_embed"], col_ids)
        return ad.affine(ad.add(cats, cols),
                         store[f"{self.prefix}.proj.w"], store[f"{self.prefix}.proj.b"])


class AttributePointEncoder:
    """Shared per-point MLP (two layers), coordinate-wise max pool, affine."""

    def __init__(self, d: int, hidden: int, nonlinearity: str = "gelu",
                 prefix: str = "obj.student"):
        self.d = d
        self.hidden = hidden
        self.nonlinearity = nonlinearity
        self.prefix = prefix

    def register(self, store: ParamStore) -> None:
        store.xavier(f"{self.prefix}.l1.w", 6, self.hidden)
        store.zeros(f"{self.prefix}.l1.b", (self.hidden,))
        store.xavier(f"{self.prefix}.l2.w", self.hidden, self.hidden)
        store.zeros(f"{self.prefix}.l2.b", (self.hidden,))
        store.xavier(f"{self.prefix}.out.w", self.hidden, self.d)
        store.zeros(f"{self.prefix}.out.b", (self.d,))

    def encode_one(self, store: ParamStore, points: np.ndarray) -> Tensor:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 6 or pts.shape[0] < 8:
            raise ContractError(f"point encoder: bad point set shape {pts.shape}")
        if np.abs(pts[:, :3].mean(axis=0)).max() > CENTROID_TOL:
            raise ContractError("point encoder: points are not normalized")
        act = ad.NONLINEARITIES[self.nonlinearity]
        x = Tensor(pts)
        x = act(ad.affine(x, store[f"{self.prefix}.l1.w"], store[f"{self.prefix}.l1.b"]))
        x = act(ad.affine(x, store[f"{self.prefix}.l2.w"], store[f"{self.prefix}.l2.b"]))
        pooled = ad.max_over_rows(x)
        return ad.affine(pooled, store[f"{self.prefix}.out.w"], store[f"{self.prefix}.out.b"])

    def encode(self, store: ParamStore, point_sets) -> Tensor:
        sizes = {np.asarray(p).shape[0] for p in point_sets}
        if len(sizes) != 1:
            return ad.stack_rows([self.encode_one(store, p) for p in point_sets])
        # equal-size sets: one shared-MLP pass over all points, segment pool
        n = sizes.pop()
        stacked = np.concatenate([np.asarray(p, dtype=np.float64) for p in point_sets])
        if n < 8 or stacked.shape[1] != 6:
            raise ContractError(f"point encoder: bad point set shape ({n}, 6)")
        cent = stacked.reshape(len(point_sets), n, 6)[:, :, :3].mean(axis=1)
        if np.abs(cent).max() > CENTROID_TOL:
            raise ContractError("point encoder: points are not normalized")
        act = ad.NONLINEARITIES[self.nonlinearity]
        x = Tensor(stacked)
        x = act(ad.affine(x, store[f"{self.prefix}.l1.w"], store[f"{self.prefix}.l1.b"]))
        x = act(ad.affine(x, store[f"{self.prefix}.l2.w"], store[f"{self.prefix}.l2.b"]))
        pooled = ad.segment_max(x, n)
        return ad.affine(pooled, store[f"{self.prefix}.out.w"], store[f"{self.prefix}.out.b"])


class SpatialEncoder:
    """Single affine from the 6 room-normalized bbox coordinates to d."""

    def __init__(self, d: int, prefix: str = "obj.spatial"):
        self.d = d
        self.prefix = prefix

    def register(self, store: ParamStore) -> None:
        store.xavier(f"{self.prefix}.w", 6, self.d)
        store.zeros(f"{self.prefix}.b", (self.d,))

    def encode(self, store: ParamStore, bbox_feats: np.ndarray) -> Tensor:
        feats = np.asarray(bbox_feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != 6:
            raise ContractError(f"spatial encoder: bad shape {feats.shape}")
        return ad.affine(Tensor(feats), store[f"{self.prefix}.w"], store[f"{self.prefix}.b"])


def bbox_features(scene) -> np.ndarray:
    """(K, 6) bboxes normalized by the room bounds to [0, 1]."""
    rmin = np.array(scene.room_min)
    size = scene.room_size
    rows = []
    for o in scene.objects:
        if min(o.bbox[3:]) <= 0.0:
            raise ContractError(f"object {o.id}: non-positive bbox extent")
        cx, cy, cz, h, w, l = o.bbox
        rows.append([
            (cx - rmin[0]) / size[0],
            (cy - rmin[1]) / size[1],
            (cz - rmin[2]) / size[2],
            h / size[2], w / size[1], l / size[0],
        ])
    return np.array(rows)


def fuse_global(f_att: Tensor, f_spa: Tensor, mode: str, proj=None) -> Tensor:
    """Fused per-object feature used as the attention key by both branches."""
    if f_att.shape != f_spa.shape:
        raise ContractError(f"fuse_global: shapes {f_att.shape} vs {f_spa.shape}")
    if mode == "add":
        return ad.add(f_att, f_spa)
    if mode == "concat_project":
        if proj is None:
            raise ContractError("fuse_global: concat_project requires a projection")
        w, b = proj
        return ad.affine(ad.concat(f_att, f_spa, axis=1), w, b)
    raise ContractError(f"fuse_global: unknown mode {mode!r}")
