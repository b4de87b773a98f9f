"""Record -> model-input preparation (token ids, bbox features, points)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .langparse import Vocabulary, decouple
from .objenc import bbox_features, normalize_points
from .scenegen import DescriptionRecord, Scene, sample_points


@dataclass
class Example:
    scene_id: int
    object_ids: list
    cat_ids: np.ndarray
    col_ids: np.ndarray
    bbox_feats: np.ndarray
    token_ids: list
    att_ids: list
    spa_ids: list
    target_index: int
    target_category_id: int
    distractor_count: int
    view_dependent: bool
    relation_kind: str
    points: list | None = None
    object_categories: list | None = None
    object_colors: list | None = None
    target_id: int = -1


def make_example(scene: Scene, record: DescriptionRecord, vocab: Vocabulary,
                 categories, colors, gen_cfg, with_points: bool = False,
                 points_seed: int = 0) -> Example:
    cat_index = {c: i for i, c in enumerate(categories)}
    col_index = {c: i for i, c in enumerate(colors)}
    try:
        target_index = [o.id for o in scene.objects].index(record.target_id)
    except ValueError:
        raise ContractError(
            f"record targets object {record.target_id} missing from scene {scene.id}")
    dec = decouple(record.surface_tokens)
    points = None
    if with_points:
        points = []
        for o in scene.objects:
            raw = o.points if o.points is not None else sample_points(
                o, gen_cfg.n_points, points_seed + 7919 * scene.id,
                color_noise=gen_cfg.color_noise)
            points.append(normalize_points(raw))
    return Example(
        scene_id=scene.id,
        object_ids=[o.id for o in scene.objects],
        cat_ids=np.array([cat_index[o.category] for o in scene.objects]),
        col_ids=np.array([col_index[o.color] for o in scene.objects]),
        bbox_feats=bbox_features(scene),
        token_ids=vocab.tokenize(dec.original_tokens),
        att_ids=vocab.tokenize(dec.att_tokens),
        spa_ids=vocab.tokenize(dec.spa_tokens),
        target_index=target_index,
        target_category_id=cat_index[scene.object_by_id(record.target_id).category],
        distractor_count=record.distractor_count,
        view_dependent=record.view_dependent,
        relation_kind=record.relation_kind,
        points=points,
        object_categories=[o.category for o in scene.objects],
        object_colors=[o.color for o in scene.objects],
        target_id=record.target_id,
    )


def make_dataset(scenes: dict, records, vocab: Vocabulary, categories, colors,
                 gen_cfg, with_points: bool = False, points_seed: int = 0) -> list:
    return [
        make_example(scenes[r.scene_id], r, vocab, categories, colors, gen_cfg,
                     with_points=with_points, points_seed=points_seed)
        for r in records
    ]
