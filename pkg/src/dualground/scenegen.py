"""Synthetic room generator, referring-expression templates, and the
brute-force relation oracle that guarantees each description has a unique
referent.

Geometry conventions: rooms are axis-aligned boxes anchored at an origin,
bboxes are (x_c, y_c, z_c, h, w, l) with h the z extent, w the y extent and
l the x extent. The canonical observer looks along the room's view direction
with z up, so their right-hand axis is view x up(z); all view-dependent
relations are resolved in that fixed frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError
from .config import (
    ANCHORED_KINDS,
    CATEGORIES,
    CATEGORY_EXTENTS,
    COLOR_RGB,
    COLORS,
    GenConfig,
    RELATION_KINDS,
    SUPERLATIVE_KINDS,
    SIZES,
    VIEW_DEPENDENT_KINDS,
    config_hash,
)


class GenerationError(RuntimeError):
    """Bounded retries exhausted while placing objects or describing them."""


@dataclass
class ObjectInstance:
    id: int
    category: str
    color: str
    size_class: str
    bbox: tuple  # (x_c, y_c, z_c, h, w, l)
    size_factor: float = 1.0
    points: np.ndarray | None = None

    @property
    def center(self) -> np.ndarray:
        return np.array(self.bbox[:3])

    @property
    def extents(self) -> np.ndarray:
        """(x, y, z) full extents."""
        h, w, l = self.bbox[3], self.bbox[4], self.bbox[5]
        return np.array([l, w, h])

    @property
    def volume(self) -> float:
        return float(self.bbox[3] * self.bbox[4] * self.bbox[5])


@dataclass
class Scene:
    id: int
    room_min: tuple
    room_max: tuple
    view_direction: tuple
    objects: list = field(default_factory=list)

    def object_by_id(self, oid: int) -> ObjectInstance:
        for o in self.objects:
            if o.id == oid:
                return o
        raise ContractError(f"scene {self.id}: no object with id {oid}")

    @property
    def room_size(self) -> np.ndarray:
        return np.array(self.room_max) - np.array(self.room_min)

    def floor_corners(self) -> np.ndarray:
        x0, y0, _ = self.room_min
        x1, y1, _ = self.room_max
        return np.array([[x0, y0], [x0, y1], [x1, y0], [x1, y1]])

    def view_frame(self):
        """(forward, right) unit vectors of the canonical observer."""
        fwd = np.array(self.view_direction, dtype=float)
        fwd = fwd / np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        return fwd, right


@dataclass
class DescriptionRecord:
    scene_id: int
    target_id: int
    surface_tokens: list
    relation_kind: str
    anchor_ids: list
    distractor_count: int
    view_dependent: bool
    attribute_filter: dict = field(default_factory=dict)
    anchor_filters: list = field(default_factory=list)
    secondary_relation: str | None = None  # only "in_corner" in the default grammar


# ---------------------------------------------------------------------------
# scene generation


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def _boxes_clear(a: ObjectInstance, b: ObjectInstance, margin: float) -> bool:
    ca, cb = a.center, b.center
    ea, eb = a.extents / 2.0, b.extents / 2.0
    gap = np.abs(ca - cb) - (ea + eb)
    return bool(np.any(gap > margin))


def generate_scene(config: GenConfig, seed: int, scene_id: int = 0) -> Scene:
    last_err = None
    for attempt in range(25):
        try:
            return _generate_scene_attempt(config, seed, scene_id, attempt)
        except GenerationError as err:
            last_err = err
    raise GenerationError(f"scene {scene_id}: {last_err}")


def _generate_scene_attempt(config, seed, scene_id, attempt) -> Scene:
    rng = _rng_for(seed, 0, scene_id, attempt)
    k = int(rng.integers(config.k_min, config.k_max + 1))
    scene = Scene(
        id=scene_id,
        room_min=(0.0, 0.0, 0.0),
        room_max=(config.room_x, config.room_y, config.room_z),
        view_direction=tuple(config.view_direction),
    )
    cats = [str(rng.choice(CATEGORIES)) for _ in range(k)]
    forced_colors = [None] * k
    if k >= 4 and rng.random() < config.distractor_boost:
        # replicate one category on several objects so some scenes carry
        # three or more distractors; usually in one color, otherwise the
        # attribute branch could separate them on its own
        boosted = str(rng.choice(CATEGORIES))
        n_rep = int(rng.integers(4, min(6, k) + 1))
        shared = str(rng.choice(COLORS)) if rng.random() < config.p_boost_same_color \
            else None
        for slot in rng.choice(k, size=n_rep, replace=False):
            cats[slot] = boosted
            forced_colors[slot] = shared
    for i in range(k):
        obj = _place_object(scene, i, cats[i], config, rng, forced_colors[i])
        scene.objects.append(obj)
    return scene


def _place_object(scene, oid, category, config, rng, forced_color=None) -> ObjectInstance:
    color = forced_color if forced_color is not None else str(rng.choice(COLORS))
    size_class = str(rng.choice(SIZES))
    lo, hi = (config.small_factor if size_class == "small" else config.large_factor)
    factor = float(rng.uniform(lo, hi))
    base = np.array(CATEGORY_EXTENTS[category])
    jit = rng.uniform(1.0 - config.extent_jitter, 1.0 + config.extent_jitter, size=3)
    ext = base * jit * factor  # (x, y, z) extents
    room = scene.room_size
    if np.any(ext >= room - 2 * config.placement_margin):
        raise GenerationError(f"object {category} too large for the room")
    for _ in range(config.max_place_tries):
        cx = rng.uniform(ext[0] / 2 + config.placement_margin,
                         room[0] - ext[0] / 2 - config.placement_margin)
        cy = rng.uniform(ext[1] / 2 + config.placement_margin,
                         room[1] - ext[1] / 2 - config.placement_margin)
        cz = ext[2] / 2.0  # objects rest on the floor
        cand = ObjectInstance(
            id=oid, category=category, color=color, size_class=size_class,
            bbox=(float(cx), float(cy), float(cz), float(ext[2]), float(ext[1]), float(ext[0])),
            size_factor=factor,
        )
        if all(_boxes_clear(cand, other, config.placement_margin) for other in scene.objects):
            return cand
    raise GenerationError(
        f"could not place object {oid} ({category}) after {config.max_place_tries} tries"
    )


def sample_points(obj: ObjectInstance, n: int, seed: int,
                  color_noise: float = 0.05) -> np.ndarray:
    """n points on the bbox surface with per-channel color jitter, (n, 6)."""
    if n < 8:
        raise ContractError(f"sample_points: n={n} < 8")
    rng = _rng_for(seed, 1, obj.id)
    ex, ey, ez = obj.extents
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for i, f in enumerate(faces):
        axis = f // 2
        side = 1.0 if f % 2 else -1.0
        p = np.empty(3)
        p[axis] = side * 0.5
        rest = [a for a in range(3) if a != axis]
        p[rest[0]] = u[i]
        p[rest[1]] = v[i]
        pts[i] = p
    pts = pts * np.array([ex, ey, ez]) + obj.center
    rgb = np.array(COLOR_RGB[obj.color])
    noise = rng.uniform(-color_noise, color_noise, size=(n, 3))
    colors = np.clip(rgb + noise, 0.0, 1.0)
    return np.concatenate([pts, colors], axis=1)


def size_class_for_volume(category: str, volume: float, config: GenConfig) -> str:
    """Volume threshold between the small and large factor bands.

    The bands (small_factor max * (1+jitter), large_factor min * (1-jitter))
    never overlap under the default config, so the midpoint split is exact.
    """
    hi_small = config.small_factor[1] * (1.0 + config.extent_jitter)
    lo_large = config.large_factor[0] * (1.0 - config.extent_jitter)
    split = ((hi_small + lo_large) / 2.0) ** 3
    base = float(np.prod(np.array(CATEGORY_EXTENTS[category])))
    return "small" if volume < base * split else "large"


def validate_scene(scene: Scene, config: GenConfig) -> list:
    """Return a list of invariant violations (empty when the scene is valid)."""
    problems = []
    if len(scene.objects) < 2:
        problems.append("fewer than 2 objects")
    ids = [o.id for o in scene.objects]
    if len(set(ids)) != len(ids):
        problems.append("duplicate object ids")
    rmin, rmax = np.array(scene.room_min), np.array(scene.room_max)
    for o in scene.objects:
        if min(o.bbox[3:]) <= 0.0:
            problems.append(f"object {o.id}: non-positive extent")
        lo = o.center - o.extents / 2
        hi = o.center + o.extents / 2
        if np.any(lo < rmin - 1e-9) or np.any(hi > rmax + 1e-9):
            problems.append(f"object {o.id}: bbox outside room")
        if o.size_class != size_class_for_volume(o.category, o.volume, config):
            problems.append(f"object {o.id}: size_class inconsistent with volume")
    for i, a in enumerate(scene.objects):
        for b in scene.objects[i + 1:]:
            if not _boxes_clear(a, b, 0.0):
                problems.append(f"objects {a.id}/{b.id} overlap")
    return problems


# ---------------------------------------------------------------------------
# relation oracle


def _matches_filter(obj: ObjectInstance, attribute_filter: dict) -> bool:
    for key, want in attribute_filter.items():
        if getattr(obj, "category" if key == "category" else key) != want:
            return False
    return True


def _corner_threshold(scene: Scene, config: GenConfig) -> float:
    size = scene.room_size
    return config.corner_frac * math.hypot(size[0], size[1])


def _corner_distance(scene: Scene, obj: ObjectInstance) -> float:
    c = obj.center[:2]
    return float(np.min(np.linalg.norm(scene.floor_corners() - c, axis=1)))


def _segment_offset(p: np.ndarray, a: np.ndarray, b: np.ndarray):
    """(perpendicular distance to segment ab, projection parameter t)."""
    ab = b - a
    denom = float(ab @ ab)
    t = float((p - a) @ ab) / denom if denom > 0 else 0.0
    closest = a + np.clip(t, 0.0, 1.0) * ab
    return float(np.linalg.norm(p - closest)), t


def relation_predicate(scene: Scene, obj: ObjectInstance, kind: str,
                       anchors: list, config: GenConfig) -> bool:
    """Non-superlative relation test from bbox geometry."""
    fwd, right = scene.view_frame()
    c = obj.center
    if kind == "left_of":
        return float((c - anchors[0].center) @ (-right)) > 0.0
    if kind == "right_of":
        return float((c - anchors[0].center) @ right) > 0.0
    if kind == "in_front_of":
        return float((c - anchors[0].center) @ fwd) < 0.0
    if kind == "behind":
        return float((c - anchors[0].center) @ fwd) > 0.0
    if kind == "between":
        off, t = _segment_offset(c, anchors[0].center, anchors[1].center)
        t_lo, t_hi = config.between_t_range
        return off <= config.between_max_offset and t_lo <= t <= t_hi
    if kind == "in_corner":
        return _corner_distance(scene, obj) <= _corner_threshold(scene, config)
    raise ContractError(f"unknown predicate relation {kind!r}")


def oracle_satisfiers(scene: Scene, relation_kind: str, anchor_ids: list,
                      attribute_filter: dict, config: GenConfig,
                      secondary_relation: str | None = None) -> set:
    """Exact satisfier set by exhaustive per-object evaluation."""
    if relation_kind not in RELATION_KINDS:
        raise ContractError(f"unknown relation_kind {relation_kind!r}")
    anchors = [scene.object_by_id(a) for a in anchor_ids]
    candidates = [o for o in scene.objects
                  if o.id not in set(anchor_ids) and _matches_filter(o, attribute_filter)]
    predicates = []
    if relation_kind not in SUPERLATIVE_KINDS and relation_kind != "attribute_only":
        predicates.append((relation_kind, anchors))
    if secondary_relation is not None:
        if secondary_relation != "in_corner":
            raise ContractError(f"unsupported secondary relation {secondary_relation!r}")
        predicates.append((secondary_relation, []))
    for kind, anc in predicates:
        candidates = [o for o in candidates
                      if relation_predicate(scene, o, kind, anc, config)]
    if relation_kind in SUPERLATIVE_KINDS and candidates:
        if relation_kind == "nearest_center":
            ref = (np.array(scene.room_min) + np.array(scene.room_max)) / 2.0
            key = [float(np.linalg.norm(o.center - ref)) for o in candidates]
            best = min(key)
        else:
            ref = anchors[0].center
            key = [float(np.linalg.norm(o.center - ref)) for o in candidates]
            best = min(key) if relation_kind == "closest_to" else max(key)
        candidates = [o for o, d in zip(candidates, key) if d == best]
    return {o.id for o in candidates}


# ---------------------------------------------------------------------------
# description templates


def _np_tokens(flt: dict) -> list:
    toks = ["the"]
    if "size_class" in flt:
        toks.append(flt["size_class"])
    if "color" in flt:
        toks.append(flt["color"])
    toks.append(flt["category"])
    return toks


_REL_SURFACE = {
    "closest_to": ["closest", "to"],
    "farthest_from": ["farthest", "from"],
    "left_of": ["to", "the", "left", "of"],
    "right_of": ["to", "the", "right", "of"],
    "in_front_of": ["in", "front", "of"],
    "behind": ["behind"],
}


def _relation_tokens(kind: str, anchor_filters: list) -> list:
    if kind == "attribute_only":
        return []
    if kind == "in_corner":
        return ["in", "the", "corner"]
    if kind == "nearest_center":
        return ["closest", "to", "the", "center", "of", "the", "room"]
    if kind == "between":
        return (["between"] + _np_tokens(anchor_filters[0]) + ["and"]
                + _np_tokens(anchor_filters[1]))
    return _REL_SURFACE[kind] + _np_tokens(anchor_filters[0])


def _minimal_unique_filter(scene: Scene, obj: ObjectInstance) -> dict | None:
    """Smallest attribute filter that singles out obj in the scene, if any."""
    options = (
        {"category": obj.category},
        {"category": obj.category, "color": obj.color},
        {"category": obj.category, "size_class": obj.size_class},
        {"category": obj.category, "color": obj.color, "size_class": obj.size_class},
    )
    for flt in options:
        if sum(_matches_filter(o, flt) for o in scene.objects) == 1:
            return flt
    return None


def _margins_ok(scene, target, kind, anchors, candidates, config,
                secondary=None) -> bool:
    """Reject near-threshold layouts so the corpus is cleanly separable."""
    fwd, right = scene.view_frame()
    others = [o for o in candidates if o.id != target.id]

    def axis_for(k):
        return {"left_of": -right, "right_of": right, "behind": fwd}[k] \
            if k != "in_front_of" else -fwd

    if kind in ("left_of", "right_of", "in_front_of", "behind"):
        ax = axis_for(kind)
        if float((target.center - anchors[0].center) @ ax) < config.directional_margin:
            return False
        for o in others:
            if float((o.center - anchors[0].center) @ ax) > -config.directional_margin:
                return False
    elif kind in ("closest_to", "farthest_from", "nearest_center"):
        if kind == "nearest_center":
            ref = (np.array(scene.room_min) + np.array(scene.room_max)) / 2.0
            abs_gap = config.center_abs_gap
        else:
            ref = anchors[0].center
            abs_gap = config.superlative_abs_gap
        dt = float(np.linalg.norm(target.center - ref))
        for o in others:
            do = float(np.linalg.norm(o.center - ref))
            if kind == "farthest_from":
                if do > dt / (1.0 + config.superlative_gap) \
                        or do > dt - abs_gap:
                    return False
            else:
                if do < dt * (1.0 + config.superlative_gap) \
                        or do < dt + abs_gap:
                    return False
    elif kind == "between":
        off, _ = _segment_offset(target.center, anchors[0].center, anchors[1].center)
        if off > config.between_max_offset / (1.0 + config.between_band):
            return False
        for o in others:
            ooff, _ = _segment_offset(o.center, anchors[0].center, anchors[1].center)
            if ooff < config.between_max_offset * (1.0 + config.between_band):
                return False
    if kind == "in_corner" or secondary == "in_corner":
        thr = _corner_threshold(scene, config)
        if _corner_distance(scene, target) > thr / (1.0 + config.corner_band):
            return False
        if kind == "in_corner":  # secondary conjuncts leave others to the primary
            for o in others:
                if _corner_distance(scene, o) < thr * (1.0 + config.corner_band):
                    return False
    return True


def generate_description(scene: Scene, seed: int, config: GenConfig,
                         record_id: int = 0) -> DescriptionRecord:
    rng = _rng_for(seed, 2, scene.id, record_id)
    for _ in range(config.max_desc_tries):
        rec = _try_description(scene, rng, config)
        if rec is not None:
            return rec
    raise GenerationError(f"no unambiguous description for scene {scene.id}")


def _pick_target(scene, rng):
    """Bias toward distractor-rich categories so hard records survive."""
    counts = {}
    for o in scene.objects:
        counts[o.category] = counts.get(o.category, 0) + 1
    rich = [o for o in scene.objects if counts[o.category] >= 4]
    if rich and rng.random() < 0.6:
        return rich[int(rng.integers(len(rich)))]
    return scene.objects[int(rng.integers(len(scene.objects)))]


def _accepts(scene, target, kind, anchors, flt, config, secondary) -> bool:
    anchor_ids = [a.id for a in anchors]
    satisfiers = oracle_satisfiers(scene, kind, anchor_ids, flt, config,
                                   secondary_relation=secondary)
    if satisfiers != {target.id}:
        return False
    candidates = [o for o in scene.objects
                  if o.id not in anchor_ids and _matches_filter(o, flt)]
    return kind == "attribute_only" or _margins_ok(
        scene, target, kind, anchors, candidates, config, secondary)


def _anchor_quality(scene, target, kind, anchor, flt) -> float:
    """Worst-case separation the anchor yields; bigger = more blatant."""
    fwd, right = scene.view_frame()
    others = [o for o in scene.objects
              if o.id not in (target.id, anchor.id) and _matches_filter(o, flt)]
    if kind in ("closest_to", "farthest_from"):
        dt = float(np.linalg.norm(target.center - anchor.center))
        gaps = [float(np.linalg.norm(o.center - anchor.center)) - dt for o in others]
        if kind == "farthest_from":
            gaps = [-g for g in gaps]
        return min(gaps) if gaps else 0.0
    axis = {"left_of": -right, "right_of": right,
            "in_front_of": -fwd, "behind": fwd}.get(kind)
    if axis is None:
        return 0.0
    pt = float((target.center - anchor.center) @ axis)
    gaps = [pt - float((o.center - anchor.center) @ axis) for o in others]
    return min(gaps + [pt])


def _try_description(scene, rng, config) -> DescriptionRecord | None:
    r = rng.random()
    if r < config.p_attribute_only:
        kind, secondary = "attribute_only", None
    elif r < config.p_attribute_only + config.p_anchorless:
        kind = "in_corner" if rng.random() < 0.5 else "nearest_center"
        secondary = None
    else:
        anchored = sorted(ANCHORED_KINDS)
        kind = str(anchored[int(rng.integers(len(anchored)))])
        conjunction = rng.random() < config.p_conjunction / max(
            1e-9, 1.0 - config.p_attribute_only - config.p_anchorless)
        secondary = "in_corner" if conjunction else None

    if kind == "in_corner" or secondary == "in_corner":
        thr = _corner_threshold(scene, config) / (1.0 + config.corner_band)
        eligible = [o for o in scene.objects if _corner_distance(scene, o) <= thr]
        if not eligible:
            secondary = None
            if kind == "in_corner":
                kind = "nearest_center"
            target = _pick_target(scene, rng)
        else:
            target = eligible[int(rng.integers(len(eligible)))]
    else:
        target = _pick_target(scene, rng)

    flt = {"category": target.category}
    if rng.random() < config.p_color_in_np:
        flt["color"] = target.color
    if rng.random() < config.p_size_in_np:
        flt["size_class"] = target.size_class

    anchors, anchor_filters = [], []
    if kind in ANCHORED_KINDS:
        # search uniquely describable anchors (or pairs) for one that works
        pool = []
        for o in scene.objects:
            if o.id == target.id:
                continue
            if config.anchor_unique_category_only:
                if sum(x.category == o.category for x in scene.objects) != 1:
                    continue
                aflt = {"category": o.category}
            else:
                aflt = _minimal_unique_filter(scene, o)
            if aflt is not None:
                pool.append((o, aflt))
        rng.shuffle(pool)
        if kind == "between":
            found = None
            for i in range(len(pool)):
                for j in range(i + 1, len(pool)):
                    pair = [pool[i], pool[j]]
                    if _accepts(scene, target, kind, [p[0] for p in pair],
                                flt, config, secondary):
                        found = pair
                        break
                if found:
                    break
            if not found:
                return None
            anchors = [p[0] for p in found]
            anchor_filters = [p[1] for p in found]
        else:
            acceptable = [(o, aflt) for o, aflt in pool
                          if _accepts(scene, target, kind, [o], flt, config, secondary)]
            if not acceptable:
                return None
            best = max(acceptable,
                       key=lambda p: (_anchor_quality(scene, target, kind, p[0], flt),
                                      -p[0].id))
            anchors, anchor_filters = [best[0]], [best[1]]
    elif not _accepts(scene, target, kind, [], flt, config, secondary):
        return None

    anchor_ids = [a.id for a in anchors]
    tokens = _np_tokens(flt) + _relation_tokens(kind, anchor_filters)
    if secondary is not None:
        tokens += ["and"] + _relation_tokens(secondary, [])
    distractors = sum(1 for o in scene.objects
                      if o.id != target.id and o.category == target.category)
    return DescriptionRecord(
        scene_id=scene.id,
        target_id=target.id,
        surface_tokens=tokens,
        relation_kind=kind,
        anchor_ids=anchor_ids,
        distractor_count=distractors,
        view_dependent=kind in VIEW_DEPENDENT_KINDS,
        attribute_filter=flt,
        anchor_filters=anchor_filters,
        secondary_relation=secondary,
    )


def classify_difficulty(record: DescriptionRecord) -> str:
    return "hard" if record.distractor_count > 2 else "easy"


def split_corpus(records: list, train_fraction: float, seed: int):
    """Scene-disjoint (train, test) split, deterministic per seed."""
    if not (0.0 < train_fraction < 1.0):
        raise ContractError(f"train_fraction {train_fraction} outside (0, 1)")
    scene_ids = sorted({r.scene_id for r in records})
    rng = _rng_for(seed, 3)
    order = [scene_ids[i] for i in rng.permutation(len(scene_ids))]
    n_train = round(len(order) * train_fraction)
    if n_train == 0 or n_train == len(order):
        raise ContractError("split_corpus: a partition would be empty")
    train_ids = set(order[:n_train])
    train = [r for r in records if r.scene_id in train_ids]
    test = [r for r in records if r.scene_id not in train_ids]
    return train, test


# ---------------------------------------------------------------------------
# corpus files: line-delimited JSON with a header carrying config hash + seed


def _scene_to_json(scene: Scene) -> dict:
    return {
        "kind": "scene",
        "id": scene.id,
        "room_min": list(scene.room_min),
        "room_max": list(scene.room_max),
        "view_direction": list(scene.view_direction),
        "objects": [
            {
                "id": o.id,
                "category": o.category,
                "color": o.color,
                "size_class": o.size_class,
                "bbox": list(o.bbox),
                "size_factor": o.size_factor,
            }
            for o in scene.objects
        ],
    }


def _scene_from_json(d: dict) -> Scene:
    return Scene(
        id=d["id"],
        room_min=tuple(d["room_min"]),
        room_max=tuple(d["room_max"]),
        view_direction=tuple(d["view_direction"]),
        objects=[
            ObjectInstance(
                id=o["id"], category=o["category"], color=o["color"],
                size_class=o["size_class"], bbox=tuple(o["bbox"]),
                size_factor=o["size_factor"],
            )
            for o in d["objects"]
        ],
    )


def _record_to_json(r: DescriptionRecord) -> dict:
    return {
        "kind": "description",
        "scene_id": r.scene_id,
        "target_id": r.target_id,
        "surface_tokens": r.surface_tokens,
        "relation_kind": r.relation_kind,
        "anchor_ids": r.anchor_ids,
        "distractor_count": r.distractor_count,
        "view_dependent": r.view_dependent,
        "attribute_filter": r.attribute_filter,
        "anchor_filters": r.anchor_filters,
        "secondary_relation": r.secondary_relation,
    }


def _record_from_json(d: dict) -> DescriptionRecord:
    return DescriptionRecord(
        scene_id=d["scene_id"], target_id=d["target_id"],
        surface_tokens=d["surface_tokens"], relation_kind=d["relation_kind"],
        anchor_ids=d["anchor_ids"], distractor_count=d["distractor_count"],
        view_dependent=d["view_dependent"], attribute_filter=d["attribute_filter"],
        anchor_filters=d["anchor_filters"],
        secondary_relation=d["secondary_relation"],
    )


def _dump_jsonl(path, header: dict, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _load_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    return header, [json.loads(ln) for ln in lines[1:]]


def generate_corpus(config: GenConfig, seed: int, n_scenes: int):
    """(scenes, records), one description per scene, deterministic per seed."""
    scenes, records = [], []
    for i in range(n_scenes):
        for attempt in range(20):
            scene = generate_scene(config, seed + attempt * 1_000_003, scene_id=i)
            try:
                rec = generate_description(scene, seed, config)
            except GenerationError:
                continue
            scenes.append(scene)
            records.append(rec)
            break
        else:
            raise GenerationError(f"scene slot {i}: no describable scene found")
    return scenes, records


def save_corpus(out_dir, config: GenConfig, seed: int, scenes, records) -> dict:
    import os

    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(config)
    header = {"kind": "header", "config_hash": chash, "seed": seed}
    _dump_jsonl(os.path.join(out_dir, "scenes.jsonl"), header,
                [_scene_to_json(s) for s in scenes])
    _dump_jsonl(os.path.join(out_dir, "descriptions.jsonl"), header,
                [_record_to_json(r) for r in records])
    return header


def load_corpus(corpus_dir):
    import os

    h1, scene_rows = _load_jsonl(os.path.join(corpus_dir, "scenes.jsonl"))
    h2, rec_rows = _load_jsonl(os.path.join(corpus_dir, "descriptions.jsonl"))
    if h1.get("config_hash") != h2.get("config_hash"):
        raise ContractError("corpus files disagree on generator config hash")
    scenes = {d["id"]: _scene_from_json(d) for d in scene_rows}
    records = [_record_from_json(d) for d in rec_rows]
    return scenes, records, h1
