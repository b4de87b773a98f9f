"""Dataclass configs for generation, model, and training, plus hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

CATEGORIES = ("chair", "table", "bed", "lamp", "couch", "desk", "window", "door", "shelf", "box")
COLORS = ("red", "green", "blue", "white", "black", "brown")
SIZES = ("small", "large")

# Base extents (x, y, z) in meters per category. The profiles are pairwise
# well separated in proportion space so that category stays recoverable from
# a normalized surface point cloud.
CATEGORY_EXTENTS = {
    "chair": (0.50, 0.50, 1.00),
    "table": (1.50, 0.95, 0.72),
    "bed": (2.00, 1.60, 0.50),
    "lamp": (0.26, 0.26, 1.70),
    "couch": (2.10, 0.80, 0.85),
    "desk": (1.30, 0.60, 1.15),
    "window": (1.40, 0.12, 1.10),
    "door": (0.95, 0.14, 2.05),
    "shelf": (1.10, 0.35, 1.90),
    "box": (0.60, 0.55, 0.55),
}

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "brown": (0.55, 0.35, 0.15),
}

RELATION_KINDS = (
    "closest_to",
    "farthest_from",
    "left_of",
    "right_of",
    "in_front_of",
    "behind",
    "between",
    "in_corner",
    "nearest_center",
    "attribute_only",
)
VIEW_DEPENDENT_KINDS = frozenset({"left_of", "right_of", "in_front_of", "behind"})
ANCHORED_KINDS = frozenset(
    {"closest_to", "farthest_from", "left_of", "right_of", "in_front_of", "behind", "between"}
)
SUPERLATIVE_KINDS = frozenset({"closest_to", "farthest_from", "nearest_center"})


@dataclass
class GenConfig:
    room_x: float = 9.0
    room_y: float = 9.0
    room_z: float = 3.0
    k_min: int = 8
    k_max: int = 8
    # observer looks along +x with z up; their right hand points toward -y
    view_direction: tuple = (1.0, 0.0, 0.0)
    n_points: int = 64
    color_noise: float = 0.05
    extent_jitter: float = 0.08
    small_factor: tuple = (0.55, 0.72)
    large_factor: tuple = (1.0, 1.25)
    size_split_factor: float = 0.875  # size_class = small iff scale factor below this
    placement_margin: float = 0.05
    max_place_tries: int = 200
    # oracle thresholds
    corner_frac: float = 0.15      # of the room floor diagonal
    between_max_offset: float = 0.6
    between_t_range: tuple = (0.15, 0.85)
    # corpus cleanliness margins applied at description acceptance time
    superlative_gap: float = 0.5   # runner-up must be this fraction farther
    superlative_abs_gap: float = 2.0  # and at least this many meters farther
    center_abs_gap: float = 1.2    # absolute gap for nearest-to-room-center
    directional_margin: float = 1.0
    corner_band: float = 0.25      # relative dead zone around the corner threshold
    between_band: float = 0.25
    # template mix
    p_attribute_only: float = 0.12
    p_anchorless: float = 0.1
    p_conjunction: float = 0.12
    p_color_in_np: float = 0.6
    p_size_in_np: float = 0.25
    # fraction of scenes that replicate the target category on 3+ objects,
    # usually in a single color so the spatial branch has to separate them
    distractor_boost: float = 0.45
    p_boost_same_color: float = 0.75
    # anchors come from categories with a single instance, so anchor noun
    # phrases stay bare ("the table") and cross-modal binding is direct
    anchor_unique_category_only: bool = True
    max_desc_tries: int = 60


@dataclass
class ModelConfig:
    d: int = 64
    stack_layers: int = 2   # fusion stack depth
    heads: int = 4
    text_layers: int = 2
    fusion: str = "add"     # "add" | "concat_project"
    nonlinearity: str = "gelu"
    max_tokens: int = 24    # positions incl. the leading CLS slot
    point_hidden: int = 64
    # applied to the summed cosine scores inside the reference loss only;
    # cosine-bounded logits need the sharpening (see decisions ledger)
    inverse_temperature: float = 20.0
    kd_inverse_temperature: float = 10.0


@dataclass
class StageConfig:
    stage_kind: str           # "gtas_spatial" | "fine_tune"
    role: str                 # "teacher" | "student"
    epochs: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    gtas: bool = True         # substitution active in gtas_spatial stages
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    distill_weight: float = 1.0


@dataclass
class ScheduleConfig:
    teacher_gtas_epochs: int = 30
    teacher_ft_epochs: int = 10
    student_gtas_epochs: int = 15
    student_ft_epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    use_gtas: bool = True
    teacher_only: bool = False
    # reference regime from the source method, kept as provenance only:
    # d=768, 12 heads, 4 layers, batch 128, teacher 50+20 / student 20+10
    reference_defaults: tuple = (768, 12, 4, 128, 50, 20, 20, 10)


@dataclass
class RunConfig:
    seed: int = 7
    n_scenes: int = 2500
    train_fraction: float = 0.8
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg) -> str:
    if hasattr(cfg, "to_dict"):
        payload = cfg.to_dict()
    elif hasattr(cfg, "__dataclass_fields__"):
        payload = asdict(cfg)
    else:
        payload = cfg
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
