"""
Core scene types shared by the synthesis, training, inference and metric helpers.

Vocabulary         - ordered categories with thing/stuff flags and a seen/unseen split
SceneImage         - H x W x 3 pixels in [0, 1]
PanopticSegmentation - segment-id map plus segment -> category records

Ground truth and predictions share PanopticSegmentation; predictions additionally
carry a per-segment score and the query index that produced the segment.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from django.core.exceptions import ValidationError

VOID = -1
MIN_IMAGE_SIDE = 8


def normalize_label(label: str) -> str:
    """Case-fold and collapse whitespace so scripted labels compare reliably."""
    if not isinstance(label, str):
        raise ValidationError(f"Label must be a string, got {type(label).__name__}")
    return ' '.join(label.split()).casefold()


@dataclass(frozen=True)
class Category:
    category_id: int
    label: str
    is_thing: bool


@dataclass
class Vocabulary:
    categories: List[Category]
    seen_mask: List[bool]

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.categories:
            raise ValidationError("Vocabulary must contain at least one category")
        ids = [c.category_id for c in self.categories]
        if ids != list(range(len(ids))):
            raise ValidationError(f"Category ids must be 0..n-1 in order, got {ids}")
        labels = [normalize_label(c.label) for c in self.categories]
        if len(set(labels)) != len(labels):
            raise ValidationError("Category labels must be unique")
        if any(not label for label in labels):
            raise ValidationError("Category labels must be non-blank")
        if not any(c.is_thing for c in self.categories):
            raise ValidationError("Vocabulary needs at least one thing category")
        if all(c.is_thing for c in self.categories):
            raise ValidationError("Vocabulary needs at least one stuff category")
        if len(self.seen_mask) != len(self.categories):
            raise ValidationError("seen_mask length must match the category count")
        if not any(self.seen_mask):
            raise ValidationError("At least one category must be seen")

    def __len__(self):
        return len(self.categories)

    @property
    def labels(self) -> List[str]:
        return [c.label for c in self.categories]

    @property
    def thing_ids(self) -> List[int]:
        return [c.category_id for c in self.categories if c.is_thing]

    @property
    def stuff_ids(self) -> List[int]:
        return [c.category_id for c in self.categories if not c.is_thing]

    @property
    def seen_ids(self) -> List[int]:
        return [c.category_id for c, seen in zip(self.categories, self.seen_mask) if seen]

    @property
    def unseen_ids(self) -> List[int]:
        return [c.category_id for c, seen in zip(self.categories, self.seen_mask) if not seen]

    def is_thing(self, category_id: int) -> bool:
        return self.categories[category_id].is_thing

    def has_category(self, category_id: int) -> bool:
        return 0 <= int(category_id) < len(self.categories)

    def id_for_label(self, label: str) -> Optional[int]:
        wanted = normalize_label(label)
        for c in self.categories:
            if normalize_label(c.label) == wanted:
                return c.category_id
        return None

    def to_table(self) -> List[dict]:
        return [
            {'id': c.category_id, 'label': c.label, 'is_thing': c.is_thing, 'is_seen': bool(seen)}
            for c, seen in zip(self.categories, self.seen_mask)
        ]

    @classmethod
    def from_table(cls, table: Sequence[dict]) -> 'Vocabulary':
        rows = sorted(table, key=lambda r: int(r['id']))
        categories = [Category(int(r['id']), str(r['label']), bool(r['is_thing'])) for r in rows]
        return cls(categories=categories, seen_mask=[bool(r['is_seen']) for r in rows])

    def content_hash(self) -> str:
        payload = json.dumps(self.to_table(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


@dataclass
class SceneImage:
    pixels: np.ndarray
    image_id: str

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValidationError(f"Image {self.image_id} must be H x W x 3, got {pixels.shape}")
        if pixels.shape[0] < MIN_IMAGE_SIDE or pixels.shape[1] < MIN_IMAGE_SIDE:
            raise ValidationError(f"Image {self.image_id} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValidationError(f"Image {self.image_id} has pixels outside [0, 1]")
        self.pixels = pixels

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass
class Segment:
    segment_id: int
    category_id: int
    score: Optional[float] = None
    query_index: Optional[int] = None


@dataclass
class PanopticSegmentation:
    id_map: np.ndarray
    segments: List[Segment]
    image_id: str
    _index: Dict[int, Segment] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.id_map = np.asarray(self.id_map, dtype=np.int64)
        self.validate()

    def validate(self, vocabulary: Optional[Vocabulary] = None):
        if self.id_map.ndim != 2:
            raise ValidationError(f"id_map for {self.image_id} must be 2-D")
        ids = [s.segment_id for s in self.segments]
        if any(i <= 0 for i in ids):
            raise ValidationError(f"Segment ids for {self.image_id} must be positive")
        if len(set(ids)) != len(ids):
            raise ValidationError(f"Segment ids for {self.image_id} must be unique")
        present = set(np.unique(self.id_map).tolist()) - {0}
        unknown = present - set(ids)
        if unknown:
            raise ValidationError(
                f"id_map for {self.image_id} references unregistered segment ids {sorted(unknown)}"
            )
        if vocabulary is not None:
            for s in self.segments:
                if not vocabulary.has_category(s.category_id):
                    raise ValidationError(
                        f"Segment {s.segment_id} of {self.image_id} has unknown category {s.category_id}"
                    )
        self._index = {s.segment_id: s for s in self.segments}

    @property
    def shape(self):
        return tuple(self.id_map.shape)

    def segment(self, segment_id: int) -> Segment:
        return self._index[segment_id]

    def mask(self, segment_id: int) -> np.ndarray:
        return self.id_map == segment_id

    def category_ids(self) -> List[int]:
        """Distinct categories with at least one visible pixel, ascending."""
        present = set(np.unique(self.id_map).tolist()) - {0}
        return sorted({s.category_id for s in self.segments if s.segment_id in present})
