"""
Deterministic synthetic panoptic scenes and the on-disk dataset format.

Each scene is one stuff background filling the canvas plus up to ``max_objects``
thing shapes drawn in order (later shapes overwrite earlier ones). Every category
has its own rendering recipe (shape family x color band) derived from the
vocabulary, so a small convolutional encoder can tell categories apart.

Dataset directory layout:
    manifest.json           schema_version, vocabulary table, per-image entries
    <image_id>.png          8-bit RGB
    <image_id>_idmap.png    16-bit grayscale segment-id map
"""

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.core.exceptions import ValidationError
from PIL import Image, ImageDraw

from segApp.helpers.cs_config import SceneConfig, check_config
from segApp.helpers.cs_errors import ConfigurationError, DatasetParseError
from segApp.helpers.cs_types import (
    Category,
    PanopticSegmentation,
    SceneImage,
    Segment,
    Vocabulary,
    normalize_label,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = 'manifest.json'
MAX_SEGMENT_ID = 65535

THING_FAMILIES = ('circle', 'rectangle', 'triangle')
STUFF_FAMILIES = ('striped-background', 'gradient-background')

# Well separated color bands; things and stuff draw from disjoint palettes.
THING_COLORS = {
    'red': (0.90, 0.10, 0.10),
    'blue': (0.10, 0.25, 0.95),
    'yellow': (0.95, 0.90, 0.10),
    'magenta': (0.90, 0.10, 0.85),
    'cyan': (0.10, 0.90, 0.90),
    'orange': (1.00, 0.55, 0.00),
    'white': (0.97, 0.97, 0.97),
    'purple': (0.50, 0.10, 0.70),
    'lime': (0.60, 1.00, 0.20),
    'pink': (1.00, 0.60, 0.75),
    'teal': (0.00, 0.50, 0.50),
    'navy': (0.05, 0.05, 0.45),
}
STUFF_COLORS = {
    'green': (0.20, 0.55, 0.20),
    'gray': (0.45, 0.45, 0.45),
    'brown': (0.50, 0.32, 0.15),
    'olive': (0.45, 0.45, 0.10),
    'slate': (0.30, 0.35, 0.50),
    'maroon': (0.45, 0.10, 0.15),
}
STUFF_NOUNS = {'striped-background': 'stripes', 'gradient-background': 'gradient'}

_IMAGE_ID_PATTERN = re.compile(r'^[A-Za-z0-9][A-Za-z0-9_.-]{0,127}$')


def validate_image_id(image_id: str) -> str:
    """Image ids become file names: reject separators and traversal patterns."""
    if not isinstance(image_id, str) or not _IMAGE_ID_PATTERN.match(image_id) or '..' in image_id:
        raise ValidationError(f"Invalid image id {image_id!r}")
    return image_id


def default_vocabulary(seen_things: int = 4, unseen_things: int = 2,
                       seen_stuff: int = 2, unseen_stuff: int = 1) -> Vocabulary:
    """
    Standard synthetic vocabulary: things first (seen then unseen), then stuff.

    Thing labels read '<color> <family>', stuff labels '<color> <stripes|gradient>'.
    """
    n_things = seen_things + unseen_things
    n_stuff = seen_stuff + unseen_stuff
    if n_things > len(THING_COLORS) or n_stuff > len(STUFF_COLORS):
        raise ConfigurationError(
            f"At most {len(THING_COLORS)} thing and {len(STUFF_COLORS)} stuff categories are renderable"
        )
    categories: List[Category] = []
    seen_mask: List[bool] = []
    thing_colors = list(THING_COLORS)
    for i in range(n_things):
        family = THING_FAMILIES[i % len(THING_FAMILIES)]
        categories.append(Category(len(categories), f"{thing_colors[i]} {family}", True))
        seen_mask.append(i < seen_things)
    stuff_colors = list(STUFF_COLORS)
    for i in range(n_stuff):
        family = STUFF_FAMILIES[i % len(STUFF_FAMILIES)]
        categories.append(Category(len(categories), f"{stuff_colors[i]} {STUFF_NOUNS[family]}", False))
        seen_mask.append(i < seen_stuff)
    return Vocabulary(categories=categories, seen_mask=seen_mask)


def _label_color(label: str, is_thing: bool) -> Tuple[float, float, float]:
    palette = THING_COLORS if is_thing else STUFF_COLORS
    for word in normalize_label(label).split():
        if word in palette:
            return palette[word]
    # Unknown label: stable pseudo-random color from the label text
    digest = hashlib.sha256(normalize_label(label).encode('utf-8')).digest()
    return tuple(0.15 + 0.8 * b / 255.0 for b in digest[:3])


def render_recipe(category: Category, config: SceneConfig) -> Tuple[str, Tuple[float, float, float]]:
    """Return (shape family, base color) for a category."""
    family = config.shape_palette.get(category.category_id)
    if family is None:
        words = normalize_label(category.label).split()
        if category.is_thing:
            family = next((f for f in THING_FAMILIES if f in words), 'circle')
        else:
            family = 'striped-background' if 'stripes' in words else 'gradient-background'
    if category.is_thing != (family in THING_FAMILIES):
        raise ConfigurationError(
            f"shape_palette maps {'thing' if category.is_thing else 'stuff'} category "
            f"{category.category_id} to incompatible family '{family}'"
        )
    return family, _label_color(category.label, category.is_thing)


def _render_background(family: str, color, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    base = np.asarray(color, dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width]
    if family == 'striped-background':
        period = int(rng.integers(4, 9))
        coord = xx if rng.integers(0, 2) == 0 else yy
        dark = ((coord // max(1, period // 2)) % 2).astype(np.float64)
        shade = 1.0 - 0.35 * dark
    else:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        ramp = np.cos(angle) * xx / max(1, width - 1) + np.sin(angle) * yy / max(1, height - 1)
        ramp = (ramp - ramp.min()) / max(1e-9, ramp.max() - ramp.min())
        shade = 0.65 + 0.35 * ramp
    return np.clip(shade[..., None] * base[None, None, :], 0.0, 1.0)


def _render_shape_mask(family: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    side = min(height, width)
    lo, hi = max(2, side // 8), max(3, side // 3)
    radius = int(rng.integers(lo, hi + 1))
    cx = int(rng.integers(0, width))
    cy = int(rng.integers(0, height))
    canvas = Image.new('L', (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    if family == 'circle':
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=255)
    elif family == 'rectangle':
        aspect = rng.uniform(0.6, 1.4)
        half_w, half_h = radius, max(2, int(round(radius * aspect)))
        draw.rectangle([cx - half_w, cy - half_h, cx + half_w, cy + half_h], fill=255)
    else:
        draw.polygon([(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)], fill=255)
    return np.asarray(canvas) > 0


def quantize_pixels(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats onto the 8-bit grid the PNG codec stores."""
    return to_unit_float(np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8))


def to_unit_float(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def generate_scene(config: SceneConfig, vocabulary: Vocabulary,
                   image_id: Optional[str] = None) -> Tuple[SceneImage, PanopticSegmentation]:
    """
    Render one scene and its panoptic annotation.

    Deterministic in (config, vocabulary): the generator is seeded with config.seed only.

    Raises:
        ConfigurationError: Invalid config, or no renderable categories for the split.
    """
    config = check_config(config, name='scene')
    vocabulary.validate()
    image_id = validate_image_id(image_id or f"scene_{config.seed:06d}")
    rng = np.random.default_rng(config.seed)
    height, width = config.height, config.width

    allowed = [c for c, seen in zip(vocabulary.categories, vocabulary.seen_mask)
               if config.include_unseen or seen]
    stuff = [c for c in allowed if not c.is_thing]
    things = [c for c in allowed if c.is_thing]
    if not stuff or not things:
        raise ConfigurationError("Scene needs at least one thing and one stuff category to draw from")

    background = stuff[int(rng.integers(0, len(stuff)))]
    family, color = render_recipe(background, config)
    canvas = _render_background(family, color, height, width, rng)
    id_map = np.ones((height, width), dtype=np.int64)
    drawn: List[Tuple[int, int]] = [(1, background.category_id)]

    n_objects = int(rng.integers(1, config.max_objects + 1))
    for _ in range(n_objects):
        category = things[int(rng.integers(0, len(things)))]
        family, color = render_recipe(category, config)
        mask = _render_shape_mask(family, height, width, rng)
        if not mask.any():
            continue
        segment_id = len(drawn) + 1
        canvas[mask] = np.asarray(color)
        id_map[mask] = segment_id
        drawn.append((segment_id, category.category_id))

    # Drop fully occluded shapes and renumber in draw order
    visible = [(sid, cat) for sid, cat in drawn if np.any(id_map == sid)]
    remap = np.zeros(len(drawn) + 2, dtype=np.int64)
    segments = []
    for new_id, (old_id, category_id) in enumerate(visible, start=1):
        remap[old_id] = new_id
        segments.append(Segment(segment_id=new_id, category_id=category_id))
    id_map = remap[id_map]

    if config.noise_std > 0:
        canvas = canvas + rng.normal(0.0, config.noise_std, size=canvas.shape)
    pixels = quantize_pixels(canvas)

    image = SceneImage(pixels=pixels, image_id=image_id)
    annotation = PanopticSegmentation(id_map=id_map, segments=segments, image_id=image_id)
    annotation.validate(vocabulary)
    return image, annotation


def generate_dataset(config: SceneConfig, vocabulary: Vocabulary, count: int,
                     split: str = 'train') -> List[Tuple[SceneImage, PanopticSegmentation]]:
    """
    Generate ``count`` scenes with seeds config.seed + i.

    The train split only draws seen categories; the eval split uses config.include_unseen.
    """
    if split not in ('train', 'eval'):
        raise ConfigurationError(f"split must be 'train' or 'eval', got '{split}'")
    scenes = []
    for i in range(count):
        scene_config = config.model_copy(update={
            'seed': config.seed + i,
            'include_unseen': config.include_unseen and split == 'eval',
        })
        scenes.append(generate_scene(scene_config, vocabulary, image_id=f"{split}_{i:04d}"))
    return scenes


def _segment_record(segment: Segment) -> dict:
    record = {'id': int(segment.segment_id), 'category_id': int(segment.category_id)}
    if segment.score is not None:
        record['score'] = float(segment.score)
    return record


def write_dataset(scenes: Sequence[Tuple[SceneImage, PanopticSegmentation]], vocabulary: Vocabulary,
                  path) -> dict:
    """
    Write scenes and vocabulary to ``path``.

    Returns:
        dict: Manifest summary (path, schema_version, image and category counts).

    Raises:
        OSError: The directory or one of its files could not be written (names the file).
    """
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"Cannot create dataset directory {root}: {e}") from e

    entries = []
    for image, annotation in scenes:
        image_id = validate_image_id(image.image_id)
        if annotation.id_map.max(initial=0) > MAX_SEGMENT_ID:
            raise ValidationError(f"{image_id}: segment ids above {MAX_SEGMENT_ID} do not fit 16-bit PNG")
        image_file = f"{image_id}.png"
        idmap_file = f"{image_id}_idmap.png"
        rgb = np.round(image.pixels * 255.0).astype(np.uint8)
        try:
            Image.fromarray(rgb, mode='RGB').save(root / image_file)
            Image.fromarray(annotation.id_map.astype(np.uint16)).save(root / idmap_file)
        except OSError as e:
            raise OSError(f"Cannot write dataset file {root / image_file}: {e}") from e
        entries.append({
            'image_id': image_id,
            'image_file': image_file,
            'idmap_file': idmap_file,
            'segments': [_segment_record(s) for s in annotation.segments],
        })

    manifest = {
        'schema_version': SCHEMA_VERSION,
        'vocabulary': vocabulary.to_table(),
        'images': entries,
    }
    manifest_path = root / MANIFEST_NAME
    try:
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
    except OSError as e:
        raise OSError(f"Cannot write dataset file {manifest_path}: {e}") from e

    logger.info(f"Wrote {len(entries)} scenes to {root}")
    return {
        'path': str(root),
        'schema_version': SCHEMA_VERSION,
        'num_images': len(entries),
        'num_categories': len(vocabulary),
    }


def _load_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetParseError(path, 'file is missing')
    try:
        with Image.open(path) as img:
            img.load()
            return np.array(img)
    except OSError as e:
        raise DatasetParseError(path, f'cannot decode PNG ({e})') from e


def read_manifest(path) -> Dict:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetParseError(manifest_path, 'manifest is missing')
    try:
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetParseError(manifest_path, f'cannot parse manifest ({e})') from e
    if manifest.get('schema_version') != SCHEMA_VERSION:
        raise DatasetParseError(manifest_path, f"unsupported schema_version {manifest.get('schema_version')!r}")
    for key in ('vocabulary', 'images'):
        if not isinstance(manifest.get(key), list):
            raise DatasetParseError(manifest_path, f"'{key}' must be a list")
    return manifest


def _member_path(root: Path, name: str, manifest_path: Path) -> Path:
    """Resolve a manifest file entry, which must stay inside the dataset directory."""
    resolved = (root / name).resolve()
    if not resolved.is_relative_to(root.resolve()):
        raise DatasetParseError(manifest_path, f'{name!r} points outside the dataset directory')
    return resolved


def read_dataset(path) -> Tuple[List[Tuple[SceneImage, PanopticSegmentation]], Vocabulary]:
    """
    Load a dataset directory written by write_dataset, in manifest order.

    Raises:
        DatasetParseError: Missing or corrupt manifest/image file (names the file).
        ValidationError: Annotation invariants fail (e.g. id_map references an unknown segment).
    """
    root = Path(path)
    manifest = read_manifest(root)
    manifest_path = root / MANIFEST_NAME
    try:
        vocabulary = Vocabulary.from_table(manifest['vocabulary'])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetParseError(manifest_path, f'bad vocabulary table ({e})') from e

    scenes = []
    for entry in manifest['images']:
        try:
            image_id = validate_image_id(entry['image_id'])
            image_path = _member_path(root, entry['image_file'], manifest_path)
            idmap_path = _member_path(root, entry['idmap_file'], manifest_path)
            segments = [
                Segment(segment_id=int(s['id']), category_id=int(s['category_id']),
                        score=float(s['score']) if s.get('score') is not None else None)
                for s in entry['segments']
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetParseError(manifest_path, f'bad image entry {entry!r} ({e})') from e

        rgb = _load_png(image_path)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DatasetParseError(image_path, f'expected RGB image, got shape {rgb.shape}')
        id_map = _load_png(idmap_path).astype(np.int64)
        if id_map.shape != rgb.shape[:2]:
            raise DatasetParseError(idmap_path, 'id map and image sizes differ')

        image = SceneImage(pixels=to_unit_float(rgb), image_id=image_id)
        annotation = PanopticSegmentation(id_map=id_map, segments=segments, image_id=image_id)
        annotation.validate(vocabulary)
        scenes.append((image, annotation))
    return scenes, vocabulary
