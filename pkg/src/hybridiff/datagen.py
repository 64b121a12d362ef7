"""Procedural scenes, captions, a synthetic aesthetic scorer and corpus statistics.

Scenes place 1-3 flat shapes on a 2x2 grid. Images and both caption styles are
pure functions of the :class:`SceneSpec`, so every record can be regenerated
from its scene alone.

Palette (RGB, 0-255), shared by the renderer and the verifier:

    red      230  25  25      cyan     30 210 220
    green     40 200  40      magenta 220  40 200
    blue      30  60 230      orange  245 140  20
    yellow   240 220  30      purple  120  40 170

    backgrounds: black 20 20 20, gray 128 128 128, white 235 235 235
"""

from __future__ import annotations

import json
import math
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import write_ppm

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (230, 25, 25),
    "green": (40, 200, 40),
    "blue": (30, 60, 230),
    "yellow": (240, 220, 30),
    "cyan": (30, 210, 220),
    "magenta": (220, 40, 200),
    "orange": (245, 140, 20),
    "purple": (120, 40, 170),
}
BACKGROUNDS: dict[str, tuple[int, int, int]] = {
    "black": (20, 20, 20),
    "gray": (128, 128, 128),
    "white": (235, 235, 235),
}
SHAPES = ("circle", "square", "triangle")
COLORS = tuple(PALETTE)
GRID = 2
SIZES = {"small": 0.17, "large": 0.21}  # shape half-extent, fraction of the image side
SIDES = (16, 32, 64, 128)
CELL_NAMES = {(0, 0): "top left", (0, 1): "top right", (1, 0): "bottom left", (1, 1): "bottom right"}
MAX_OBJECTS = 3


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int
    size: str = "large"

    @property
    def center(self) -> tuple[float, float]:
        """(x, y) in [0, 1] image coordinates."""
        return (self.col + 0.5) / GRID, (self.row + 0.5) / GRID


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    background: str = "black"

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError("a scene holds 1-3 objects")
        cells = [(o.row, o.col) for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a grid cell")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in PALETTE or o.size not in SIZES:
                raise ValueError(f"unknown object attributes {o}")
            if not (0 <= o.row < GRID and 0 <= o.col < GRID):
                raise ValueError(f"cell ({o.row}, {o.col}) outside the grid")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")

    @property
    def relations(self) -> list[tuple[int, int, str]]:
        """(i, j, "left of" | "above") for every ordered pair that has one."""
        rels = []
        for i, a in enumerate(self.objects):
            for j, b in enumerate(self.objects):
                if a.col < b.col:
                    rels.append((i, j, "left of"))
                if a.row < b.row:
                    rels.append((i, j, "above"))
        return rels

    def canonical_relation(self) -> tuple[int, int, str] | None:
        """The relation the long caption states: between the first two objects."""
        if len(self.objects) < 2:
            return None
        a, b = self.objects[:2]
        if a.col != b.col:
            return (0, 1, "left of") if a.col < b.col else (1, 0, "left of")
        return (0, 1, "above") if a.row < b.row else (1, 0, "above")

    def to_dict(self) -> dict:
        return {"objects": [asdict(o) for o in self.objects], "background": self.background}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(tuple(SceneObject(**o) for o in d["objects"]), d["background"])


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Per-record stream, so serial and index-partitioned generation agree."""
    return np.random.default_rng([seed, index])


def sample_scene(rng: np.random.Generator, n_objects: int | None = None) -> SceneSpec:
    n = int(rng.integers(1, MAX_OBJECTS + 1)) if n_objects is None else n_objects
    cells = rng.permutation(GRID * GRID)[:n]
    objects = tuple(
        SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            row=int(c) // GRID,
            col=int(c) % GRID,
            size=("small", "large")[rng.integers(2)],
        )
        for c in cells
    )
    return SceneSpec(objects, tuple(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))])


# -- rendering ---------------------------------------------------------------

def shape_mask(obj: SceneObject, side: int) -> np.ndarray:
    """Pixel-centre rasterisation of one object, (side, side) bool."""
    coords = (np.arange(side) + 0.5) / side
    x, y = np.meshgrid(coords, coords)
    cx, cy = obj.center
    r = SIZES[obj.size]
    dx, dy = x - cx, y - cy
    if obj.shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upward triangle: apex at (cx, cy - r), base on y = cy + r
    return (dy <= r) & (np.abs(dx) <= (dy + r) / 2)


def render(scene: SceneSpec, side: int = 16) -> np.ndarray:
    """(3, side, side) uint8 image."""
    if side not in SIDES:
        raise ValueError(f"unsupported side {side}; expected one of {SIDES}")
    img = np.empty((side, side, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[scene.background]
    for obj in scene.objects:
        img[shape_mask(obj, side)] = PALETTE[obj.color]
    return img.transpose(2, 0, 1).copy()


# -- object detection (shared with the verifier) -----------------------------

_CLASS_NAMES = COLORS + tuple(BACKGROUNDS)
_CLASS_RGB = np.array([*PALETTE.values(), *BACKGROUNDS.values()], dtype=np.float64)


@dataclass
class DetectedObject:
    color: str
    shape: str
    area: int
    centroid: tuple[float, float]  # (x, y) in [0, 1]
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 inclusive
    fill: float


def classify_pixels(image: np.ndarray) -> np.ndarray:
    """Nearest palette/background class per pixel; indices into colours then backgrounds."""
    px = np.asarray(image, dtype=np.float64).transpose(1, 2, 0)
    d = ((px[:, :, None, :] - _CLASS_RGB[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def classify_shape(component: np.ndarray) -> tuple[str, float]:
    """Corner occupancy of the bounding box, then fill ratio as a fallback."""
    area = component.sum()
    fill = area / component.size
    tl, tr, bl, br = component[0, 0], component[0, -1], component[-1, 0], component[-1, -1]
    if tl and tr and bl and br:
        shape = "square"
    elif bl and br and not (tl or tr):
        shape = "triangle"
    elif fill >= 0.9:
        shape = "square"
    elif fill < 0.55:
        shape = "triangle"
    else:
        shape = "circle"
    return shape, float(fill)


def min_object_area(side: int) -> int:
    # a quarter of the smallest rendered object
    return max(3, int(0.25 * math.pi * (SIZES["small"] * side) ** 2))


def detect_objects(image: np.ndarray, min_area: int | None = None) -> list[DetectedObject]:
    side = image.shape[-1]
    min_area = min_object_area(side) if min_area is None else min_area
    classes = classify_pixels(image)
    found = []
    for ci, color in enumerate(COLORS):
        labels, n = ndimage.label(classes == ci)
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == k
            area = int(comp.sum())
            if area < min_area:
                continue
            shape, fill = classify_shape(comp)
            rows, cols = np.nonzero(comp)
            cy = (rows.mean() + sl[0].start + 0.5) / side
            cx = (cols.mean() + sl[1].start + 0.5) / side
            found.append(DetectedObject(color, shape, area, (float(cx), float(cy)),
                                        (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1), fill))
    found.sort(key=lambda o: -o.area)
    return found


# -- aesthetic score -----------------------------------------------------------

def aesthetic_components(image: np.ndarray) -> dict[str, float]:
    """Each component lies in [0, 1]; the score is increasing in every one.

    diversity: distinct object colours, saturating at 3
    balance:   1 - |n_objects - 2| / 2, peaking at two objects
    centering: 1 - distance of the object-pixel centroid from the image centre,
               normalised by the half-diagonal
    """
    objs = detect_objects(image)
    if not objs:
        return {"diversity": 0.0, "balance": 0.0, "centering": 0.0}
    diversity = min(len({o.color for o in objs}), 3) / 3
    balance = max(0.0, 1 - abs(len(objs) - 2) / 2)
    total = sum(o.area for o in objs)
    cx = sum(o.centroid[0] * o.area for o in objs) / total
    cy = sum(o.centroid[1] * o.area for o in objs) / total
    centering = max(0.0, 1 - math.hypot(cx - 0.5, cy - 0.5) / math.sqrt(0.5))
    return {"diversity": diversity, "balance": balance, "centering": centering}


AESTHETIC_WEIGHTS = {"diversity": 0.4, "balance": 0.3, "centering": 0.3}


def aesthetic_score(image: np.ndarray) -> float:
    comps = aesthetic_components(image)
    return 10.0 * sum(AESTHETIC_WEIGHTS[k] * v for k, v in comps.items())


# -- captions ------------------------------------------------------------------

_COUNT_WORDS = {1: "one", 2: "two", 3: "three"}


def caption(scene: SceneSpec, style: str = "long") -> str:
    objs = scene.objects
    if style == "short":
        first = f"a {objs[0].color} {objs[0].shape}"
        if len(objs) == 1:
            return first
        rest = [f"{o.color} {o.shape}" for o in objs[1:]]
        if len(objs) == 2:
            return f"{first} and a {rest[0]}"
        return f"{first}, {rest[0]}, {rest[1]}"
    if style != "long":
        raise ValueError(f"unknown caption style {style!r}")
    n = len(objs)
    parts = [f"A simple flat illustration on a {scene.background} background showing "
             f"{_COUNT_WORDS[n]} geometric {'shape' if n == 1 else 'shapes'}."]
    for o in objs:
        parts.append(f"A {o.size} {o.color} {o.shape} sits in the {CELL_NAMES[(o.row, o.col)]} corner.")
    rel = scene.canonical_relation()
    if rel is not None:
        i, j, word = rel
        a, b = objs[i], objs[j]
        parts.append(f"The {a.color} {a.shape} is {word} the {b.color} {b.shape}.")
    parts.append("The scene has no text and no shadows.")
    return " ".join(parts)


# Lemma per surface form; the template language is closed, so no tagger is needed.
NOUN_LEXICON = {
    "illustration": "illustration", "background": "background", "shape": "shape", "shapes": "shape",
    "circle": "circle", "square": "square", "triangle": "triangle", "corner": "corner",
    "scene": "scene", "text": "text", "shadows": "shadow",
}
_WORD = re.compile(r"[a-z]+")


def caption_nouns(text: str) -> list[str]:
    return [NOUN_LEXICON[w] for w in _WORD.findall(text.lower()) if w in NOUN_LEXICON]


# -- corpus --------------------------------------------------------------------

@dataclass
class Manifest:
    records: list[dict]
    quality: list[dict] = field(default_factory=list)
    seed: int = 0
    side: int = 16
    mix: float = 0.9
    quality_threshold: float | None = None

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as f:
            records = [json.loads(line) for line in f if line.strip()]
        side = records[0].get("side", 16) if records else 16
        quality = [r for r in records if r.get("quality")]
        return cls(records, quality, side=side)

    def scenes(self, subset: str = "records") -> list[SceneSpec]:
        return [SceneSpec.from_dict(r["scene"]) for r in getattr(self, subset)]

    def captions(self, subset: str = "records") -> list[str]:
        return [r["caption"] for r in getattr(self, subset)]


def make_record(seed: int, index: int, mix: float = 0.9, side: int = 16) -> dict:
    rng = record_rng(seed, index)
    scene = sample_scene(rng)
    style = "long" if rng.random() < mix else "short"
    return {
        "index": index,
        "scene": scene.to_dict(),
        "caption": caption(scene, style),
        "style": style,
        "side": side,
        "score": round(aesthetic_score(render(scene, side)), 6),
    }


def build_corpus(n: int, mix: float = 0.9, quality_threshold: float | None = None, *, seed: int = 0,
                 side: int = 16, out_dir=None) -> Manifest:
    """Generate ``n`` records; optionally write PPM images and a manifest.

    ``quality`` holds the records whose aesthetic score reaches the threshold.
    """
    if n <= 0:
        raise ValueError(f"corpus size must be positive, got {n}")
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must lie in [0, 1], got {mix}")
    records = [make_record(seed, i, mix, side) for i in range(n)]
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for rec in records:
            rel = f"images/{rec['index']:06d}.ppm"
            write_ppm(out / rel, render(SceneSpec.from_dict(rec["scene"]), side))
            rec["image"] = rel
    quality = []
    if quality_threshold is not None:
        for r in records:
            r["quality"] = r["score"] >= quality_threshold
        quality = [r for r in records if r["quality"]]
        if not quality:
            warnings.warn(f"quality threshold {quality_threshold} keeps no records", stacklevel=2)
    manifest = Manifest(records, quality, seed, side, mix, quality_threshold)
    if out_dir is not None:
        manifest.save(Path(out_dir) / "manifest.jsonl")
        if quality:
            Manifest(quality).save(Path(out_dir) / "quality.jsonl")
    return manifest


def corpus_stats(captions, valid_threshold: int = 10) -> dict:
    """Caption length and noun statistics; a noun is valid when it occurs more
    than ``valid_threshold`` times across the corpus."""
    if isinstance(captions, Manifest):
        captions = captions.captions()
    captions = list(captions)
    if not captions:
        raise ValueError("no captions")
    counts = Counter()
    n_words = n_nouns = 0
    for text in captions:
        nouns = caption_nouns(text)
        counts.update(nouns)
        n_nouns += len(nouns)
        n_words += len(_WORD.findall(text.lower()))
    valid = sorted(w for w, c in counts.items() if c > valid_threshold)
    return {
        "n_captions": len(captions),
        "avg_caption_words": n_words / len(captions),
        "avg_nouns_per_caption": n_nouns / len(captions),
        "distinct_nouns": len(counts),
        "valid_nouns": len(valid),
        "valid_ratio": len(valid) / len(counts) if counts else 0.0,
        "valid_noun_list": valid,
    }
