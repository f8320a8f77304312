"""Procedural image-caption corpus and its on-disk format.

Scenes place 1-3 colored shapes on a 4x4 cell grid over a 64x64 dark-gray
canvas. Captions come from two templates, "a {color} {shape}" and
"a {color} {shape} {relation} a {color} {shape}", and every emitted caption
is re-checked against the scene by an evaluator that parses the caption
text independently of the template enumerator.

Palette (exact RGB): red (255,0,0), green (0,200,0), blue (40,40,255),
yellow (255,220,0), white (255,255,255); background (16,16,16). The dark
background keeps background patches near zero in encoder feature space, so
codebook competition is driven by object content.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

CANVAS = 64
GRID = 4
CELL = CANVAS // GRID

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 200, 0),
    "blue": (40, 40, 255),
    "yellow": (255, 220, 0),
    "white": (255, 255, 255),
}
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("left of", "right of", "above", "below")
BACKGROUND = (16, 16, 16)  # nominal level; rendered with the gradient below
BG_LOW, BG_HIGH = 8, 24


def _background_canvas() -> np.ndarray:
    # dark-gray base with a fixed diagonal illumination gradient; background
    # patches then differ by position instead of being one repeated pixel block
    y = np.linspace(0.0, 1.0, CANVAS)[:, None]
    x = np.linspace(0.0, 1.0, CANVAS)[None, :]
    # asymmetric weights keep every grid cell's local level distinct
    level = np.rint(BG_LOW + (BG_HIGH - BG_LOW) * (0.7 * x + 0.3 * y)).astype(np.uint8)
    return np.repeat(level[:, :, None], 3, axis=2)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]


@dataclass
class CaptionedImage:
    image_id: int
    pixels: np.ndarray  # (64, 64, 3) uint8
    captions: tuple[str, str]
    scene: SceneSpec


def _cell_offset(row: int, col: int) -> tuple[int, int]:
    # fixed per-cell placement jitter; varies the pixel pattern a shape
    # produces across cells without touching the cell-level semantics
    return (3 * row + col) % 3 - 1, (row + 3 * col) % 3 - 1


def render(scene: SceneSpec) -> np.ndarray:
    """Deterministic raster; shapes sit at a fixed per-cell offset."""
    img = _background_canvas()
    r = 6  # radius 6 plus |offset| <= 1 stays inside the 16px cell
    for obj in scene.objects:
        dy, dx = _cell_offset(obj.row, obj.col)
        cy = obj.row * CELL + CELL // 2 + dy
        cx = obj.col * CELL + CELL // 2 + dx
        color = COLORS[obj.color]
        if obj.shape == "circle":
            yy, xx = np.mgrid[cy - r: cy + r + 1, cx - r: cx + r + 1]
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            img[cy - r: cy + r + 1, cx - r: cx + r + 1][mask] = color
        elif obj.shape == "square":
            img[cy - r + 1: cy + r, cx - r + 1: cx + r] = color
        else:  # triangle, apex up
            for t in range(2 * r):
                half = round(r * t / (2 * r - 1))
                y = cy - r + 1 + t
                img[y, cx - half: cx + half + 1] = color
    return img


def image_to_float(pixels: np.ndarray, dtype=np.float64) -> np.ndarray:
    """uint8 (H, W, 3) -> channel-first float in [0, 1]."""
    return (pixels.astype(dtype) / dtype(255.0)).transpose(2, 0, 1)


# --- caption semantics -------------------------------------------------------

def _relation_holds(a: SceneObject, b: SceneObject, relation: str) -> bool:
    if relation == "left of":
        return a.col < b.col
    if relation == "right of":
        return a.col > b.col
    if relation == "above":
        return a.row < b.row
    if relation == "below":
        return a.row > b.row
    raise ValueError(f"unknown relation {relation!r}")


def true_captions(scene: SceneSpec) -> list[str]:
    """All template instantiations that hold, deduplicated and sorted."""
    captions = {f"a {o.color} {o.shape}" for o in scene.objects}
    for i, a in enumerate(scene.objects):
        for j, b in enumerate(scene.objects):
            if i == j:
                continue
            for rel in RELATIONS:
                if _relation_holds(a, b, rel):
                    captions.add(f"a {a.color} {a.shape} {rel} a {b.color} {b.shape}")
    return sorted(captions)


def caption_is_true(caption: str, scene: SceneSpec) -> bool:
    """Independent evaluator: parse the caption text, check scene geometry."""
    words = caption.lower().split()
    if len(words) == 3:
        if words[0] != "a":
            return False
        _, color, shape = words
        return any(o.color == color and o.shape == shape for o in scene.objects)
    # relational form: a C S <rel...> a C S
    if len(words) not in (7, 8) or words[0] != "a":
        return False
    color1, shape1 = words[1], words[2]
    if len(words) == 8:
        relation = f"{words[3]} {words[4]}"
        rest = words[5:]
    else:
        relation = words[3]
        rest = words[4:]
    if relation not in RELATIONS or rest[0] != "a":
        return False
    color2, shape2 = rest[1], rest[2]
    firsts = [i for i, o in enumerate(scene.objects) if o.color == color1 and o.shape == shape1]
    seconds = [i for i, o in enumerate(scene.objects) if o.color == color2 and o.shape == shape2]
    return any(
        _relation_holds(scene.objects[i], scene.objects[j], relation)
        for i in firsts
        for j in seconds
        if i != j
    )


# --- generation ---------------------------------------------------------------

def sample_scene(rng: np.random.Generator) -> SceneSpec:
    n_objects = int(rng.integers(1, 4))
    cells = rng.choice(GRID * GRID, size=n_objects, replace=False)
    colors = list(COLORS)
    objects = tuple(
        SceneObject(
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=colors[int(rng.integers(len(colors)))],
            row=int(cell) // GRID,
            col=int(cell) % GRID,
        )
        for cell in cells
    )
    return SceneSpec(objects=objects)


def generate(rng: np.random.Generator, n: int, id_offset: int = 0) -> list[CaptionedImage]:
    """n captioned images; every caption verified true before emission."""
    items = []
    for i in range(n):
        scene = sample_scene(rng)
        candidates = true_captions(scene)
        if len(candidates) >= 2:
            picked = rng.choice(len(candidates), size=2, replace=False)
            captions = (candidates[int(picked[0])], candidates[int(picked[1])])
        else:
            captions = (candidates[0], candidates[0])
        for cap in captions:
            if not caption_is_true(cap, scene):
                raise DataError(f"generator produced an untrue caption: {cap!r}")
        items.append(
            CaptionedImage(
                image_id=id_offset + i,
                pixels=render(scene),
                captions=captions,
                scene=scene,
            )
        )
    return items


# --- PPM P6 -------------------------------------------------------------------

def write_ppm(path: Path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.astype(np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise FormatError("not a P6 PPM", str(path), 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos: pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos: pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"bad header token {token!r}", str(path), start)
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", str(path), pos)
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    payload = raw[pos: pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"truncated pixel data: wanted {expected} bytes, got {len(payload)}",
            str(path),
            pos + len(payload),
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


# --- dataset directory layout: images/*.ppm + captions.tsv + scenes.tsv --------

def save_dataset(items: list[CaptionedImage], directory: Path) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    cap_lines = []
    scene_lines = []
    for item in items:
        write_ppm(directory / "images" / f"{item.image_id}.ppm", item.pixels)
        for cap in item.captions:
            cap_lines.append(f"{item.image_id}\t{cap}")
        spec = [
            {"shape": o.shape, "color": o.color, "row": o.row, "col": o.col}
            for o in item.scene.objects
        ]
        scene_lines.append(f"{item.image_id}\t{json.dumps(spec)}")
    (directory / "captions.tsv").write_text("\n".join(cap_lines) + "\n", encoding="utf-8")
    (directory / "scenes.tsv").write_text("\n".join(scene_lines) + "\n", encoding="utf-8")


def load_dataset(directory: Path) -> list[CaptionedImage]:
    directory = Path(directory)
    cap_path = directory / "captions.tsv"
    try:
        cap_text = cap_path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("captions.tsv is not UTF-8", str(cap_path), e.start) from e
    captions: dict[int, list[str]] = {}
    order: list[int] = []
    for line in cap_text.splitlines():
        if not line:
            continue
        image_id_str, _, caption = line.partition("\t")
        image_id = int(image_id_str)
        if image_id not in captions:
            captions[image_id] = []
            order.append(image_id)
        captions[image_id].append(caption)

    scenes: dict[int, SceneSpec] = {}
    for line in (directory / "scenes.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        image_id_str, _, payload = line.partition("\t")
        objs = tuple(SceneObject(**o) for o in json.loads(payload))
        scenes[int(image_id_str)] = SceneSpec(objects=objs)

    items = []
    for image_id in order:
        caps = captions[image_id]
        if len(caps) != 2:
            raise DataError(f"image {image_id} has {len(caps)} captions, expected 2")
        if image_id not in scenes:
            raise DataError(f"image {image_id} missing from scenes.tsv")
        pixels = read_ppm(directory / "images" / f"{image_id}.ppm")
        items.append(
            CaptionedImage(
                image_id=image_id,
                pixels=pixels,
                captions=(caps[0], caps[1]),
                scene=scenes[image_id],
            )
        )
    return items
