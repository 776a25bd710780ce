"""Synthetic scenes, pseudo-depth corruption and COCO-subset annotation IO.

Depth values follow an inverse-depth convention: nearer surfaces carry
larger values, everything lives in ``[0, 1]``.

Training code only ever sees :class:`TrainScene`, which has no mask field;
ground-truth masks live on :class:`Scene` and in a separate ``eval/``
directory on disk.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagegrid import read_dbr, read_png, resize_bilinear, write_dbr, write_png

SHAPES = ("ellipse", "rectangle", "capsule")


class SceneGenerationError(RuntimeError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class DepthNoise:
    blur_radius: float = 1.0
    noise_amplitude: float = 0.02
    noise_cells: int = 4
    gamma: float = 1.0


@dataclass(frozen=True)
class SceneConfig:
    height: int = 96
    width: int = 96
    min_objects: int = 3
    max_objects: int = 3
    shapes: tuple = SHAPES
    min_radius: int = 11
    max_radius: int = 20
    allow_overlap: bool = False
    min_visible_fraction: float = 0.6
    color_distractors: bool = False
    camouflage: float = 0.0
    texture: float = 0.02
    depth_noise: DepthNoise = field(default_factory=DepthNoise)
    max_retries: int = 200


EASY = SceneConfig()
HARD = SceneConfig(
    allow_overlap=True,
    min_visible_fraction=0.5,
    color_distractors=True,
    camouflage=0.85,
    depth_noise=DepthNoise(blur_radius=2.0, noise_amplitude=0.03, gamma=1.0),
)
SUITES = {"easy": (EASY, 20), "hard": (HARD, 8)}


@dataclass(frozen=True)
class Instance:
    box: tuple  # (x0, y0, x1, y1), half-open pixel extents
    category: int
    gt_mask: np.ndarray
    depth_band: tuple  # (lo, hi) of true depth values


@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    pseudo_depth: np.ndarray
    instances: tuple
    seed: int
    true_depth: np.ndarray = None

    def for_training(self, name=None):
        return TrainScene(
            image=self.image,
            pseudo_depth=self.pseudo_depth,
            boxes=np.array([inst.box for inst in self.instances], dtype=np.int64).reshape(-1, 4),
            categories=np.array([inst.category for inst in self.instances], dtype=np.int64),
            name=name if name is not None else f"seed{self.seed}",
        )


@dataclass(frozen=True)
class TrainScene:
    """What the trainer is allowed to see: image, pseudo-depth, boxes, categories."""

    image: np.ndarray
    pseudo_depth: np.ndarray
    boxes: np.ndarray
    categories: np.ndarray
    name: str = ""

    @property
    def shape(self):
        return self.image.shape[:2]


def scene_seed(master_seed, index):
    """Independent per-scene seed so results do not depend on worker count."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def tight_box(mask):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def shape_mask(kind, cx, cy, r, aspect, angle, h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    ru, rv = r, r * aspect
    if kind == "ellipse":
        return (u / ru) ** 2 + (v / rv) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= ru * 0.85) & (np.abs(v) <= rv * 0.85)
    if kind == "capsule":
        half = max(ru - rv, 0.0)
        uc = np.clip(u, -half, half)
        return (u - uc) ** 2 + v**2 <= rv**2
    raise ValueError(f"unknown shape {kind!r}")


def visible_masks(masks, bands):
    """Visible part of each mask once nearer objects (higher band) cover it."""
    order = sorted(range(len(masks)), key=lambda k: -bands[k][0])
    visible = [None] * len(masks)
    occupied = None
    for k in order:
        m = np.asarray(masks[k], dtype=bool)
        occupied = np.zeros_like(m) if occupied is None else occupied
        visible[k] = m & ~occupied
        occupied = occupied | m
    return visible


def _depth_bands(rng, n):
    # disjoint slots in (0.35, 0.95], one band per object, nearest first
    lo, hi = 0.35, 0.95
    slot = (hi - lo) / max(n, 1)
    bands = []
    for i in range(n):
        start = lo + i * slot + rng.uniform(0.0, max(slot - 0.1, 0.0))
        bands.append((start, start + min(0.1, slot * 0.6)))
    bands.sort(key=lambda b: -b[0])
    return bands


def generate_scene(config=EASY, seed=0):
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    n = int(rng.integers(config.min_objects, config.max_objects + 1))

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    true_depth = 0.05 + 0.2 * ys / max(h - 1, 1)

    bg_color = rng.uniform(0.25, 0.75, size=3)
    bg_tilt = rng.uniform(-0.08, 0.08, size=3)
    image = bg_color + bg_tilt * (xs / max(w - 1, 1) - 0.5)[..., None]

    if config.color_distractors:
        for _ in range(int(rng.integers(2, 5))):
            kind = SHAPES[int(rng.integers(len(SHAPES)))]
            blob = shape_mask(kind, rng.uniform(0, w), rng.uniform(0, h), rng.uniform(5, 10),
                               rng.uniform(0.5, 1.0), rng.uniform(0, np.pi), h, w)
            image[blob] = rng.uniform(0.1, 0.9, size=3)

    bands = _depth_bands(rng, n)
    shapes = []
    for attempt in range(config.max_retries):
        shapes = []
        for band in bands:
            kind = config.shapes[int(rng.integers(len(config.shapes)))]
            r = rng.uniform(config.min_radius, config.max_radius)
            aspect = rng.uniform(0.55, 1.0)
            cx = rng.uniform(r * 0.8, w - r * 0.8)
            cy = rng.uniform(r * 0.8, h - r * 0.8)
            m = shape_mask(kind, cx, cy, r, aspect, rng.uniform(0, np.pi), h, w)
            shapes.append(m)
        if _placement_ok(shapes, config):
            break
    else:
        raise SceneGenerationError(
            f"could not place {n} objects after {config.max_retries} attempts (seed={seed})")

    visible = visible_masks(shapes, bands)

    instances = []
    # paint far to near so nearer objects end on top
    for idx in reversed(range(n)):
        m, (lo, hi) = shapes[idx], bands[idx]
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xs + np.sin(theta) * ys
        sel = ramp[m]
        span = sel.max() - sel.min() if sel.size else 0.0
        t = (ramp - sel.min()) / span if span > 0 else np.zeros_like(ramp)
        true_depth[m] = (lo + (hi - lo) * t)[m]

        if config.camouflage > 0:
            local = image[m].mean(axis=0)
            target = rng.uniform(0.1, 0.9, size=3)
            color = config.camouflage * local + (1 - config.camouflage) * target
        else:
            color = _distinct_color(rng, bg_color)
        shade = 0.05 * (t - 0.5)
        image[m] = np.clip(color + shade[m][:, None], 0, 1)

    for idx in range(n):
        box = tight_box(visible[idx])
        instances.append(Instance(box=box, category=int(idx % 3) + 1,
                                  gt_mask=visible[idx].copy(), depth_band=bands[idx]))

    if config.texture > 0:
        image = image + rng.normal(0.0, config.texture, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    pseudo = corrupt_depth(true_depth, config.depth_noise, seed=int(rng.integers(2**63)))
    return Scene(image=image, pseudo_depth=pseudo, instances=tuple(instances), seed=int(seed),
                 true_depth=true_depth)


def _distinct_color(rng, bg):
    for _ in range(50):
        c = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(c - bg) > 0.45:
            return c
    return 1.0 - bg


def _placement_ok(shapes, config):
    occupied = np.zeros_like(shapes[0]) if shapes else None
    for m in shapes:
        area = m.sum()
        if area < 60:
            return False
        overlap = (m & occupied).sum()
        if not config.allow_overlap and overlap > 0:
            return False
        if (area - overlap) < config.min_visible_fraction * area:
            return False
        occupied = occupied | m
    return True


def corrupt_depth(depth, noise=DepthNoise(), seed=0):
    """Blur, add smooth noise and gamma-remap a depth map, clipped to [0, 1].

    The Gaussian kernel is truncated at ``blur_radius`` pixels, so a step
    edge turns into a ramp roughly ``2 * blur_radius`` pixels wide.
    """
    out = np.asarray(depth, dtype=np.float64).copy()
    if noise.blur_radius > 0:
        out = ndimage.gaussian_filter(out, sigma=noise.blur_radius / 2.0, truncate=2.0,
                                      mode="nearest")
    if noise.noise_amplitude > 0:
        rng = np.random.default_rng(seed)
        cells = max(int(noise.noise_cells), 1)
        coarse = rng.normal(0.0, 1.0, size=(cells + 1, cells + 1))
        out = out + noise.noise_amplitude * resize_bilinear(coarse, *out.shape)
    if noise.gamma != 1.0:
        out = np.clip(out, 0.0, 1.0) ** noise.gamma
    return np.clip(out, 0.0, 1.0)


def generate_suite(config, count, master_seed):
    return [generate_scene(config, scene_seed(master_seed, i)) for i in range(count)]


# ---------------------------------------------------------------------------
# COCO-subset annotations


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    depth_file: str
    height: int
    width: int
    seed: int = 0


@dataclass(frozen=True)
class BoxRecord:
    id: int
    image_id: int
    bbox: tuple  # (x, y, w, h) as in COCO
    category_id: int


@dataclass(frozen=True)
class Annotations:
    images: tuple
    annotations: tuple
    categories: tuple = ()

    def boxes_for(self, image_id):
        return [a for a in self.annotations if a.image_id == image_id]


def save_annotations(ann, path):
    doc = {
        "images": [
            {"id": im.id, "file_name": im.file_name, "depth_file": im.depth_file,
             "height": im.height, "width": im.width, "seed": im.seed}
            for im in ann.images
        ],
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "bbox": list(a.bbox), "category_id": a.category_id}
            for a in ann.annotations
        ],
        "categories": [{"id": c, "name": f"class{c}"} for c in ann.categories],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_annotations(path, check_files=True):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise AnnotationError(f"{path}: expected an object with 'images' and 'annotations'")

    images = {}
    for pos, rec in enumerate(doc["images"]):
        try:
            im = ImageRecord(id=int(rec["id"]), file_name=str(rec["file_name"]),
                             depth_file=str(rec.get("depth_file", "")),
                             height=int(rec["height"]), width=int(rec["width"]),
                             seed=int(rec.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: images[{pos}] is malformed ({exc})") from exc
        if check_files:
            for ref in (im.file_name, im.depth_file):
                if not ref or not (path.parent / ref).is_file():
                    raise AnnotationError(f"{path}: images[{pos}] references missing file {ref!r}")
        images[im.id] = im

    boxes = []
    for pos, rec in enumerate(doc["annotations"]):
        try:
            x, y, bw, bh = (float(v) for v in rec["bbox"])
            a = BoxRecord(id=int(rec["id"]), image_id=int(rec["image_id"]),
                          bbox=(x, y, bw, bh), category_id=int(rec["category_id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: annotations[{pos}] is malformed ({exc})") from exc
        if a.image_id not in images:
            raise AnnotationError(f"{path}: annotations[{pos}] refers to unknown image {a.image_id}")
        if bw <= 0 or bh <= 0:
            raise AnnotationError(f"{path}: annotations[{pos}] has x1 <= x0 or y1 <= y0 (bbox {rec['bbox']})")
        im = images[a.image_id]
        if x < 0 or y < 0 or x + bw > im.width or y + bh > im.height:
            raise AnnotationError(f"{path}: annotations[{pos}] box {rec['bbox']} is outside "
                                  f"the {im.width}x{im.height} image")
        boxes.append(a)
    cats = tuple(int(c["id"]) for c in doc.get("categories", []))
    return Annotations(images=tuple(images.values()), annotations=tuple(boxes), categories=cats)


def _bbox_xyxy(bbox):
    x, y, w, h = bbox
    return (int(np.floor(x)), int(np.floor(y)), int(np.ceil(x + w)), int(np.ceil(y + h)))


def write_dataset(scenes, out_dir):
    """Write images, depth rasters, annotations and eval-only label maps."""
    out = Path(out_dir)
    for sub in ("images", "depth", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    images, annos, eval_index = [], [], []
    next_ann = 1
    for i, sc in enumerate(scenes):
        stem = f"scene_{i:04d}"
        write_png(out / "images" / f"{stem}.png", sc.image)
        write_dbr(out / "depth" / f"{stem}.dbr", sc.pseudo_depth)
        h, w = sc.image.shape[:2]
        images.append(ImageRecord(i + 1, f"images/{stem}.png", f"depth/{stem}.dbr", h, w, sc.seed))
        labels = np.zeros((h, w), dtype=np.uint16)
        entry = {"image_id": i + 1, "label_file": f"eval/{stem}.dbr", "annotations": []}
        for j, inst in enumerate(sc.instances):
            x0, y0, x1, y1 = inst.box
            annos.append(BoxRecord(next_ann, i + 1, (x0, y0, x1 - x0, y1 - y0), inst.category))
            labels[inst.gt_mask] = j + 1
            entry["annotations"].append({"id": next_ann, "label": j + 1})
            next_ann += 1
        write_dbr(out / "eval" / f"{stem}.dbr", labels.astype(np.float64))
        eval_index.append(entry)
    cats = tuple(sorted({a.category_id for a in annos}))
    save_annotations(Annotations(tuple(images), tuple(annos), cats), out / "annotations.json")
    (out / "eval" / "masks.json").write_text(json.dumps({"scenes": eval_index}, indent=1, sort_keys=True) + "\n")
    return out


def load_train_scenes(dataset_dir):
    root = Path(dataset_dir)
    ann = load_annotations(root / "annotations.json")
    scenes = []
    for im in ann.images:
        image = read_png(root / im.file_name)
        depth = read_dbr(root / im.depth_file)
        if image.shape[:2] != (im.height, im.width) or depth.shape != (im.height, im.width):
            raise AnnotationError(f"image {im.id}: raster size does not match annotation")
        recs = ann.boxes_for(im.id)
        boxes = np.array([_bbox_xyxy(a.bbox) for a in recs], dtype=np.int64).reshape(-1, 4)
        cats = np.array([a.category_id for a in recs], dtype=np.int64)
        scenes.append(TrainScene(image=image, pseudo_depth=depth, boxes=boxes, categories=cats,
                                 name=os.path.splitext(os.path.basename(im.file_name))[0]))
    return scenes


def load_eval_masks(dataset_dir):
    """Ground-truth masks per scene, ordered like the annotations file."""
    root = Path(dataset_dir)
    index = json.loads((root / "eval" / "masks.json").read_text())
    out = []
    for entry in index["scenes"]:
        labels = read_dbr(root / entry["label_file"])
        out.append([labels == a["label"] for a in entry["annotations"]])
    return out
