"""Deterministic synthetic referring-segmentation scenes.

Each sample is a canvas of 2-5 non-overlapping colored shapes plus an
expression that picks out exactly one of them. When the referent's
color+kind pair is unique the expression is "<color> <kind>"; otherwise a
spatial relation against an anchor shape disambiguates it. Every scene
keeps at least one distractor sharing the referent's kind or color, so the
expression is always load-bearing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pnm
from .errors import DataError

KINDS = ("circle", "square", "triangle")
COLORS = {"red": (255, 0, 0), "green": (0, 255, 0),
          "blue": (0, 0, 255), "yellow": (255, 255, 0)}
RELATIONS = ("left of", "right of", "above", "below")

# generation-time robustness margin for spatial relations, in pixels;
# resolution itself compares centers by sign
REL_MARGIN = 6.0


@dataclass
class Shape:
    kind: str
    color: str
    cx: float
    cy: float
    r: float


@dataclass
class SceneSpec:
    size: int
    shapes: list
    referent: int
    expr: str


@dataclass
class SampleRecord:
    id: str
    image: Path
    mask: Path
    expr: str


def rasterize(shape: Shape, size: int) -> np.ndarray:
    """Hard-edged coverage mask: pixel center inside the shape."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - shape.cx, yy - shape.cy
    r = shape.r
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        half = r / math.sqrt(2.0)
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape.kind == "triangle":
        # up-pointing, vertices on the radius-r circle
        verts = [(0.0, -r), (r * math.sqrt(3) / 2, r / 2), (-r * math.sqrt(3) / 2, r / 2)]
        inside = np.ones_like(dx, dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            inside &= (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0
        return inside
    raise ValueError(f"unknown kind {shape.kind!r}")


def render(scene: SceneSpec):
    """Scene -> (uint8 RGB image, uint8 0/255 referent mask)."""
    img = np.zeros((scene.size, scene.size, 3), dtype=np.uint8)
    for s in scene.shapes:
        img[rasterize(s, scene.size)] = COLORS[s.color]
    mask = rasterize(scene.shapes[scene.referent], scene.size)
    return img, (mask * np.uint8(255))


def _rel_delta(c: Shape, a: Shape, rel: str) -> float:
    """Positive iff c sits on the `rel` side of a, scaled in pixels."""
    if rel == "left of":
        return a.cx - c.cx
    if rel == "right of":
        return c.cx - a.cx
    if rel == "above":
        return a.cy - c.cy
    return c.cy - a.cy


def _expression_options(shapes, ref_idx):
    """All unambiguous expressions for the referent, or [] if none exist."""
    ref = shapes[ref_idx]
    same = [s for s in shapes if (s.color, s.kind) == (ref.color, ref.kind)]
    if len(same) == 1:
        return [f"{ref.color} {ref.kind}"]
    options = []
    anchor_descs = sorted({(s.color, s.kind) for s in shapes
                           if (s.color, s.kind) != (ref.color, ref.kind)})
    for a_color, a_kind in anchor_descs:
        anchors = [s for s in shapes if (s.color, s.kind) == (a_color, a_kind)]
        for rel in RELATIONS:
            ok = any(_rel_delta(ref, a, rel) >= REL_MARGIN for a in anchors)
            others_clear = all(
                all(_rel_delta(c, a, rel) <= -REL_MARGIN for a in anchors)
                for c in same if c is not ref)
            if ok and others_clear:
                options.append(f"{ref.color} {ref.kind} {rel} {a_color} {a_kind}")
    return options


def _try_scene(rng, size):
    # twin scenes duplicate the first shape's color+kind so only a spatial
    # relation singles the referent out; they need a third shape as anchor
    force_twin = rng.random() < 0.45
    n = int(rng.integers(3, 5)) if force_twin else int(rng.integers(2, 6))
    color_names = sorted(COLORS)
    k0, c0 = KINDS[rng.integers(len(KINDS))], color_names[rng.integers(len(COLORS))]
    descs = [(k0, c0)]
    for i in range(1, n):
        if i == 1 and force_twin:
            descs.append((k0, c0))
        else:
            descs.append((KINDS[rng.integers(len(KINDS))],
                          color_names[rng.integers(len(COLORS))]))

    # shape extents sized against the stride-4 loss grid: small shapes make
    # the mask quantization floor dominate the IoU
    r_lo, r_hi = max(5, size * 5 // 32), max(6, size // 4)
    if n >= 3:
        r_hi = max(r_lo + 1, size * 3 // 16)  # crowded scenes must stay placeable
    shapes = []
    for kind, color in descs:
        r = float(rng.integers(r_lo, r_hi + 1))
        placed = False
        for _ in range(40):
            cx = float(rng.integers(int(r) + 2, size - int(r) - 1)) + 0.5
            cy = float(rng.integers(int(r) + 2, size - int(r) - 1)) + 0.5
            if all(math.hypot(cx - s.cx, cy - s.cy) > r + s.r + 2 for s in shapes):
                shapes.append(Shape(kind, color, cx, cy, r))
                placed = True
                break
        if not placed:
            return None

    candidates = []
    for i, ref in enumerate(shapes):
        grounded = any(j != i and (s.kind == ref.kind or s.color == ref.color)
                       for j, s in enumerate(shapes))
        if not grounded:
            continue
        opts = _expression_options(shapes, i)
        if opts:
            candidates.append((i, opts))
    if not candidates:
        return None
    pool = candidates
    relational = [c for c in candidates if len(c[1][0].split()) > 2]
    if relational and rng.random() < 0.75:
        pool = relational
    i, opts = pool[rng.integers(len(pool))]
    return SceneSpec(size, shapes, i, opts[rng.integers(len(opts))])


def make_scene(seed, index, size) -> SceneSpec:
    """Deterministic scene for one sample; rejection-samples until valid."""
    block = 0
    while True:
        rng = np.random.default_rng([seed, index, block])
        for _ in range(100):
            scene = _try_scene(rng, size)
            if scene is not None:
                return scene
        block += 1  # reseed after 100 failed attempts


def generate_dataset(count, size, seed, out_dir):
    """Write images/, masks/ and manifest.jsonl; returns the manifest path."""
    if size % 32:
        raise DataError(f"size {size} not divisible by 32")
    if count < 1:
        raise DataError("count must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for idx in range(count):
            scene = make_scene(seed, idx, size)
            img, mask = render(scene)
            sid = f"{idx:06d}"
            pnm.write_ppm(out / "images" / f"{sid}.ppm", img)
            pnm.write_pgm(out / "masks" / f"{sid}.pgm", mask)
            fh.write(json.dumps({"id": sid, "image": f"images/{sid}.ppm",
                                 "mask": f"masks/{sid}.pgm", "expr": scene.expr}) + "\n")
    return manifest


def load_manifest(data_dir):
    """Parse and validate manifest.jsonl; returns SampleRecords with resolved paths."""
    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    records = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = SampleRecord(id=obj["id"], image=root / obj["image"],
                                   mask=root / obj["mask"], expr=obj["expr"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"manifest line {lineno}: {exc}") from None
            if not rec.image.exists():
                raise DataError(f"sample {rec.id}: missing image {rec.image}")
            if not rec.mask.exists():
                raise DataError(f"sample {rec.id}: missing mask {rec.mask}")
            mask = pnm.read_pgm(rec.mask)
            if not np.isin(mask, (0, 255)).all():
                raise DataError(f"sample {rec.id}: mask not binary")
            records.append(rec)
    return records


def load_sample(record: SampleRecord):
    """-> (float64 [3,H,W] image in [0,1], bool [H,W] mask)."""
    img = pnm.read_ppm(record.image).astype(np.float64) / 255.0
    mask = pnm.read_pgm(record.mask) > 127
    return img.transpose(2, 0, 1), mask
