"""Procedural scenes of white regular polygons on black background.

Scenes hold triangles, squares and pentagons of equal area (120 px) with
uniformly random centers and rotations, pairwise separated by at least a
2 px clearance and kept 2 px off the border. Rasterization marks each
pixel whose center falls inside a polygon, which lands the filled pixel
count within a few percent of the nominal area.

Two count profiles matter in practice:

* the standard profile allows each category 0 or 1 times with at least
  one shape overall, choosing the total count 1/2/3 uniformly so a large
  draw splits into near-equal thirds per total and shows each category
  in two thirds of the images;
* the extended calibration profile draws each category count uniformly
  from {0..3} independently (empty scenes allowed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CATEGORIES",
    "SHAPE_AREA",
    "ShapeSpec",
    "SceneSpec",
    "CountProfile",
    "PlacementError",
    "STANDARD_PROFILE",
    "CALIBRATION_PROFILE",
    "circumradius",
    "polygon_vertices",
    "sample_scene",
    "rasterize",
    "generate_dataset",
    "downscale",
    "upscale",
    "write_pgm",
    "read_pgm",
    "write_png",
    "write_manifest",
    "read_manifest",
    "derive_seed",
]

CATEGORIES = ("triangle", "square", "pentagon")
_N_VERTICES = {"triangle": 3, "square": 4, "pentagon": 5}
SHAPE_AREA = 120.0
CLEARANCE = 2.0
MAX_REJECTIONS = 10_000


class PlacementError(RuntimeError):
    """Rejection sampling could not place the scene (image too small)."""


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    center: tuple      # (x, y) in pixel coordinates
    rotation: float    # radians
    area: float = SHAPE_AREA

    def vertices(self) -> np.ndarray:
        return polygon_vertices(_N_VERTICES[self.category], self.center,
                                self.rotation, self.area)


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple
    image_size: tuple = (64, 64)

    def counts(self) -> dict:
        out = {c: 0 for c in CATEGORIES}
        for s in self.shapes:
            out[s.category] += 1
        return out


@dataclass(frozen=True)
class CountProfile:
    """Admissible per-category counts plus scene-level constraints."""

    name: str
    allowed_counts: frozenset = frozenset({0, 1})
    require_nonempty: bool = True
    balanced_totals: bool = True   # draw the total uniformly, then a combo

    def __post_init__(self):
        if not self.allowed_counts:
            raise ValueError("allowed_counts must be nonempty")
        if any(c < 0 for c in self.allowed_counts):
            raise ValueError("counts must be nonnegative")

    def admits(self, counts: dict) -> bool:
        if any(counts.get(c, 0) not in self.allowed_counts
               for c in CATEGORIES):
            return False
        if self.require_nonempty and sum(counts.values()) == 0:
            return False
        return True


STANDARD_PROFILE = CountProfile(name="standard")
CALIBRATION_PROFILE = CountProfile(
    name="calibration", allowed_counts=frozenset({0, 1, 2, 3}),
    require_nonempty=False, balanced_totals=False)

PROFILES = {p.name: p for p in (STANDARD_PROFILE, CALIBRATION_PROFILE)}


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def circumradius(n_vertices: int, area: float = SHAPE_AREA) -> float:
    return math.sqrt(2.0 * area / (n_vertices * math.sin(2 * math.pi / n_vertices)))


def polygon_vertices(n_vertices: int, center, rotation: float,
                     area: float = SHAPE_AREA) -> np.ndarray:
    """Counter-clockwise vertices of a regular polygon, shape (k, 2)."""
    R = circumradius(n_vertices, area)
    ang = rotation + 2 * np.pi * np.arange(n_vertices) / n_vertices
    return np.stack([center[0] + R * np.cos(ang),
                     center[1] + R * np.sin(ang)], axis=1)


def _polygons_overlap(p: np.ndarray, q: np.ndarray) -> bool:
    # separating-axis test for convex polygons
    for poly in (p, q):
        k = len(poly)
        for i in range(k):
            edge = poly[(i + 1) % k] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = p @ axis
            qa = q @ axis
            if pa.max() < qa.min() or qa.max() < pa.min():
                return False
    return True


def _point_segment_dist(pts: np.ndarray, a: np.ndarray,
                        b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=1)
    s = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + s[:, None] * ab
    return np.linalg.norm(pts - proj, axis=1)


def polygon_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Minimum distance between two convex polygons (0 if they overlap)."""
    if _polygons_overlap(p, q):
        return 0.0
    best = np.inf
    for src, dst in ((p, q), (q, p)):
        k = len(dst)
        for i in range(k):
            d = _point_segment_dist(src, dst[i], dst[(i + 1) % k]).min()
            best = min(best, float(d))
    return best


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

def _draw_counts(profile: CountProfile, rng: np.random.Generator) -> dict:
    if profile.balanced_totals:
        # uniform total, uniform category combination within the total
        allowed_max = max(profile.allowed_counts)
        if allowed_max != 1:
            raise ValueError("balanced totals assume per-category counts <= 1")
        total = int(rng.integers(1, len(CATEGORIES) + 1))
        chosen = rng.choice(len(CATEGORIES), size=total, replace=False)
        return {c: int(i in chosen) for i, c in enumerate(CATEGORIES)}
    counts = {c: int(rng.choice(sorted(profile.allowed_counts)))
              for c in CATEGORIES}
    if profile.require_nonempty:
        while sum(counts.values()) == 0:
            counts = {c: int(rng.choice(sorted(profile.allowed_counts)))
                      for c in CATEGORIES}
    return counts


def sample_scene(profile: CountProfile, image_size=(64, 64),
                 rng: np.random.Generator | None = None,
                 seed: int | None = None) -> SceneSpec:
    """Draw counts from the profile and place shapes by rejection.

    Placement retries the whole scene layout until every pairwise
    clearance holds, and raises PlacementError after MAX_REJECTIONS
    failed placements (the image is too small for the request).
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    H, W = image_size
    counts = _draw_counts(profile, rng)
    # largest shapes first; dense layouts jam far less often this way
    order = sorted((c for c in CATEGORIES for _ in range(counts[c])),
                   key=lambda c: -circumradius(_N_VERTICES[c]))
    for category in set(order):
        lo = CLEARANCE + circumradius(_N_VERTICES[category])
        if W - lo < lo or H - lo < lo:
            raise PlacementError(f"image {image_size} too small for "
                                 f"{category} (R={lo - CLEARANCE:.1f})")

    rejections = 0
    while True:
        # one whole-scene attempt; a jammed layout is discarded entirely
        placed: list[ShapeSpec] = []
        polys: list[np.ndarray] = []
        for category in order:
            R = circumradius(_N_VERTICES[category])
            lo = CLEARANCE + R
            for _ in range(200):
                cx = rng.uniform(lo, W - lo)
                cy = rng.uniform(lo, H - lo)
                rot = rng.uniform(0.0, 2 * np.pi)
                poly = polygon_vertices(_N_VERTICES[category], (cx, cy), rot)
                if all(polygon_distance(poly, other) >= CLEARANCE
                       for other in polys):
                    placed.append(ShapeSpec(category, (cx, cy), rot))
                    polys.append(poly)
                    break
                rejections += 1
                if rejections >= MAX_REJECTIONS:
                    raise PlacementError(
                        f"gave up after {MAX_REJECTIONS} rejections placing "
                        f"{len(order)} shapes in {image_size}")
            else:
                break   # restart the scene
        else:
            return SceneSpec(shapes=tuple(placed), image_size=(H, W))


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def rasterize(scene: SceneSpec) -> np.ndarray:
    """Binary float raster; a pixel is set when its center lies inside
    some shape."""
    H, W = scene.image_size
    img = np.zeros((H, W), dtype=np.float64)
    if not scene.shapes:
        return img
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs + 0.5
    py = ys + 0.5
    for shape in scene.shapes:
        poly = shape.vertices()
        lo = np.floor(poly.min(axis=0) - 1).astype(int)
        hi = np.ceil(poly.max(axis=0) + 1).astype(int)
        x0, y0 = np.clip(lo, 0, [W, H])
        x1, y1 = np.clip(hi, 0, [W, H])
        sub_x = px[y0:y1, x0:x1]
        sub_y = py[y0:y1, x0:x1]
        inside = np.ones_like(sub_x, dtype=bool)
        k = len(poly)
        for i in range(k):
            ax, ay = poly[i]
            bx, by = poly[(i + 1) % k]
            cross = (bx - ax) * (sub_y - ay) - (by - ay) * (sub_x - ax)
            inside &= cross >= 0.0
        img[y0:y1, x0:x1][inside] = 1.0
    return img


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def derive_seed(master_seed: int, index) -> int:
    """splitmix64 mix of the master seed and a stream index or name."""
    if isinstance(index, str):
        index = int.from_bytes(
            __import__("hashlib").sha256(index.encode()).digest()[:8],
            "little")
    z = (master_seed ^ (index * 0x9E3779B97F4A7C15)) & 0xFFFFFFFFFFFFFFFF
    z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def generate_dataset(n: int, profile: CountProfile, seed: int = 0,
                     image_size=(64, 64)):
    """n labeled rasters, bytes fully determined by (seed, n, profile).

    Each image uses its own derived seed, so generation order (or a
    parallel split) cannot change the output.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    images = np.zeros((n, *image_size), dtype=np.float64)
    scenes = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        scene = sample_scene(profile, image_size, rng)
        scenes.append(scene)
        images[i] = rasterize(scene)
    return images, scenes


def downscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downscaling by an integer factor (antialiased)."""
    arr = np.asarray(images, dtype=float)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    n, H, W = arr.shape
    if H % factor or W % factor:
        raise ValueError(f"size ({H},{W}) not divisible by {factor}")
    out = arr.reshape(n, H // factor, factor, W // factor, factor).mean(
        axis=(2, 4))
    return out[0] if squeeze else out


def upscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic upscaling of [0,1] images by an integer factor."""
    import cv2
    arr = np.asarray(images, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    n, H, W = arr.shape
    out = np.empty((n, H * factor, W * factor), dtype=np.float32)
    for i in range(n):
        out[i] = cv2.resize(arr[i], (W * factor, H * factor),
                            interpolation=cv2.INTER_CUBIC)
    out = np.clip(out, 0.0, 1.0).astype(np.float64)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM (P5). Values in [0,1] map to 0..255."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        parts.append(raw[start:pos])
    if parts[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {parts[0]!r}")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / float(maxval)


def write_png(image: np.ndarray, path) -> None:
    from PIL import Image
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def write_manifest(scenes, filenames, path) -> None:
    rows = ["filename,n_triangle,n_square,n_pentagon"]
    for fn, scene in zip(filenames, scenes):
        c = scene.counts()
        rows.append(f"{fn},{c['triangle']},{c['square']},{c['pentagon']}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def read_manifest(path):
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:4] != ["filename", "n_triangle", "n_square", "n_pentagon"]:
            raise ValueError(f"unexpected manifest header {header}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            fn, nt, ns, np_ = line.split(",")[:4]
            out.append((fn, {"triangle": int(nt), "square": int(ns),
                             "pentagon": int(np_)}))
    return out
