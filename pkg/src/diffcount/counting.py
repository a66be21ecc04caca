"""Classical counting model and the hallucination predicate.

Counting runs in three stages: threshold the image, extract
8-connectivity components above a minimum area (speckle from samplers
must not count as objects), then classify each blob by the corner count
of its simplified boundary. The boundary comes from marching squares at
the threshold level, which recovers sub-pixel geometry on antialiased
images; Douglas-Peucker simplification (1.5 px) followed by merging
vertex clusters and dropping shallow turns leaves one vertex per true
polygon corner. Corner counts 3/4/5 map to triangle/square/pentagon;
anything else maps to the nearest of the three with a low-confidence
flag, so classification is total and every image receives a verdict.

A generated image is a counting hallucination when it is counting-ready
and its counts violate the profile: some category count falls outside
the admissible set, or the image is empty while the profile requires at
least one object. The counting-ready indicator is an optional hook and
defaults to always-ready for this dataset family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from skimage import measure

from .shapes import CATEGORIES, CountProfile

__all__ = [
    "Blob",
    "CountVerdict",
    "MIN_BLOB_AREA",
    "DP_TOLERANCE",
    "binarize",
    "connected_components",
    "classify_shape",
    "count_objects",
    "judge",
    "violates_counting",
]

MIN_BLOB_AREA = 20
DP_TOLERANCE = 1.5
MERGE_DISTANCE = 4.0
MIN_TURN_DEG = 40.0


@dataclass
class Blob:
    label: int
    area: int
    bbox: tuple                    # (row0, col0, row1, col1), half-open
    centroid: tuple
    perimeter: float
    contour: np.ndarray            # (m, 2) float (x, y) boundary polyline


@dataclass
class CountVerdict:
    counting_ready: bool
    counts: dict
    is_hallucination: bool
    low_confidence: bool
    blob_diagnostics: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def binarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground mask: pixel >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    return np.asarray(image, dtype=float) >= threshold


def _blob_contour(image: np.ndarray, mask: np.ndarray, bbox,
                  level: float) -> np.ndarray:
    """Sub-pixel boundary of one blob via marching squares.

    The image is evaluated at the blob's bounding box (padded by one
    pixel) with other blobs zeroed out, so the traced contour belongs to
    this blob alone. Returns (x, y) coordinates in whole-image pixels.
    """
    r0, c0, r1, c1 = bbox
    r0p, c0p = max(r0 - 1, 0), max(c0 - 1, 0)
    r1p, c1p = min(r1 + 1, image.shape[0]), min(c1 + 1, image.shape[1])
    window = np.array(image[r0p:r1p, c0p:c1p], dtype=float)
    window[~mask[r0p:r1p, c0p:c1p]] = 0.0
    window = np.pad(window, 1)
    contours = measure.find_contours(window, level)
    if not contours:
        return np.empty((0, 2))
    contour = max(contours, key=len)
    # rows/cols back to whole-image (x, y)
    xy = contour[:, ::-1] + np.array([c0p - 1, r0p - 1])
    return xy


def connected_components(mask: np.ndarray, image: np.ndarray | None = None,
                         min_area: int = MIN_BLOB_AREA,
                         level: float = 0.5) -> list:
    """8-connectivity components of the mask with area >= min_area.

    When the grayscale image is provided, each blob's contour is traced
    on it at the given level (sub-pixel); otherwise on the binary mask.
    """
    mask8 = np.ascontiguousarray(mask.astype(np.uint8))
    n_labels, labels, stats, centroids = cv2.connectedComponentsWithStats(
        mask8, connectivity=8)
    src = np.asarray(image, dtype=float) if image is not None \
        else mask.astype(float)
    blobs = []
    for lab in range(1, n_labels):
        area = int(stats[lab, cv2.CC_STAT_AREA])
        if area < min_area:
            continue
        c0 = int(stats[lab, cv2.CC_STAT_LEFT])
        r0 = int(stats[lab, cv2.CC_STAT_TOP])
        c1 = c0 + int(stats[lab, cv2.CC_STAT_WIDTH])
        r1 = r0 + int(stats[lab, cv2.CC_STAT_HEIGHT])
        contour = _blob_contour(src, labels == lab, (r0, c0, r1, c1), level)
        perim = float(cv2.arcLength(
            contour.astype(np.float32).reshape(-1, 1, 2), True)) \
            if len(contour) >= 3 else 0.0
        blobs.append(Blob(label=lab, area=area, bbox=(r0, c0, r1, c1),
                          centroid=(float(centroids[lab, 0]),
                                    float(centroids[lab, 1])),
                          perimeter=perim, contour=contour))
    return blobs


def _simplify_corners(contour: np.ndarray, tol: float, merge_dist: float,
                      min_turn_deg: float) -> int:
    """Corner count of the simplified closed boundary."""
    if len(contour) < 3:
        return 0
    pts = contour.astype(np.float32).reshape(-1, 1, 2)
    approx = cv2.approxPolyDP(pts, tol, True)[:, 0, :].astype(float)
    # collapse clusters of nearby vertices (blunt rasterized tips)
    merged: list[np.ndarray] = []
    for p in approx:
        if merged and float(np.hypot(*(p - merged[-1]))) < merge_dist:
            merged[-1] = (merged[-1] + p) / 2.0
        else:
            merged.append(p.copy())
    if len(merged) > 1 and float(np.hypot(*(merged[0] - merged[-1]))) < merge_dist:
        merged[0] = (merged[0] + merged[-1]) / 2.0
        merged.pop()
    k = len(merged)
    if k <= 2:
        return k
    # keep only vertices where the boundary genuinely turns
    corners = 0
    for i in range(k):
        v1 = merged[i] - merged[i - 1]
        v2 = merged[(i + 1) % k] - merged[i]
        n1 = float(np.hypot(*v1))
        n2 = float(np.hypot(*v2))
        if n1 == 0.0 or n2 == 0.0:
            continue
        cosang = float(np.clip(np.dot(v1, v2) / (n1 * n2), -1.0, 1.0))
        if math.degrees(math.acos(cosang)) >= min_turn_deg:
            corners += 1
    return corners


def classify_shape(blob: Blob, tol: float = DP_TOLERANCE,
                   merge_dist: float = MERGE_DISTANCE,
                   min_turn_deg: float = MIN_TURN_DEG):
    """(category, confident, corner_count) for one blob.

    Corner counts of 3, 4, 5 are confident; everything else snaps to the
    nearest category and is flagged low-confidence.
    """
    corners = _simplify_corners(blob.contour, tol, merge_dist, min_turn_deg)
    vertex_map = {3: "triangle", 4: "square", 5: "pentagon"}
    if corners in vertex_map:
        return vertex_map[corners], True, corners
    nearest = min((3, 4, 5), key=lambda k: abs(k - corners))
    return vertex_map[nearest], False, corners


def count_objects(image: np.ndarray, threshold: float = 0.5,
                  min_area: int = MIN_BLOB_AREA):
    """Per-category object counts for one [0,1] image.

    Returns (counts, low_confidence, diagnostics) where diagnostics holds
    one (area, corners, category, confident) tuple per counted blob.
    """
    img = np.asarray(image, dtype=float)
    mask = binarize(img, threshold)
    blobs = connected_components(mask, image=img, min_area=min_area,
                                 level=threshold)
    counts = {c: 0 for c in CATEGORIES}
    low_conf = False
    diags = []
    for blob in blobs:
        category, confident, corners = classify_shape(blob)
        counts[category] += 1
        low_conf |= not confident
        diags.append((blob.area, corners, category, confident))
    return counts, low_conf, diags


def violates_counting(counts: dict, profile: CountProfile) -> bool:
    """The counting-fact violation predicate for a count vector."""
    if any(counts.get(c, 0) not in profile.allowed_counts
           for c in CATEGORIES):
        return True
    if profile.require_nonempty and sum(counts.values()) == 0:
        return True
    return False


def judge(image: np.ndarray, profile: CountProfile,
          indicator=None, threshold: float = 0.5,
          min_area: int = MIN_BLOB_AREA) -> CountVerdict:
    """Full verdict for one generated image.

    is_hallucination = counting_ready AND counts violate the profile.
    The counting-ready indicator hook defaults to always ready, matching
    the evaluation protocol for this dataset family.
    """
    ready = bool(indicator(image)) if indicator is not None else True
    counts, low_conf, diags = count_objects(image, threshold, min_area)
    hallucinated = ready and violates_counting(counts, profile)
    return CountVerdict(counting_ready=ready, counts=counts,
                        is_hallucination=hallucinated,
                        low_confidence=low_conf, blob_diagnostics=diags)
