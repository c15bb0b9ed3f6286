"""ROI image handling: foreground mask, outer contour, resizing, augmentation.

Images are ``(height, width, 3)`` uint8 arrays. Point coordinates are
``(x, y)`` = ``(column, row)`` at pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_THRESHOLD = 10


class NoForeground(ValueError):
    pass


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def as_rgb(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    return image


@dataclass(frozen=True)
class ForegroundMask:
    bits: np.ndarray
    component_count: int

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


_EIGHT = np.ones((3, 3), dtype=bool)


def extract_mask(image, threshold: int = DEFAULT_THRESHOLD) -> ForegroundMask:
    """Foreground = ``max(R, G, B) > threshold``, reduced to the largest
    8-connected component (ties go to the component found first in raster
    order). ``component_count`` counts components before that reduction."""
    if not 0 <= threshold <= 255:
        raise ValueError("threshold must be in [0, 255]")
    image = as_rgb(image)
    raw = image.max(axis=2) > threshold
    labels, n = ndimage.label(raw, structure=_EIGHT)
    if n == 0:
        raise NoForeground("no pixel above threshold")
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        bits = labels == keep
    else:
        bits = raw
    return ForegroundMask(bits, int(n))


@dataclass(frozen=True)
class Contour:
    points: np.ndarray  # (N, 2) float (x, y), closed implicitly
    hull: np.ndarray    # (K, 2) counter-clockwise in image coordinates

    @property
    def degenerate(self) -> bool:
        return polygon_area(self.points) == 0.0


# Clockwise on screen (y grows downward), starting west.
_MOORE = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)]
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


def moore_trace(bits: np.ndarray) -> list[tuple[int, int]]:
    """Outer boundary of the foreground via Moore-neighbour following.

    Starts at the first foreground pixel in raster order and stops on
    Jacob's criterion (re-entering the start pixel from the same
    direction). One-pixel-wide spurs are walked out and back.
    """
    bits = np.asarray(bits, dtype=bool)
    ys, xs = np.nonzero(bits)
    if len(ys) == 0:
        raise NoForeground("empty mask")
    padded = np.pad(bits, 1)
    sy, sx = int(ys[0]) + 1, int(xs[0]) + 1
    start = (sx, sy)
    # raster-first pixel: its west neighbour is background
    back_dir = 0
    points = [start]
    cur = start
    max_steps = 4 * int(bits.sum()) + 8
    first_entry = None
    for _ in range(max_steps):
        nxt = None
        for k in range(1, 9):
            d = (back_dir + k) % 8
            dx, dy = _MOORE[d]
            cx, cy = cur[0] + dx, cur[1] + dy
            if padded[cy, cx]:
                nxt = (cx, cy)
                prev = (back_dir + k - 1) % 8
                pdx, pdy = _MOORE[prev]
                # backtrack expressed relative to the new pixel
                bx, by = cur[0] + pdx - cx, cur[1] + pdy - cy
                new_back = _MOORE_INDEX[(bx, by)]
                break
        if nxt is None:
            break  # isolated pixel
        if first_entry is None:
            first_entry = (nxt, new_back)
        elif cur == start and (nxt, new_back) == first_entry:
            break
        cur, back_dir = nxt, new_back
        points.append(cur)
    if len(points) > 1 and points[-1] == start:
        points.pop()
    return [(x - 1, y - 1) for x, y in points]


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; collinear points are dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def polygon_area(points) -> float:
    """Unsigned shoelace area of a closed polygon."""
    p = np.asarray(points, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def polygon_perimeter(points) -> float:
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        return 0.0
    return float(np.hypot(*(np.roll(p, -1, axis=0) - p).T).sum())


def trace_contour(mask) -> Contour:
    bits = mask.bits if isinstance(mask, ForegroundMask) else np.asarray(mask, dtype=bool)
    pts = np.array(moore_trace(bits), dtype=float)
    return Contour(pts, convex_hull(pts))


def point_in_convex(hull: np.ndarray, p, eps: float = 1e-9) -> bool:
    """True when ``p`` lies inside or on a counter-clockwise convex polygon."""
    if len(hull) == 1:
        return bool(np.allclose(hull[0], p))
    if len(hull) == 2:
        a, b = hull
        ab, ap = b - a, np.asarray(p) - a
        if abs(ab[0] * ap[1] - ab[1] * ap[0]) > eps:
            return False
        t = np.dot(ap, ab) / np.dot(ab, ab)
        return -eps <= t <= 1 + eps
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) < -eps:
            return False
    return True


# --- resampling -----------------------------------------------------------

def _bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, clamp: bool) -> np.ndarray:
    """Sample ``image`` at float pixel-center coordinates.

    With ``clamp`` the border is replicated; otherwise samples outside the
    image read black.
    """
    h, w = image.shape[:2]
    img = image.astype(np.float64)
    if clamp:
        xs = np.clip(xs, 0, w - 1)
        ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]

    def at(yy, xx):
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside[..., None], vals, 0.0)

    out = (at(y0, x0) * (1 - fx) * (1 - fy) + at(y0, x0 + 1) * fx * (1 - fy)
           + at(y0 + 1, x0) * (1 - fx) * fy + at(y0 + 1, x0 + 1) * fx * fy)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _resize(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (out_w, out_h) == (w, h):
        return image.copy()
    # half-pixel-center alignment
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear(image, gx, gy, clamp=True)


def resize_squash(image, side: int = 128) -> np.ndarray:
    """Bilinear resize to ``side x side``; aspect ratio is not kept."""
    if side < 1:
        raise ValueError("side must be >= 1")
    return _resize(as_rgb(image), side, side)


def resize_pad(image, side: int = 128) -> np.ndarray:
    """Shrink (never enlarge) so the long edge fits ``side``, then center on a
    black ``side x side`` canvas. An odd leftover pixel goes right/bottom."""
    if side < 1:
        raise ValueError("side must be >= 1")
    image = as_rgb(image)
    h, w = image.shape[:2]
    if max(h, w) > side:
        scale = side / max(h, w)
        nw = min(side, max(1, int(round(w * scale))))
        nh = min(side, max(1, int(round(h * scale))))
        image = _resize(image, nw, nh)
        h, w = nh, nw
    canvas = np.zeros((side, side, 3), dtype=np.uint8)
    top, left = (side - h) // 2, (side - w) // 2
    canvas[top:top + h, left:left + w] = image
    return canvas


# --- augmentation ---------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    zoom: float = 1.0
    shear_deg: float = 0.0

    def __post_init__(self):
        if not -180 <= self.rotation_deg <= 180:
            raise ValueError("rotation_deg outside [-180, 180]")
        if not 0.8 <= self.zoom <= 1.2:
            raise ValueError("zoom outside [0.8, 1.2]")
        if not -10 <= self.shear_deg <= 10:
            raise ValueError("shear_deg outside [-10, 10]")


@dataclass(frozen=True)
class AugmentRanges:
    max_rotation_deg: float = 180.0
    max_zoom_delta: float = 0.2
    max_shear_deg: float = 10.0
    flip_probability: float = 0.5

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            rotation_deg=float(rng.uniform(-self.max_rotation_deg, self.max_rotation_deg)),
            flip_h=bool(rng.random() < self.flip_probability),
            flip_v=bool(rng.random() < self.flip_probability),
            zoom=float(rng.uniform(1 - self.max_zoom_delta, 1 + self.max_zoom_delta)),
            shear_deg=float(rng.uniform(-self.max_shear_deg, self.max_shear_deg)),
        )


def affine_matrix(params: AugmentParams) -> np.ndarray:
    """2x2 forward map about the image center: zoom @ shear @ rotate @ flip.

    Positive rotation is counter-clockwise as seen on screen.
    """
    f = np.diag([-1.0 if params.flip_h else 1.0, -1.0 if params.flip_v else 1.0])
    t = math.radians(params.rotation_deg)
    c, s = math.cos(t), math.sin(t)
    # y axis points down, so screen-CCW has +sin in the top-right slot
    r = np.array([[c, s], [-s, c]])
    sh = np.array([[1.0, math.tan(math.radians(params.shear_deg))], [0.0, 1.0]])
    return params.zoom * sh @ r @ f


def augment(image, params: AugmentParams | None = None, seed: int | None = None,
            ranges: AugmentRanges = AugmentRanges()) -> np.ndarray:
    """Apply one affine augmentation with bilinear sampling and black fill.

    When ``params`` is omitted they are drawn from ``ranges`` with ``seed``.
    """
    image = as_rgb(image)
    if params is None:
        params = ranges.sample(np.random.default_rng(seed))
    h, w = image.shape[:2]
    a = affine_matrix(params)
    if np.array_equal(a, np.eye(2)):
        return image.copy()
    inv = np.linalg.inv(a)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    gx, gy = np.meshgrid(np.arange(w, dtype=float) - cx, np.arange(h, dtype=float) - cy)
    sx = inv[0, 0] * gx + inv[0, 1] * gy + cx
    sy = inv[1, 0] * gx + inv[1, 1] * gy + cy
    # snap float noise so exact lattice maps (flips, 90/180 turns) stay exact
    sx = np.where(np.abs(sx - np.rint(sx)) < 1e-9, np.rint(sx), sx)
    sy = np.where(np.abs(sy - np.rint(sy)) < 1e-9, np.rint(sy), sy)
    return _bilinear(image, sx, sy, clamp=False)
