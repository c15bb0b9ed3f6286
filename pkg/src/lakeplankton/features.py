"""Morphological and intensity features of a segmented ROI, and feature
standardization.

Geometry conventions
--------------------
* Contour polygons pass through boundary pixel centers, so a filled
  ``w x h`` rectangle has ``contour_area = (w - 1) * (h - 1)``.
* ``rect_width``/``rect_height`` count pixels of the axis-aligned bounding box.
* Axis lengths come from the ellipse with the same second central moments as
  the mask (``4 * sqrt(eigenvalue)``).
* ``eccentricity`` is ``minor / major`` (1 for a disk), not the conic
  eccentricity.
* ``orientation`` is the major-axis angle in degrees, counter-clockwise from
  the +x axis with y pointing up, in ``(-90, 90]``.
* ``estimated_volume`` treats the object as a prolate spheroid about the
  major axis.

Dimensional features are multiplied by ``scale`` (mm per pixel) to the
appropriate power; ratios and image moments are left in pixel units.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import (
    DEFAULT_THRESHOLD,
    Contour,
    ForegroundMask,
    as_rgb,
    extract_mask,
    polygon_area,
    polygon_perimeter,
    trace_contour,
)

CHANNELS = ("gray", "red", "green", "blue")
LUMA = np.array([0.299, 0.587, 0.114])

SHAPE_NAMES = (
    "area",
    "aspect_ratio",
    "eccentricity",
    "major_axis_length",
    "minor_axis_length",
    "orientation",
    "solidity",
    "estimated_volume",
)

_INTENSITY_STATS = (
    "mean",
    "25_percentile",
    "50_percentile",
    "75_percentile",
    "std",
    "mass_displace",
    "mass_displace_in_images",
    "mass_displace_in_minors",
) + tuple(f"moment_hu_{i}" for i in range(1, 8))

INTENSITY_NAMES = tuple(f"intensity_{ch}_{stat}" for ch in CHANNELS for stat in _INTENSITY_STATS)

RAW_MOMENTS = ("m00", "m10", "m01", "m20", "m11", "m02", "m30", "m21", "m12", "m03")
CENTRAL_MOMENTS = ("mu20", "mu11", "mu02", "mu30", "mu21", "mu12", "mu03")

EXTRA_NAMES = (
    "extent",
    "equivalent_diameter",
    "contour_area",
    "contour_perimeter",
    "hull_area",
    "hull_perimeter",
    "compactness",
    "roundness",
    "convexity",
    "w_rot",
    "h_rot",
    "angle_rot",
    "rect_width",
    "rect_height",
    "rect_area",
) + tuple(f"moment_{m}" for m in RAW_MOMENTS + CENTRAL_MOMENTS)

FEATURE_NAMES = SHAPE_NAMES + INTENSITY_NAMES + EXTRA_NAMES

# exponent of the mm-per-pixel scale carried by each dimensional feature
_SCALE_POWER = {
    "area": 2, "major_axis_length": 1, "minor_axis_length": 1, "estimated_volume": 3,
    "equivalent_diameter": 1, "contour_area": 2, "contour_perimeter": 1,
    "hull_area": 2, "hull_perimeter": 1, "w_rot": 1, "h_rot": 1,
    "rect_width": 1, "rect_height": 1, "rect_area": 2,
}
_SCALE_POWER.update({f"intensity_{ch}_mass_displace": 1 for ch in CHANNELS})

CONVENTIONS = {
    "contour": "8-connected Moore trace through pixel centers",
    "axes": "equal-second-moment ellipse, length 4*sqrt(eigenvalue)",
    "eccentricity": "minor_axis_length / major_axis_length",
    "estimated_volume": "prolate spheroid 4/3*pi*(major/2)*(minor/2)**2",
    "grayscale": "0.299 R + 0.587 G + 0.114 B",
    "intensity_pixels": "foreground mask only",
    "mass_displace_in_images": "divided by the image diagonal in pixels",
    "percentiles": "linear interpolation",
}


@dataclass(frozen=True)
class EllipseFit:
    major_len: float
    minor_len: float
    orientation_deg: float


@dataclass
class FeatureVector:
    values: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES
    scale_mm_per_px: float = 1.0
    degenerate: bool = False

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def _moments(weights: np.ndarray, order: int = 3):
    """Raw moments m[p, q] = sum w * x**p * y**q and central moments about the
    weighted centroid, both as ``(order + 1, order + 1)`` arrays."""
    h, w = weights.shape
    x = np.arange(w, dtype=np.float64)
    y = np.arange(h, dtype=np.float64)
    wf = weights.astype(np.float64)
    xp = np.vstack([x ** p for p in range(order + 1)])  # (order+1, w)
    yq = np.vstack([y ** q for q in range(order + 1)])  # (order+1, h)
    raw = xp @ wf.T @ yq.T
    m00 = raw[0, 0]
    if m00 == 0:
        return raw, np.zeros_like(raw), (0.0, 0.0)
    cx, cy = raw[1, 0] / m00, raw[0, 1] / m00
    dxp = np.vstack([(x - cx) ** p for p in range(order + 1)])
    dyq = np.vstack([(y - cy) ** q for q in range(order + 1)])
    central = dxp @ wf.T @ dyq.T
    return raw, central, (cx, cy)


def hu_moments(weights: np.ndarray) -> np.ndarray:
    """The seven Hu invariants of a non-negative 2-D weight image."""
    _, mu, _ = _moments(weights)
    m00 = mu[0, 0]
    if m00 <= 0:
        return np.zeros(7)

    def eta(p, q):
        return mu[p, q] / m00 ** (1 + (p + q) / 2)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    a, b = n30 + n12, n21 + n03
    return np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11 ** 2,
        (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
        a ** 2 + b ** 2,
        (n30 - 3 * n12) * a * (a ** 2 - 3 * b ** 2) + (3 * n21 - n03) * b * (3 * a ** 2 - b ** 2),
        (n20 - n02) * (a ** 2 - b ** 2) + 4 * n11 * a * b,
        (3 * n21 - n03) * a * (a ** 2 - 3 * b ** 2) - (n30 - 3 * n12) * b * (3 * a ** 2 - b ** 2),
    ])


def fit_ellipse(bits: np.ndarray) -> EllipseFit:
    _, mu, _ = _moments(bits, order=2)
    n = mu[0, 0]
    if n == 0:
        return EllipseFit(0.0, 0.0, 0.0)
    a, c = mu[2, 0] / n, mu[0, 2] / n
    # flip y so angles are counter-clockwise on screen
    b = -mu[1, 1] / n
    root = math.sqrt(((a - c) / 2) ** 2 + b ** 2)
    l1 = (a + c) / 2 + root
    l2 = max((a + c) / 2 - root, 0.0)
    theta = 0.5 * math.degrees(math.atan2(2 * b, a - c))
    if theta <= -90:
        theta += 180
    return EllipseFit(4 * math.sqrt(l1), 4 * math.sqrt(l2), theta + 0.0)


def min_area_rect(hull: np.ndarray) -> tuple[float, float, float]:
    """(w_rot, h_rot, angle_rot) of the minimum-area enclosing rectangle.

    Rotating calipers: the optimum has one side collinear with a hull edge,
    so every edge direction is tried. ``angle_rot`` is the direction of the
    ``w_rot`` side in degrees, in ``[0, 90)``.
    """
    if len(hull) < 2:
        return 0.0, 0.0, 0.0
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    keep = lengths > 0
    u = edges[keep] / lengths[keep, None]
    v = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pu = hull @ u.T
    pv = hull @ v.T
    widths = pu.max(axis=0) - pu.min(axis=0)
    heights = pv.max(axis=0) - pv.min(axis=0)
    i = int(np.argmin(widths * heights))
    w, h = float(widths[i]), float(heights[i])
    angle = math.degrees(math.atan2(-u[i, 1], u[i, 0])) % 180.0
    if angle >= 90.0:
        angle -= 90.0
        w, h = h, w
    return w, h, angle


def _degenerate(contour: Contour) -> bool:
    return polygon_area(contour.points) == 0.0


def shape_features(mask: ForegroundMask, contour: Contour, scale: float = 1.0):
    """Return ``(features, degenerate)``; every value is 0 when degenerate."""
    bits = mask.bits
    if _degenerate(contour):
        return dict.fromkeys(SHAPE_NAMES, 0.0), True
    ys, xs = np.nonzero(bits)
    bw = float(xs.max() - xs.min() + 1)
    bh = float(ys.max() - ys.min() + 1)
    ell = fit_ellipse(bits)
    degenerate = ell.minor_len == 0.0
    hull_area = polygon_area(contour.hull)
    out = {
        "area": float(len(xs)),
        "aspect_ratio": bw / bh,
        "eccentricity": ell.minor_len / ell.major_len if ell.major_len > 0 else 0.0,
        "major_axis_length": ell.major_len,
        "minor_axis_length": ell.minor_len,
        "orientation": ell.orientation_deg,
        "solidity": polygon_area(contour.points) / hull_area if hull_area > 0 else 0.0,
        "estimated_volume": 4.0 / 3.0 * math.pi * (ell.major_len / 2) * (ell.minor_len / 2) ** 2,
    }
    return _apply_scale(out, scale), degenerate


def extra_shape_features(mask: ForegroundMask, contour: Contour, scale: float = 1.0):
    """Return ``(features, degenerate)``; every value is 0 when the contour
    encloses no area."""
    if _degenerate(contour):
        return dict.fromkeys(EXTRA_NAMES, 0.0), True
    bits = mask.bits
    ys, xs = np.nonzero(bits)
    rect_w = float(xs.max() - xs.min() + 1)
    rect_h = float(ys.max() - ys.min() + 1)
    area = polygon_area(contour.points)
    perim = polygon_perimeter(contour.points)
    hull_area = polygon_area(contour.hull)
    hull_perim = polygon_perimeter(contour.hull)
    w_rot, h_rot, angle_rot = min_area_rect(contour.hull)
    raw, central, _ = _moments(bits)
    out = {
        "extent": area / (rect_w * rect_h),
        "equivalent_diameter": math.sqrt(4 * area / math.pi),
        "contour_area": area,
        "contour_perimeter": perim,
        "hull_area": hull_area,
        "hull_perimeter": hull_perim,
        "compactness": perim ** 2 / (4 * math.pi * area),
        "roundness": 4 * math.pi * area / hull_perim ** 2,
        "convexity": hull_perim / perim,
        "w_rot": w_rot,
        "h_rot": h_rot,
        "angle_rot": angle_rot,
        "rect_width": rect_w,
        "rect_height": rect_h,
        "rect_area": rect_w * rect_h,
    }
    for name in RAW_MOMENTS:
        out[f"moment_{name}"] = float(raw[int(name[1]), int(name[2])])
    for name in CENTRAL_MOMENTS:
        out[f"moment_{name}"] = float(central[int(name[2]), int(name[3])])
    return _apply_scale(out, scale), False


def channel_planes(image: np.ndarray) -> dict[str, np.ndarray]:
    rgb = as_rgb(image).astype(np.float64)
    return {
        "gray": rgb @ LUMA,
        "red": rgb[:, :, 0],
        "green": rgb[:, :, 1],
        "blue": rgb[:, :, 2],
    }


def intensity_features(image, mask: ForegroundMask, minor_len: float, scale: float = 1.0):
    """Per-channel statistics over foreground pixels.

    ``minor_len`` is the unscaled minor axis length in pixels; it is only used
    for ``mass_displace_in_minors`` (emitted as 0 when it is 0).
    """
    bits = mask.bits
    if not bits.any():
        raise ValueError("empty mask")
    h, w = bits.shape
    diagonal = math.hypot(w, h)
    flat_idx = np.flatnonzero(bits)
    out = {}
    for ch, plane in channel_planes(image).items():
        vals = plane.ravel()[flat_idx]
        p25, p50, p75 = np.percentile(vals, [25, 50, 75])
        weights = np.where(bits, plane, 0.0)
        # first maximum in row-major order among foreground pixels
        peak = flat_idx[int(np.argmax(vals))]
        py, px = divmod(int(peak), w)
        _, _, (cx, cy) = _moments(weights, order=1)
        displace = math.hypot(px - cx, py - cy) if vals.sum() > 0 else 0.0
        pre = f"intensity_{ch}_"
        out[pre + "mean"] = float(vals.mean())
        out[pre + "25_percentile"] = float(p25)
        out[pre + "50_percentile"] = float(p50)
        out[pre + "75_percentile"] = float(p75)
        out[pre + "std"] = float(vals.std())
        out[pre + "mass_displace"] = displace
        out[pre + "mass_displace_in_images"] = displace / diagonal
        out[pre + "mass_displace_in_minors"] = displace / minor_len if minor_len > 0 else 0.0
        for i, v in enumerate(hu_moments(weights), start=1):
            out[pre + f"moment_hu_{i}"] = float(v)
    return _apply_scale(out, scale)


def _apply_scale(values: dict, scale: float) -> dict:
    if scale == 1.0:
        return values
    return {k: v * scale ** _SCALE_POWER.get(k, 0) for k, v in values.items()}


def extract_features(image, threshold: int = DEFAULT_THRESHOLD, scale: float = 1.0) -> FeatureVector:
    """Full canonical feature vector of one ROI image."""
    image = as_rgb(image)
    mask = extract_mask(image, threshold)
    contour = trace_contour(mask)
    shape, deg1 = shape_features(mask, contour, scale)
    extra, deg2 = extra_shape_features(mask, contour, scale)
    minor_px = shape["minor_axis_length"] / scale
    inten = intensity_features(image, mask, minor_px, scale)
    merged = {**shape, **inten, **extra}
    values = np.array([merged[n] for n in FEATURE_NAMES], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = [n for n, v in zip(FEATURE_NAMES, values) if not math.isfinite(v)]
        raise ValueError(f"non-finite features: {bad}")
    return FeatureVector(values, FEATURE_NAMES, scale, deg1 or deg2)


# --- standardization ------------------------------------------------------

class NotFitted(RuntimeError):
    pass


class TooFewSamples(ValueError):
    pass


@dataclass
class Standardizer:
    """Per-feature z-scoring fit on one split and reused unchanged elsewhere."""

    epsilon: float = 1e-8
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    names: tuple[str, ...] = ()
    fit_split: str | None = None
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def fitted(self) -> bool:
        return self.means is not None

    def transform(self, matrix) -> np.ndarray:
        if not self.fitted:
            raise NotFitted("standardizer has not been fit")
        x = np.asarray(matrix, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.means):
            raise ValueError(f"expected {len(self.means)} columns, got shape {x.shape}")
        safe = np.where(self.constant, 1.0, self.stds)
        z = (x - self.means) / safe
        z[:, self.constant] = 0.0
        return z

    def to_dict(self) -> dict:
        if not self.fitted:
            raise NotFitted("standardizer has not been fit")
        return {
            "names": list(self.names),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "epsilon": self.epsilon,
            "fit_split": self.fit_split,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardizer":
        stds = np.array(doc["stds"], dtype=np.float64)
        eps = float(doc["epsilon"])
        return cls(eps, np.array(doc["means"], dtype=np.float64), stds,
                   tuple(doc["names"]), doc["fit_split"], stds < eps)

    def save(self, path, provenance: dict | None = None) -> None:
        doc = self.to_dict()
        if provenance:
            doc["provenance"] = provenance
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Standardizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_standardizer(matrix, names=(), split: str = "train", epsilon: float = 1e-8) -> Standardizer:
    """Population mean/std per column. Columns with std < epsilon are marked
    constant and map to 0."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooFewSamples("need at least 2 samples to fit a standardizer")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    return Standardizer(epsilon, means, stds, tuple(names), split, stds < epsilon)


# --- feature matrix files -------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_feature_csv(path, ids, labels, names, matrix, comment: str | None = None) -> str:
    """CSV with header ``id,label,<names>``; floats at 9 significant digits.
    An optional ``# comment`` line precedes the header. Returns the text and
    writes it to ``path`` unless that is None."""
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "label", *names])
    for sid, lab, row in zip(ids, labels, np.asarray(matrix)):
        writer.writerow([sid, lab, *map(_fmt, row)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _data_lines(path):
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if not line.startswith("#"):
                yield line


def read_feature_csv(path):
    """Returns ``(ids, labels, names, matrix)``."""
    reader = csv.reader(_data_lines(path))
    header = next(reader)
    if header[:2] != ["id", "label"]:
        raise ValueError(f"{path}: header must start with id,label")
    ids, labels, rows = [], [], []
    for rec in reader:
        ids.append(rec[0])
        labels.append(rec[1])
        rows.append([float(v) for v in rec[2:]])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)
    return ids, labels, tuple(header[2:]), matrix
