from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    if call.excinfo is None:
        if call.when == "call":
            _CRITERIA.setdefault(number, (title, "PASS", ""))
        return
    detail = str(call.excinfo.value).strip().splitlines()[0][:160] if str(call.excinfo.value).strip() else ""
    _CRITERIA[number] = (title, "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


# --- synthetic ROI corpus -------------------------------------------------

def _shape_image(kind: str, rng: np.random.Generator) -> Image.Image:
    size = int(rng.integers(48, 80))
    w = size + int(rng.integers(-6, 7))
    h = size + int(rng.integers(-6, 7))
    img = Image.new("RGB", (w, h), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    cx, cy = w / 2 + rng.uniform(-3, 3), h / 2 + rng.uniform(-3, 3)
    r = min(w, h) * rng.uniform(0.25, 0.4)
    base = {"disk": (200, 120, 60), "rod": (90, 200, 110), "star": (120, 140, 230),
            "square": (220, 220, 90), "ring": (180, 90, 200)}[kind]
    color = tuple(int(np.clip(c + rng.normal(0, 15), 30, 255)) for c in base)
    theta = rng.uniform(0, 2 * math.pi)
    if kind == "disk":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif kind == "rod":
        pts = [(-r, -r / 4), (r, -r / 4), (r, r / 4), (-r, r / 4)]
        draw.polygon(_rot(pts, theta, cx, cy), fill=color)
    elif kind == "star":
        pts = []
        for k in range(10):
            rr = r if k % 2 == 0 else r * 0.45
            a = k * math.pi / 5
            pts.append((rr * math.cos(a), rr * math.sin(a)))
        draw.polygon(_rot(pts, theta, cx, cy), fill=color)
    elif kind == "square":
        s = r * 0.85
        draw.polygon(_rot([(-s, -s), (s, -s), (s, s), (-s, s)], theta, cx, cy), fill=color)
    elif kind == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        ri = r * 0.5
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=tuple(c // 3 for c in color))
    arr = np.asarray(img).astype(np.int16)
    noise = rng.integers(-12, 13, size=arr.shape)
    arr = np.where(arr.max(axis=2, keepdims=True) > 0, np.clip(arr + noise, 15, 255), 0)
    return Image.fromarray(arr.astype(np.uint8))


def _rot(pts, theta, cx, cy):
    c, s = math.cos(theta), math.sin(theta)
    return [(cx + x * c - y * s, cy + x * s + y * c) for x, y in pts]


def make_corpus(root: Path, counts: dict[str, int], seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    for kind, n in sorted(counts.items()):
        d = root / kind
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            ext = "png" if i % 3 else "jpg"
            _shape_image(kind, rng).save(d / f"{kind}_{i:03d}.{ext}", quality=95)
    return root


@pytest.fixture(scope="session")
def shape_corpus(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus")
    return make_corpus(root, {"disk": 24, "rod": 20, "star": 16, "square": 12, "ring": 8})


# --- raster helpers -------------------------------------------------------

def disk_mask(radius: float, size: int | None = None, supersample: int = 1,
              center: tuple[float, float] | None = None) -> np.ndarray:
    """Rasterized disk; with ``supersample`` > 1 the coverage is averaged over
    sub-pixels and returned as a float fraction in [0, 1]."""
    size = size or int(2 * radius + 10)
    cx, cy = center or ((size - 1) / 2, (size - 1) / 2)
    s = supersample
    off = (np.arange(s) + 0.5) / s - 0.5
    yy, xx = np.mgrid[:size, :size].astype(float)
    cover = np.zeros((size, size))
    for dy in off:
        for dx in off:
            cover += (xx + dx - cx) ** 2 + (yy + dy - cy) ** 2 <= radius ** 2
    return cover / (s * s)


def to_rgb(gray: np.ndarray) -> np.ndarray:
    g = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)
