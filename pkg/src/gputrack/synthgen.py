"""Deterministic colored-square videos with exact ground-truth boxes.

Squares move along straight segments with integer-rounded centers. A square of
side ``s`` centered at ``(cx, cy)`` covers pixel columns ``cx - s//2`` through
``cx - s//2 + s - 1`` (rows likewise). Ground-truth boxes use pixel-edge
coordinates ``[x0, y0, x0 + s, y0 + s]``, so they enclose every covered pixel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extract import Frame, write_manifest, write_ppm

SCENARIOS = ("cross-continue", "cross-reverse", "three-squares")
WIDTH = HEIGHT = 500
N_FRAMES = 200
MEET = 100
RED = (255, 0, 0)
GREEN = (0, 255, 0)
BLUE = (0, 0, 255)


@dataclass
class SquareSpec:
    name: str
    color: tuple[int, int, int]
    sizes: np.ndarray  # (T,) side length per frame
    centers: np.ndarray  # (T, 2) integer (x, y) per frame
    z_order: int

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.centers = np.asarray(self.centers, dtype=np.int64)
        if self.sizes.shape[0] != self.centers.shape[0]:
            raise ValueError("size and path timelines differ in length")
        if np.any(self.sizes < 1):
            raise ValueError("square sizes must be >= 1")

    def box(self, f: int) -> list[int]:
        """Pixel-edge box [x0, y0, x1, y1] at 1-based frame ``f``."""
        s = int(self.sizes[f - 1])
        cx, cy = (int(v) for v in self.centers[f - 1])
        x0, y0 = cx - s // 2, cy - s // 2
        return [x0, y0, x0 + s, y0 + s]


def _round(v):
    return np.floor(np.asarray(v, dtype=float) + 0.5).astype(np.int64)


def _piecewise(points, T=N_FRAMES, meet=MEET):
    """Linear interpolation through ``points`` at frames 1, meet, T (per coordinate)."""
    f = np.arange(1, T + 1, dtype=float)
    knots = np.array([1.0, float(meet), float(T)])
    pts = np.asarray(points, dtype=float)
    return np.stack([np.interp(f, knots, pts[:, j]) for j in range(pts.shape[1])], axis=1)


def scenario_squares(name: str) -> list[SquareSpec]:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    mid = HEIGHT // 2
    left, right, center = 60, 440, WIDTH // 2
    if name == "cross-continue":
        red_path = [(left, mid), (center, mid), (right, mid)]
        blue_path = [(right, mid), (center, mid), (left, mid)]
    else:
        red_path = [(left, mid), (center, mid), (left, mid)]
        blue_path = [(right, mid), (center, mid), (right, mid)]
    ones = np.ones(N_FRAMES)
    red = SquareSpec("red", RED, 20 * ones, _round(_piecewise(red_path)), 0)
    blue_size = 15 if name == "three-squares" else 20
    blue = SquareSpec("blue", BLUE, blue_size * ones, _round(_piecewise(blue_path)), 2)
    if name != "three-squares":
        return [red, blue]
    # green starts above the meeting point, equidistant from red and blue,
    # and leaves at 20 degrees from its incoming (downward) direction
    start = (center, 60)
    travel = mid - 60
    angle = np.deg2rad(20.0)
    end = (center + travel * np.sin(angle), mid + travel * np.cos(angle))
    green_sizes = _round(_piecewise([(50,), (10,), (50,)])[:, 0])
    green = SquareSpec("green", GREEN, green_sizes, _round(_piecewise([start, (center, mid), end])), 1)
    return [red, green, blue]


def render_frame(squares: list[SquareSpec], f: int) -> Frame:
    px = np.zeros((HEIGHT, WIDTH, 3), dtype=np.uint8)
    for sq in sorted(squares, key=lambda s: s.z_order):
        x0, y0, x1, y1 = sq.box(f)
        px[max(y0, 0):max(min(y1, HEIGHT), 0), max(x0, 0):max(min(x1, WIDTH), 0)] = sq.color
    return Frame(WIDTH, HEIGHT, px)


def ground_truth(squares: list[SquareSpec]) -> dict:
    return {
        "objects": [
            {"id": sq.name, "boxes": {str(f): sq.box(f) for f in range(1, N_FRAMES + 1)}}
            for sq in squares
        ]
    }


def scenario_description(name: str, squares: list[SquareSpec]) -> dict:
    return {
        "scenario": name,
        "width": WIDTH,
        "height": HEIGHT,
        "frames": N_FRAMES,
        "squares": [
            {
                "name": sq.name,
                "color": list(sq.color),
                "z_order": sq.z_order,
                "start": sq.centers[0].tolist(),
                "meet": sq.centers[MEET - 1].tolist(),
                "end": sq.centers[-1].tolist(),
                "size_start": int(sq.sizes[0]),
                "size_meet": int(sq.sizes[MEET - 1]),
                "size_end": int(sq.sizes[-1]),
            }
            for sq in squares
        ],
    }


def generate_scenario(name: str, out_dir) -> Path:
    """Write frames, manifest.json, gt.json and scenario.json; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    squares = scenario_squares(name)
    names = []
    for f in range(1, N_FRAMES + 1):
        fname = f"f{f:04d}.ppm"
        write_ppm(out / fname, render_frame(squares, f))
        names.append(fname)
    manifest = out / "manifest.json"
    write_manifest(manifest, names, WIDTH, HEIGHT, {"scenario": name})
    (out / "gt.json").write_text(json.dumps(ground_truth(squares), indent=1) + "\n")
    (out / "scenario.json").write_text(json.dumps(scenario_description(name, squares), indent=1) + "\n")
    return manifest
