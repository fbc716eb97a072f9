"""Observation extraction: frame differencing plus hue histograms of small patches.

Pixel coordinates are ``(x, y) = (column, row)`` with the origin at the top-left
corner. Normalized coordinates put the frame center at the origin with y up.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .model import ObservationSet

log = logging.getLogger(__name__)


@dataclass
class Frame:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = np.repeat(px[:, :, None], 3, axis=2)
        if px.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel buffer shape {px.shape} does not match {self.height}x{self.width}x3")
        self.pixels = px.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class ExtractionConfig:
    diff_threshold: int = 30
    patch_half_width: int = 1
    hue_bins: int = 10
    max_obs_per_frame: int | None = 500
    saturation_floor: float = 0.1
    spatial_scale: float | None = None  # None -> max(W, H) / 20
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.diff_threshold <= 255:
            raise ValueError("diff_threshold must lie in [0, 255]")
        if self.patch_half_width < 0:
            raise ValueError("patch_half_width must be >= 0")
        if self.hue_bins < 2:
            raise ValueError("hue_bins must be >= 2")
        if self.max_obs_per_frame is not None and self.max_obs_per_frame < 1:
            raise ValueError("max_obs_per_frame must be positive")
        if not 0 <= self.saturation_floor <= 1:
            raise ValueError("saturation_floor must lie in [0, 1]")
        if self.spatial_scale is not None and not self.spatial_scale > 0:
            raise ValueError("spatial_scale must be positive")

    @property
    def L(self) -> int:
        return 2 * self.patch_half_width + 1

    def scale_for(self, width: int, height: int) -> float:
        return float(self.spatial_scale) if self.spatial_scale is not None else max(width, height) / 20.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- image IO

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> Frame:
    """Read a binary PPM (P6) or PGM (P5) file with maxval 255."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"{path}: unsupported image format {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after the header
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos)
    if data.size != size:
        raise ValueError(f"{path}: truncated pixel data")
    if channels == 1:
        return Frame(width, height, data.reshape(height, width))
    return Frame(width, height, data.reshape(height, width, 3))


def write_ppm(path, frame: Frame) -> None:
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(frame.pixels, dtype=np.uint8).tobytes())


def load_manifest(path) -> tuple[list[Path], int, int]:
    path = Path(path)
    doc = json.loads(path.read_text())
    try:
        names = doc["frames"]
        width, height = int(doc["width"]), int(doc["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed manifest ({exc})") from exc
    return [path.parent / n for n in names], width, height


def write_manifest(path, frame_names, width: int, height: int, extra: dict | None = None) -> None:
    doc = {"frames": list(frame_names), "width": int(width), "height": int(height)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------- features

def frame_difference(prev: Frame, cur: Frame, config: ExtractionConfig) -> np.ndarray:
    """(x, y) coordinates of pixels whose max-channel absolute change exceeds the threshold.

    Row-major order.
    """
    if (prev.width, prev.height) != (cur.width, cur.height):
        raise ValueError("frames differ in size")
    diff = np.abs(prev.pixels.astype(np.int16) - cur.pixels.astype(np.int16)).max(axis=2)
    rows, cols = np.nonzero(diff > config.diff_threshold)
    return np.stack([cols, rows], axis=1).astype(np.int64)


def hue_bin_image(frame: Frame, config: ExtractionConfig) -> np.ndarray:
    """Per-pixel hue bin; achromatic pixels go to bin 0."""
    rgb = frame.pixels.astype(float) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    delta = mx - mn
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(
        mx == r,
        np.mod((g - b) / safe, 6.0),
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    ) * 60.0
    bins = np.floor(hue * config.hue_bins / 360.0).astype(np.int64)
    bins = np.clip(bins, 0, config.hue_bins - 1)
    achromatic = (delta <= 0) | (sat < config.saturation_floor)
    bins[achromatic] = 0
    return bins


def _integral_counts(bins: np.ndarray, V: int) -> np.ndarray:
    """Zero-padded summed-area table of the one-hot hue image, shape (H+1, W+1, V)."""
    H, W = bins.shape
    table = np.zeros((H + 1, W + 1, V), dtype=np.int32)
    onehot = np.zeros((H, W, V), dtype=np.int32)
    np.put_along_axis(onehot, bins[..., None], 1, axis=2)
    table[1:, 1:] = onehot.cumsum(axis=0).cumsum(axis=1)
    return table


def patch_counts(table: np.ndarray, xy: np.ndarray, half: int) -> np.ndarray:
    H, W = table.shape[0] - 1, table.shape[1] - 1
    x = xy[:, 0]
    y = xy[:, 1]
    x0 = np.clip(x - half, 0, W)
    x1 = np.clip(x + half + 1, 0, W)
    y0 = np.clip(y - half, 0, H)
    y1 = np.clip(y + half + 1, 0, H)
    return (table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]).astype(np.int64)


def hue_histogram(frame: Frame, center, config: ExtractionConfig) -> np.ndarray:
    """Hue-bin counts of the L x L patch at pixel ``center = (x, y)``, clipped at borders."""
    x, y = int(center[0]), int(center[1])
    if not (0 <= x < frame.width and 0 <= y < frame.height):
        raise ValueError(f"center {center} outside the frame")
    half = config.patch_half_width
    bins = hue_bin_image(frame, config)[max(0, y - half):y + half + 1, max(0, x - half):x + half + 1]
    return np.bincount(bins.ravel(), minlength=config.hue_bins).astype(np.int64)


def normalize_coords(xy, width: int, height: int, config: ExtractionConfig) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    scale = config.scale_for(width, height)
    out = np.empty(xy.shape, dtype=float)
    out[..., 0] = (xy[..., 0] - width / 2.0) / scale
    out[..., 1] = (height / 2.0 - xy[..., 1]) / scale
    return out


def denormalize_coords(pos, width: int, height: int, config: ExtractionConfig) -> np.ndarray:
    pos = np.asarray(pos, dtype=float)
    scale = config.scale_for(width, height)
    out = np.empty(pos.shape, dtype=float)
    out[..., 0] = pos[..., 0] * scale + width / 2.0
    out[..., 1] = height / 2.0 - pos[..., 1] * scale
    return out


# ---------------------------------------------------------------- sequences

def extract_pair(prev: Frame, cur: Frame, t: int, config: ExtractionConfig):
    """Observations of frame ``t`` (1-based) from the pair (t-1, t)."""
    xy = frame_difference(prev, cur, config)
    cap = config.max_obs_per_frame
    if cap is not None and xy.shape[0] > cap:
        rng = np.random.default_rng([config.seed, t])
        keep = np.sort(rng.choice(xy.shape[0], size=cap, replace=False))
        xy = xy[keep]
    table = _integral_counts(hue_bin_image(cur, config), config.hue_bins)
    counts = patch_counts(table, xy, config.patch_half_width)
    pos = normalize_coords(xy, cur.width, cur.height, config)
    return pos, counts


def extract_sequence(frames, config: ExtractionConfig, workers: int = 1) -> ObservationSet:
    """Extract observations from an ordered frame list (frame 1 yields none)."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    return _assemble(len(frames), lambda i: frames[i], frames[0].width, frames[0].height, config, workers)


def extract_from_manifest(manifest_path, config: ExtractionConfig, workers: int = 1) -> ObservationSet:
    paths, width, height = load_manifest(manifest_path)
    if len(paths) < 2:
        raise ValueError("need at least two frames")

    def load(i):
        f = read_pnm(paths[i])
        if (f.width, f.height) != (width, height):
            raise ValueError(f"{paths[i]}: size {f.width}x{f.height} differs from manifest")
        return f

    return _assemble(len(paths), load, width, height, config, workers)


def _assemble(T, load, width, height, config, workers) -> ObservationSet:
    def job(t):
        return extract_pair(load(t - 2), load(t - 1), t, config)

    ts = list(range(2, T + 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, ts))
    else:
        results = [job(t) for t in ts]
    frames = np.concatenate([np.full(p.shape[0], t, dtype=np.int64) for t, (p, _) in zip(ts, results)])
    pos = np.concatenate([p for p, _ in results])
    counts = np.concatenate([c for _, c in results]).reshape(-1, config.hue_bins)
    log.info("extracted %d observations over %d frames", frames.size, T)
    meta = {"width": int(width), "height": int(height), "extraction": config.to_dict()}
    return ObservationSet(T, frames, pos, counts, meta)


def write_observations(path, obs: ObservationSet, extra_header: dict | None = None) -> None:
    header = {"tool": "gputrack", "version": __version__, "T": obs.T, "V": obs.V}
    header.update(obs.meta)
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps({"header": header}, sort_keys=True)]
    for t, x, c in zip(obs.frames.tolist(), obs.pos.tolist(), obs.counts.tolist()):
        lines.append(json.dumps({"frame": t, "pos": x, "counts": c}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_observations(path) -> ObservationSet:
    path = Path(path)
    header = None
    frames, pos, counts = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if "header" in rec:
                header = rec["header"]
                continue
            try:
                frames.append(int(rec["frame"]))
                pos.append([float(v) for v in rec["pos"]])
                counts.append([int(v) for v in rec["counts"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed observation record") from exc
    if header is None:
        raise ValueError(f"{path}: missing header line")
    V = int(header.get("V", len(counts[0]) if counts else 1))
    T = int(header.get("T", max(frames, default=1)))
    meta = {k: v for k, v in header.items() if k not in ("T", "V", "tool", "version")}
    return ObservationSet(T, np.array(frames, dtype=np.int64), np.array(pos, dtype=float).reshape(-1, 2),
                          np.array(counts, dtype=np.int64).reshape(-1, V), meta)
