"""Per-object tracks from a MAP latent state: centroids, confidence ovals and boxes.

Scene coordinates are converted back to pixel coordinates by inverting the
extraction normalization and then shifting by half a pixel: an extracted pixel
with column ``x`` covers the interval ``[x, x + 1)`` in the pixel-edge
convention of the ground-truth boxes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .extract import ExtractionConfig, denormalize_coords, normalize_coords
from .model import LatentState

PIXEL_CENTER_OFFSET = 0.5


def chi2_quantile_2dof(confidence: float) -> float:
    """Quantile of the chi-square distribution with 2 degrees of freedom."""
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    return float(-2.0 * np.log1p(-confidence))


@dataclass
class TrackEntry:
    frame: int
    centroid: np.ndarray  # pixel units
    cov: np.ndarray  # scene units
    oval: dict  # center (pixels), semi-axes (pixels), rotation (degrees, counterclockwise in scene)
    bbox: list  # [xmin, ymin, xmax, ymax] pixels

    def to_json(self) -> dict:
        return {
            "frame": int(self.frame),
            "centroid": [float(v) for v in self.centroid],
            "cov": np.asarray(self.cov, dtype=float).tolist(),
            "oval": self.oval,
            "bbox": [float(v) for v in self.bbox],
        }


@dataclass
class Track:
    object_id: int
    entries: list[TrackEntry] = field(default_factory=list)

    @property
    def frames(self) -> list[int]:
        return [e.frame for e in self.entries]

    def boxes(self) -> dict[int, list]:
        return {e.frame: list(e.bbox) for e in self.entries}


def oval_and_box(mean, cov, confidence: float):
    """Scene-space semi-axes/rotation of the confidence oval and the box half-widths."""
    cov = np.asarray(cov, dtype=float)
    c2 = chi2_quantile_2dof(confidence)
    evals, evecs = np.linalg.eigh(cov)
    axes = np.sqrt(c2 * evals[::-1])
    major = evecs[:, 1]
    angle = float(np.degrees(np.arctan2(major[1], major[0])))
    half = np.sqrt(c2 * np.array([cov[0, 0], cov[1, 1]]))
    return axes, angle, half


def scene_box_to_pixels(mean, half, width, height, config: ExtractionConfig) -> list[float]:
    lo = np.array([mean[0] - half[0], mean[1] + half[1]])  # top-left in scene (y up)
    hi = np.array([mean[0] + half[0], mean[1] - half[1]])
    p_lo = denormalize_coords(lo, width, height, config) + PIXEL_CENTER_OFFSET
    p_hi = denormalize_coords(hi, width, height, config) + PIXEL_CENTER_OFFSET
    return [float(p_lo[0]), float(p_lo[1]), float(p_hi[0]), float(p_hi[1])]


def pixel_box_to_scene(bbox, width, height, config: ExtractionConfig):
    """Inverse of :func:`scene_box_to_pixels`: scene (xmin, ymin, xmax, ymax)."""
    a = normalize_coords(np.array(bbox[:2]) - PIXEL_CENTER_OFFSET, width, height, config)
    b = normalize_coords(np.array(bbox[2:]) - PIXEL_CENTER_OFFSET, width, height, config)
    return float(a[0]), float(b[1]), float(b[0]), float(a[1])


def state_to_tracks(state: LatentState, confidence: float, width: int, height: int,
                    config: ExtractionConfig | None = None) -> list[Track]:
    """One track per cluster, present wherever it has members or positive size."""
    config = config or ExtractionConfig()
    chi2_quantile_2dof(confidence)
    frames = np.asarray(state.frames)
    assign = np.asarray(state.assignments)
    tracks = []
    for k in state.labels:
        sizes = state.sizes[k]
        has_members = np.zeros(state.T, dtype=bool)
        if frames.size:
            f = frames[assign == k]
            has_members[f - 1] = True
        present = has_members | (np.asarray(sizes) > 0)
        track = Track(int(k))
        for t in np.nonzero(present)[0] + 1:
            mean = state.means[k][t - 1]
            cov = state.covs[k][t - 1]
            if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
                raise ValueError(f"cluster {k} has no parameters at frame {t}")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"cluster {k} frame {t}: covariance is not positive definite") from exc
            axes, angle, half = oval_and_box(mean, cov, confidence)
            scale = config.scale_for(width, height)
            centroid = denormalize_coords(mean, width, height, config) + PIXEL_CENTER_OFFSET
            oval = {
                "center": [float(v) for v in centroid],
                "axes": [float(a * scale) for a in axes],
                "rotation": angle,
            }
            bbox = scene_box_to_pixels(mean, half, width, height, config)
            track.entries.append(TrackEntry(int(t), centroid, np.array(cov), oval, bbox))
        if track.entries:
            tracks.append(track)
    return tracks


def tracks_to_boxes(tracks: list[Track]) -> dict:
    return {t.object_id: t.boxes() for t in tracks}


def write_tracks(path, tracks: list[Track], header: dict | None = None) -> None:
    doc = {
        "header": {"tool": "gputrack", "version": __version__, **(header or {})},
        "tracks": [{"id": t.object_id, "entries": [e.to_json() for e in t.entries]} for t in tracks],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_tracks(path) -> dict:
    """Track file -> ``{track id: {frame: bbox}}`` for the evaluator."""
    doc = json.loads(Path(path).read_text())
    try:
        return {tr["id"]: {int(e["frame"]): [float(v) for v in e["bbox"]] for e in tr["entries"]}
                for tr in doc["tracks"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed track file ({exc})") from exc
