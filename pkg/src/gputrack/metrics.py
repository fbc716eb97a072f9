"""Frame- and track-level detection accuracy (FDA/SFDA, STDA/ATA) with optimal mappings.

Boxes are ``[xmin, ymin, xmax, ymax]`` in pixel units. Ground truth and tracks
are both represented as ``{object_id: {frame: box}}``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import __version__

Boxes = dict  # object id -> {frame (int): box}


def overlap_ratio(a, b) -> float:
    """Intersection over union of two axis-aligned rectangles."""
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union) if union > 0 else 0.0


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian_assign(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment (rectangular allowed, min(n, m) pairs).

    Ties between optimal assignments resolve toward low indices: walking the
    shorter side in order, each item takes the lowest-index partner that still
    admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if n > m:
        return sorted((i, j) for j, i in hungarian_assign(cost.T))
    best = _optimal_cost(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()) * m)
    free_cols = list(range(m))
    fixed = 0.0
    pairs = []
    for i in range(n):
        for cj, j in enumerate(free_cols):
            rest = np.delete(cost[i + 1:][:, free_cols], cj, axis=1)
            if fixed + cost[i, j] + _optimal_cost(rest) <= best + tol:
                pairs.append((i, j))
                fixed += cost[i, j]
                free_cols.pop(cj)
                break
        else:  # pragma: no cover - some column always completes an optimum
            raise RuntimeError("assignment refinement failed")
    return pairs


def _frames_of(objs: Boxes) -> set[int]:
    out = set()
    for boxes in objs.values():
        out.update(int(f) for f in boxes)
    return out


def compute_fda(gt_boxes, det_boxes) -> float:
    """Overlap sum under the best one-to-one mapping over the mean object count."""
    gt_boxes = list(gt_boxes)
    det_boxes = list(det_boxes)
    ng, nd = len(gt_boxes), len(det_boxes)
    if ng == 0 and nd == 0:
        return 1.0
    if ng == 0 or nd == 0:
        return 0.0
    ov = np.array([[overlap_ratio(g, d) for d in det_boxes] for g in gt_boxes])
    pairs = hungarian_assign(-ov)
    total = sum(ov[i, j] for i, j in pairs)
    return float(total / ((ng + nd) / 2.0))


def fda_per_frame(gt: Boxes, tracks: Boxes, frames=None) -> dict[int, float]:
    """FDA at every frame where ground truth or output exists."""
    active = sorted(_frames_of(gt) | _frames_of(tracks)) if frames is None else sorted(frames)
    out = {}
    for t in active:
        g = [b[t] for b in gt.values() if t in b]
        d = [b[t] for b in tracks.values() if t in b]
        if g or d:
            out[t] = compute_fda(g, d)
    return out


def compute_sfda(gt: Boxes, tracks: Boxes) -> float:
    per = fda_per_frame(gt, tracks)
    if not per:
        return 0.0
    return float(sum(per.values()) / len(per))


def pair_term(g: dict, d: dict) -> float:
    """Sum of per-frame overlaps divided by the number of frames where either exists."""
    union = set(g) | set(d)
    if not union:
        return 0.0
    total = sum(overlap_ratio(g[t], d[t]) for t in set(g) & set(d))
    return float(total / len(union))


def compute_ata(gt: Boxes, tracks: Boxes):
    """Returns ``(stda, ata, mapping, terms)``.

    The mapping maximizes the summed pair terms; padding with zero-benefit dummy
    rows and columns lets any object stay unmapped. Pairs whose term is zero
    contribute nothing and are reported as unmapped.
    """
    gids = sorted(gt, key=str)
    tids = sorted(tracks, key=str)
    ng, nd = len(gids), len(tids)
    if ng == 0 and nd == 0:
        return 0.0, 0.0, [], {}
    terms = np.array([[pair_term(gt[g], tracks[d]) for d in tids] for g in gids]).reshape(ng, nd)
    size = ng + nd
    cost = np.zeros((size, size))
    cost[:ng, :nd] = -terms
    mapping = []
    stda = 0.0
    for i, j in hungarian_assign(cost):
        if i < ng and j < nd and terms[i, j] > 0:
            mapping.append((gids[i], tids[j]))
            stda += terms[i, j]
    ata = stda / ((ng + nd) / 2.0)
    term_dict = {(gids[i], tids[j]): float(terms[i, j]) for i in range(ng) for j in range(nd)}
    return float(stda), float(ata), mapping, term_dict


@dataclass
class EvalReport:
    fda_per_frame: dict
    sfda: float
    stda_terms: dict
    stda: float
    ata: float
    mapping: list
    false_positive_tracks: list
    missed_gt: list
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["fda_per_frame"] = {str(k): v for k, v in sorted(self.fda_per_frame.items())}
        d["stda_terms"] = [
            {"gt": str(g), "track": str(t), "term": v} for (g, t), v in sorted(self.stda_terms.items(), key=str)
        ]
        d["mapping"] = [[str(g), str(t)] for g, t in self.mapping]
        d["false_positive_tracks"] = [str(t) for t in self.false_positive_tracks]
        d["missed_gt"] = [str(g) for g in self.missed_gt]
        return d


def evaluate(gt: Boxes, tracks: Boxes, meta: dict | None = None) -> EvalReport:
    per = fda_per_frame(gt, tracks)
    sfda = float(sum(per.values()) / len(per)) if per else 0.0
    stda, ata, mapping, terms = compute_ata(gt, tracks)
    mapped_g = {g for g, _ in mapping}
    mapped_t = {t for _, t in mapping}
    return EvalReport(
        fda_per_frame=per,
        sfda=sfda,
        stda_terms=terms,
        stda=stda,
        ata=ata,
        mapping=mapping,
        false_positive_tracks=[t for t in sorted(tracks, key=str) if t not in mapped_t],
        missed_gt=[g for g in sorted(gt, key=str) if g not in mapped_g],
        meta=dict(meta or {}),
    )


def read_ground_truth(path) -> Boxes:
    doc = json.loads(Path(path).read_text())
    out = {}
    try:
        for obj in doc["objects"]:
            boxes = {}
            for f, b in obj["boxes"].items():
                b = [float(v) for v in b]
                if len(b) != 4 or not (b[0] < b[2] and b[1] < b[3]):
                    raise ValueError(f"malformed box {b} for object {obj['id']} frame {f}")
                boxes[int(f)] = b
            out[obj["id"]] = boxes
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed ground truth ({exc})") from exc
    return out


def write_report(path, report: EvalReport, csv_path=None) -> None:
    doc = {"header": {"tool": "gputrack", "version": __version__, **report.meta}, "report": report.to_json()}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "fda"])
            for t, v in sorted(report.fda_per_frame.items()):
                w.writerow([t, repr(float(v))])


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
