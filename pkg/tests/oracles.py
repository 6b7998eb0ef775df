"""Independent brute-force oracles used to cross-check the production
implementations. Everything here is deliberately written as plain loops
over plain Python containers, structured differently from the library
code, and is never imported by the package itself."""

from __future__ import annotations

import itertools
import math

import numpy as np

from herdpose.core import BBox, Instance, iou


def raster_iou(a: BBox, b: BBox) -> float:
    """Pixel-membership IoU for integer-coordinate boxes."""
    xs = range(int(min(a.x, b.x)), int(max(a.x2, b.x2)))
    ys = range(int(min(a.y, b.y)), int(max(a.y2, b.y2)))
    inter = union = 0
    for x in xs:
        for y in ys:
            cx, cy = x + 0.5, y + 0.5
            in_a = a.x < cx < a.x2 and a.y < cy < a.y2
            in_b = b.x < cx < b.x2 and b.y < cy < b.y2
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union if union else 0.0


def brute_nms(preds, thr):
    """Highest-score maximal conflict-free subset, picked one at a time."""
    pool = list(preds)
    kept = []
    while pool:
        best = max(pool, key=lambda p: (p.score, -p.id))
        kept.append(best)
        pool = [p for p in pool if p is not best and iou(p.bbox, best.bbox) < thr]
    return kept


def brute_match(preds, gts, thr):
    """Greedy confidence-ordered claim of the best free ground truth.

    Returns (pairs, unmatched pred ids, unmatched gt ids) with pairs as
    (pred id, gt id, iou) in processing order.
    """
    candidates = {}
    for p in preds:
        for g in gts:
            v = iou(p.bbox, g.bbox)
            if v >= thr:
                candidates.setdefault(p.id, []).append((v, g.id))
    order = sorted(preds, key=lambda p: (-p.score, p.id))
    taken = set()
    pairs = []
    lost = []
    for p in order:
        options = [(v, gid) for (v, gid) in candidates.get(p.id, []) if gid not in taken]
        if not options:
            lost.append(p.id)
            continue
        v, gid = max(options, key=lambda t: (t[0], -t[1]))
        taken.add(gid)
        pairs.append((p.id, gid, v))
    free_gts = sorted(g.id for g in gts if g.id not in taken)
    return pairs, lost, free_gts


def brute_ap(preds_by_frame, gts_by_frame, thr):
    """Rank-cut PR curve: re-run matching from scratch at every cut size,
    then integrate the precision envelope."""
    ranked = []
    for key, preds in preds_by_frame.items():
        for p in preds:
            ranked.append((key, p))
    ranked.sort(key=lambda t: (-t[1].score, t[0], t[1].id))
    n_gt = sum(len(v) for v in gts_by_frame.values())
    if n_gt == 0:
        raise ValueError("no ground truth")

    points = []
    for k in range(1, len(ranked) + 1):
        head = ranked[:k]
        per_frame = {}
        for key, p in head:
            per_frame.setdefault(key, []).append(p)
        tp = 0
        for key, preds in per_frame.items():
            pairs, _, _ = brute_match(preds, gts_by_frame.get(key, ()), thr)
            tp += len(pairs)
        points.append((tp / n_gt, tp / k))

    area = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        best_p = max(p for (_, p) in points[i:])
        area += (r - prev_r) * best_p
        prev_r = r
    return area, points


def brute_min_assignment_cost(cost: np.ndarray) -> float:
    """Minimum total cost over all maximal injective assignments."""
    n, m = cost.shape
    k = min(n, m)
    rows = range(n)
    cols = range(m)
    best = math.inf
    for rsub in itertools.combinations(rows, k):
        for csub in itertools.permutations(cols, k):
            total = sum(cost[r, c] for r, c in zip(rsub, csub))
            best = min(best, total)
    return best


def grid_coverage_ok(grid, frame_w: int, frame_h: int) -> bool:
    """Every pixel of the frame is inside at least one tile."""
    covered = np.zeros((frame_h, frame_w), dtype=bool)
    for t in grid.tiles:
        covered[t.y0 : t.y0 + t.side, t.x0 : t.x0 + t.side] = True
    return bool(covered.all())


def coverage_depth(grid, frame_w: int, frame_h: int) -> np.ndarray:
    depth = np.zeros((frame_h, frame_w), dtype=int)
    for t in grid.tiles:
        depth[t.y0 : t.y0 + t.side, t.x0 : t.x0 + t.side] += 1
    return depth
