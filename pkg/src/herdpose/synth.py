"""Deterministic synthetic-herd generator: ground truth plus controllable
corrupted predictions, with an exact correspondence table.

Determinism contract: generation draws every random number from a single
numpy PCG64 generator seeded by the scenario, so the same scenario always
yields byte-identical serialized output. Platform-default generators are
deliberately not used. All serialized coordinates are rounded to the
canonical 6 decimal places at build time.

Animals move with constant speed, optionally noisy heading, and reflect
off the frame (or their private territory) so boxes never leave bounds.
Each body carries a rigid 8-keypoint template scaled to body size and
rotated to the heading; the proportions are invented for test realism and
carry no biological claim.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import (
    NUM_KEYPOINTS,
    BBox,
    FrameRecord,
    Instance,
    Keypoint,
    Pose,
    Skeleton,
    Source,
    Visibility,
)
from .ingest import Dataset, PredictionSet, round6

# Body-frame keypoint template in units of body length (x forward).
# Max radius stays under 0.5 so a square box of the body length always
# contains every keypoint at any heading.
POSE_TEMPLATE = (
    (0.50, 0.00),  # forehead
    (0.32, 0.14),  # ear_base_l
    (0.32, -0.14),  # ear_base_r
    (0.30, 0.00),  # skull_base
    (0.10, 0.00),  # shoulders
    (-0.38, 0.00),  # hips
    (0.34, 0.30),  # ear_tip_l
    (0.34, -0.30),  # ear_tip_r
)


@dataclass(frozen=True)
class MotionModel:
    speed_min: float = 0.5
    speed_max: float = 2.0
    heading_noise: float = 0.0  # radians/frame, stddev


@dataclass(frozen=True)
class CorruptionModel:
    bbox_jitter: float = 0.0  # px, stddev on x, y, w, h
    keypoint_jitter: float = 0.0  # px, stddev per coordinate
    false_positive_rate: float = 0.0  # expected count per frame
    miss_rate: float = 0.0
    # Score model: true positives skew high, false positives skew low, so
    # confidence-ranked metrics are nontrivial.
    tp_score_ab: tuple[float, float] = (8.0, 2.0)
    fp_score_ab: tuple[float, float] = (2.0, 8.0)


@dataclass(frozen=True)
class SynthScenario:
    seed: int = 0
    n_animals: int = 5
    frame_width: int = 1920
    frame_height: int = 1080
    n_frames: int = 30
    size_min: float = 8.0
    size_max: float = 70.0
    motion: MotionModel = MotionModel()
    corruption: CorruptionModel = CorruptionModel()
    video_id: str = "synth-000"
    # Ear slots are labeled OCCLUDED on bodies below this size, mirroring
    # how tiny calves get annotated in practice.
    occluded_ear_size: float = 12.0
    # Confine each animal to its own grid cell so trajectories never cross;
    # used by scenarios that need guaranteed-clean tracking/matching.
    separate_territories: bool = False

    def validate(self) -> None:
        if self.n_animals < 0 or self.n_frames < 0:
            raise ValueError("counts must be nonnegative")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValueError("frame dimensions must be positive")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError("require 0 < size_min <= size_max")
        if self.motion.speed_min < 0 or self.motion.speed_max < self.motion.speed_min:
            raise ValueError("require 0 <= speed_min <= speed_max")
        if self.motion.heading_noise < 0:
            raise ValueError("heading noise must be >= 0")
        c = self.corruption
        if not 0.0 <= c.miss_rate <= 1.0:
            raise ValueError(f"miss_rate must be in [0, 1], got {c.miss_rate}")
        if c.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")
        if c.bbox_jitter < 0 or c.keypoint_jitter < 0:
            raise ValueError("jitter sigmas must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


EAR_SLOTS = (1, 2, 6, 7)

FALSE_POSITIVE = None  # correspondence marker for injected detections


@dataclass(frozen=True)
class CorrespondenceEntry:
    video_id: str
    frame_index: int
    prediction_id: int
    animal_id: Optional[int]  # None marks an injected false positive


@dataclass(frozen=True)
class SynthOutput:
    dataset: Dataset
    predictions: PredictionSet
    correspondence: tuple[CorrespondenceEntry, ...]

    def correspondence_by_frame(self) -> dict:
        grouped: dict = {}
        for e in self.correspondence:
            grouped.setdefault((e.video_id, e.frame_index), {})[e.prediction_id] = (
                e.animal_id
            )
        return grouped


class _Animal:
    def __init__(self, length, cx, cy, vx, vy, bounds):
        self.length = length
        self.cx = cx
        self.cy = cy
        self.vx = vx
        self.vy = vy
        self.bounds = bounds  # (lo_x, hi_x, lo_y, hi_y) for the center

    def heading(self) -> float:
        if self.vx == 0.0 and self.vy == 0.0:
            return 0.0
        return math.atan2(self.vy, self.vx)

    def advance(self, rng, heading_noise: float) -> None:
        if heading_noise > 0 and (self.vx != 0.0 or self.vy != 0.0):
            theta = rng.normal(0.0, heading_noise)
            c, s = math.cos(theta), math.sin(theta)
            self.vx, self.vy = self.vx * c - self.vy * s, self.vx * s + self.vy * c
        lo_x, hi_x, lo_y, hi_y = self.bounds
        self.cx, self.vx = _bounce(self.cx + self.vx, self.vx, lo_x, hi_x)
        self.cy, self.vy = _bounce(self.cy + self.vy, self.vy, lo_y, hi_y)


def _bounce(p: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    """Reflect a coordinate into [lo, hi], flipping velocity on each hit."""
    if lo >= hi:
        return ((lo + hi) / 2.0, 0.0)
    while p < lo or p > hi:
        if p < lo:
            p = 2 * lo - p
            v = -v
        else:
            p = 2 * hi - p
            v = -v
    return p, v


def _territories(s: SynthScenario) -> list[tuple[float, float, float, float]]:
    if not s.separate_territories or s.n_animals <= 1:
        return [(0.0, float(s.frame_width), 0.0, float(s.frame_height))] * max(
            s.n_animals, 1
        )
    rows = max(1, int(math.floor(math.sqrt(s.n_animals))))
    cols = int(math.ceil(s.n_animals / rows))
    cell_w = s.frame_width / cols
    cell_h = s.frame_height / rows
    out = []
    for i in range(s.n_animals):
        r, c = divmod(i, cols)
        out.append((c * cell_w, (c + 1) * cell_w, r * cell_h, (r + 1) * cell_h))
    return out


def _body_pose(cx, cy, length, heading, occlude_ears: bool) -> Pose:
    c, s = math.cos(heading), math.sin(heading)
    kps = []
    for i, (tx, ty) in enumerate(POSE_TEMPLATE):
        x = cx + length * (tx * c - ty * s)
        y = cy + length * (tx * s + ty * c)
        vis = (
            Visibility.OCCLUDED
            if (occlude_ears and i in EAR_SLOTS)
            else Visibility.VISIBLE
        )
        kps.append(Keypoint(i, round6(x), round6(y), vis))
    return Pose(tuple(kps))


def _jitter_pose(pose: Pose, rng, sigma: float) -> Pose:
    kps = []
    for kp in pose:
        dx, dy = rng.normal(0.0, sigma, size=2) if sigma > 0 else (0.0, 0.0)
        kps.append(Keypoint(kp.index, round6(kp.x + dx), round6(kp.y + dy), kp.vis))
    return Pose(tuple(kps))


def _jitter_bbox(b: BBox, rng, sigma: float) -> BBox:
    if sigma <= 0:
        return b
    dx, dy, dw, dh = rng.normal(0.0, sigma, size=4)
    return BBox(
        round6(b.x + dx),
        round6(b.y + dy),
        round6(max(b.w + dw, 1.0)),
        round6(max(b.h + dh, 1.0)),
    )


def generate(s: SynthScenario) -> SynthOutput:
    """Generate ground truth, corrupted predictions and the correspondence
    table. Pure function of the scenario."""
    s.validate()
    rng = np.random.Generator(np.random.PCG64(s.seed))
    m, c = s.motion, s.corruption

    animals = []
    for bounds in _territories(s)[: s.n_animals]:
        length = float(rng.uniform(s.size_min, s.size_max))
        half = length / 2.0
        lo_x, hi_x, lo_y, hi_y = bounds
        if hi_x - lo_x < length or hi_y - lo_y < length:
            raise ValueError(
                f"animal of size {length:.1f} does not fit its territory {bounds}"
            )
        cx = float(rng.uniform(lo_x + half, hi_x - half))
        cy = float(rng.uniform(lo_y + half, hi_y - half))
        speed = float(rng.uniform(m.speed_min, m.speed_max))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        animals.append(
            _Animal(
                length,
                cx,
                cy,
                speed * math.cos(theta),
                speed * math.sin(theta),
                (lo_x + half, hi_x - half, lo_y + half, hi_y - half),
            )
        )

    frames = []
    pred_entries = []
    correspondence = []
    for fi in range(s.n_frames):
        gt_instances = []
        for i, a in enumerate(animals):
            half = a.length / 2.0
            bbox = BBox(
                round6(a.cx - half), round6(a.cy - half), round6(a.length), round6(a.length)
            )
            pose = _body_pose(
                a.cx, a.cy, a.length, a.heading(), a.length < s.occluded_ear_size
            )
            gt_instances.append(
                Instance(id=i, bbox=bbox, source=Source.GROUND_TRUTH, pose=pose)
            )

        pid = 0
        for i, a in enumerate(animals):
            gt = gt_instances[i]
            if c.miss_rate > 0 and rng.random() < c.miss_rate:
                continue
            bbox = _jitter_bbox(gt.bbox, rng, c.bbox_jitter)
            pose = _jitter_pose(gt.pose, rng, c.keypoint_jitter)
            score = round6(float(rng.beta(*c.tp_score_ab)))
            pred_entries.append(
                (
                    s.video_id,
                    fi,
                    Instance(
                        id=pid, bbox=bbox, source=Source.PREDICTION, pose=pose, score=score
                    ),
                )
            )
            correspondence.append(CorrespondenceEntry(s.video_id, fi, pid, i))
            pid += 1

        n_fp = int(math.floor(c.false_positive_rate))
        frac = c.false_positive_rate - n_fp
        if frac > 0 and rng.random() < frac:
            n_fp += 1
        for _ in range(n_fp):
            length = float(rng.uniform(s.size_min, s.size_max))
            half = length / 2.0
            fx = float(rng.uniform(half, s.frame_width - half))
            fy = float(rng.uniform(half, s.frame_height - half))
            heading = float(rng.uniform(0.0, 2.0 * math.pi))
            bbox = BBox(round6(fx - half), round6(fy - half), round6(length), round6(length))
            pose = _body_pose(fx, fy, length, heading, False)
            score = round6(float(rng.beta(*c.fp_score_ab)))
            pred_entries.append(
                (
                    s.video_id,
                    fi,
                    Instance(
                        id=pid, bbox=bbox, source=Source.PREDICTION, pose=pose, score=score
                    ),
                )
            )
            correspondence.append(CorrespondenceEntry(s.video_id, fi, pid, None))
            pid += 1

        frames.append(
            FrameRecord(
                video_id=s.video_id,
                frame_index=fi,
                width=float(s.frame_width),
                height=float(s.frame_height),
                instances=tuple(gt_instances),
                file_name=f"{s.video_id}/{fi:06d}.png",
            )
        )
        for a in animals:
            a.advance(rng, m.heading_noise)

    dataset = Dataset(
        frames=tuple(frames),
        skeleton=Skeleton(),
        provenance=f"synth(seed={s.seed})",
    )
    predictions = PredictionSet(
        entries=tuple(pred_entries), provenance=f"synth(seed={s.seed})"
    )
    return SynthOutput(
        dataset=dataset,
        predictions=predictions,
        correspondence=tuple(correspondence),
    )


@dataclass(frozen=True)
class OracleCounts:
    """Evaluation quantities read straight off the correspondence table,
    bypassing IoU matching."""

    tp: int
    fp: int
    fn: int
    # Squared pixel distances per keypoint slot, over true-positive pairs
    # whose ground-truth slot is VISIBLE.
    per_slot_sq_dists: tuple[tuple[float, ...], ...]

    def rmse(self, slot: int) -> Optional[float]:
        d = self.per_slot_sq_dists[slot]
        if not d:
            return None
        return math.sqrt(sum(d) / len(d))

    def pooled_rmse(self) -> Optional[float]:
        alld = [v for slot in self.per_slot_sq_dists for v in slot]
        if not alld:
            return None
        return math.sqrt(sum(alld) / len(alld))


def oracle_metrics(out: SynthOutput) -> OracleCounts:
    """Expected TP/FP/FN counts and exact per-keypoint distances."""
    gt_frames = out.dataset.by_key()
    preds = out.predictions.by_frame()
    per_slot: list[list[float]] = [[] for _ in range(NUM_KEYPOINTS)]
    tp = fp = 0
    for e in out.correspondence:
        key = (e.video_id, e.frame_index)
        pred = next(p for p in preds[key] if p.id == e.prediction_id)
        if e.animal_id is None:
            fp += 1
            continue
        tp += 1
        gt = next(g for g in gt_frames[key].instances if g.id == e.animal_id)
        if gt.pose is None or pred.pose is None:
            continue
        for i in range(NUM_KEYPOINTS):
            g, p = gt.pose[i], pred.pose[i]
            if g.vis is not Visibility.VISIBLE or not p.labeled:
                continue
            per_slot[i].append((p.x - g.x) ** 2 + (p.y - g.y) ** 2)
    total_gt = sum(len(fr.instances) for fr in out.dataset.frames)
    return OracleCounts(
        tp=tp,
        fp=fp,
        fn=total_gt - tp,
        per_slot_sq_dists=tuple(tuple(v) for v in per_slot),
    )


def correspondence_to_obj(out: SynthOutput) -> dict:
    """JSON-ready correspondence table (entries sorted by frame, id)."""
    entries = [
        {
            "video_id": e.video_id,
            "frame_index": e.frame_index,
            "prediction_id": e.prediction_id,
            "animal_id": e.animal_id,
        }
        for e in sorted(
            out.correspondence, key=lambda e: (e.video_id, e.frame_index, e.prediction_id)
        )
    ]
    return {"entries": entries}
