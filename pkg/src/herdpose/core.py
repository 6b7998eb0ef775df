"""Geometric primitives and domain types shared by every other module.

Coordinates are continuous frame pixels: x grows right, y grows down.
Boxes are top-left anchored (x, y, w, h), the COCO convention; corner-pair
inputs are converted at ingest so only one convention exists internally.
All types here are immutable values and all operations are pure functions,
so they are safe to share across concurrent workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

KEYPOINT_NAMES = (
    "forehead",
    "ear_base_l",
    "ear_base_r",
    "skull_base",
    "shoulders",
    "hips",
    "ear_tip_l",
    "ear_tip_r",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

# Spine chain plus ear attachments; indices into KEYPOINT_NAMES.
SKELETON_EDGES = ((0, 3), (1, 3), (2, 3), (3, 4), (4, 5), (1, 6), (2, 7))

DEFAULT_OKS_FALLOFF = 0.1


class Visibility(enum.IntEnum):
    """Keypoint label state; integer values follow the COCO v-flag."""

    NOT_LABELED = 0
    OCCLUDED = 1
    VISIBLE = 2


class Source(enum.Enum):
    """Origin of an instance: manual annotation or model output."""

    GROUND_TRUTH = "ground_truth"
    PREDICTION = "prediction"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in frame pixels, top-left anchored."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def area(self) -> float:
        return self.w * self.h

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def max_dim(self) -> float:
        return max(self.w, self.h)

    def intersection_area(self, other: "BBox") -> float:
        """Overlap area with ``other``; 0.0 when disjoint or only touching."""
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]; 0 when disjoint."""
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area() + b.area() - inter)


@dataclass(frozen=True)
class Keypoint:
    """One keypoint slot. Coordinates are meaningless when NOT_LABELED."""

    index: int
    x: float
    y: float
    vis: Visibility

    def __post_init__(self):
        if not 0 <= self.index < NUM_KEYPOINTS:
            raise ValueError(f"keypoint index out of range: {self.index}")

    @property
    def labeled(self) -> bool:
        return self.vis != Visibility.NOT_LABELED


@dataclass(frozen=True)
class Pose:
    """Fixed-length array of 8 keypoints, one per skeleton slot.

    Missing annotations are NOT_LABELED slots, never absent slots.
    """

    keypoints: tuple[Keypoint, ...]

    def __post_init__(self):
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise ValueError(
                f"pose length mismatch: expected {NUM_KEYPOINTS}, got {len(self.keypoints)}"
            )
        for i, kp in enumerate(self.keypoints):
            if kp.index != i:
                raise ValueError(f"keypoint at slot {i} carries index {kp.index}")

    def __getitem__(self, i: int) -> Keypoint:
        return self.keypoints[i]

    def __iter__(self):
        return iter(self.keypoints)

    @classmethod
    def from_flat(cls, flat: Sequence[float]) -> "Pose":
        """Build from a COCO-style flat [x, y, v] * 8 sequence."""
        if len(flat) != 3 * NUM_KEYPOINTS:
            raise ValueError(
                f"flat keypoint length mismatch: expected {3 * NUM_KEYPOINTS}, got {len(flat)}"
            )
        kps = []
        for i in range(NUM_KEYPOINTS):
            x, y, v = flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]
            kps.append(Keypoint(i, float(x), float(y), Visibility(int(v))))
        return cls(tuple(kps))

    def to_flat(self) -> list[float]:
        flat: list[float] = []
        for kp in self.keypoints:
            flat.extend((kp.x, kp.y, float(int(kp.vis))))
        return flat

    def labeled_count(self) -> int:
        return sum(1 for kp in self.keypoints if kp.labeled)


@dataclass(frozen=True)
class Skeleton:
    """Keypoint naming, connectivity and per-slot OKS fall-off constants."""

    names: tuple[str, ...] = KEYPOINT_NAMES
    edges: tuple[tuple[int, int], ...] = SKELETON_EDGES
    falloff: tuple[float, ...] = (DEFAULT_OKS_FALLOFF,) * NUM_KEYPOINTS

    def __post_init__(self):
        if self.names != KEYPOINT_NAMES:
            raise ValueError(
                f"skeleton names mismatch: expected {list(KEYPOINT_NAMES)}, got {list(self.names)}"
            )
        if len(self.falloff) != NUM_KEYPOINTS:
            raise ValueError("falloff length mismatch")
        if any(k <= 0 for k in self.falloff):
            raise ValueError("falloff constants must be > 0")
        for a, b in self.edges:
            if not (0 <= a < NUM_KEYPOINTS and 0 <= b < NUM_KEYPOINTS):
                raise ValueError(f"edge ({a}, {b}) out of range")

    def with_falloff(self, falloff) -> "Skeleton":
        """Return a copy with a new fall-off vector (scalar broadcasts)."""
        if isinstance(falloff, (int, float)):
            values = (float(falloff),) * NUM_KEYPOINTS
        else:
            values = tuple(float(v) for v in falloff)
        return Skeleton(self.names, self.edges, values)


@dataclass(frozen=True)
class Instance:
    """One annotated or predicted animal on a frame.

    Ground-truth instances never carry a score; predictions always do.
    """

    id: int
    bbox: BBox
    source: Source
    pose: Optional[Pose] = None
    score: Optional[float] = None

    def __post_init__(self):
        if self.source is Source.GROUND_TRUTH and self.score is not None:
            raise ValueError("ground-truth instance must not carry a score")
        if self.source is Source.PREDICTION:
            if self.score is None:
                raise ValueError("prediction instance must carry a score")
            if not 0.0 <= self.score <= 1.0:
                raise ValueError(f"score out of range [0, 1]: {self.score}")


@dataclass(frozen=True)
class FrameRecord:
    """All instances on one video frame."""

    video_id: str
    frame_index: int
    width: float
    height: float
    instances: tuple[Instance, ...] = ()
    file_name: Optional[str] = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"negative frame index: {self.frame_index}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("frame dimensions must be positive")
        ids = [inst.id for inst in self.instances]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate instance id within frame")
        frame_rect = BBox(0.0, 0.0, float(self.width), float(self.height))
        for inst in self.instances:
            if inst.bbox.intersection_area(frame_rect) <= 0.0:
                raise ValueError(
                    f"instance {inst.id} bbox does not intersect the frame rectangle"
                )

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_index)


FrameKey = tuple


@dataclass(frozen=True)
class AffineMap:
    """Uniform scale plus translation: p -> p * scale + (dx, dy)."""

    scale: float
    dx: float
    dy: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"affine scale must be > 0, got {self.scale}")

    def apply(self, p: tuple[float, float]) -> tuple[float, float]:
        return (p[0] * self.scale + self.dx, p[1] * self.scale + self.dy)

    def invert(self) -> "AffineMap":
        s = 1.0 / self.scale
        return AffineMap(s, -self.dx * s, -self.dy * s)

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(1.0, 0.0, 0.0)


def apply_map(m: AffineMap, p: tuple[float, float]) -> tuple[float, float]:
    return m.apply(p)


def invert_map(m: AffineMap) -> AffineMap:
    return m.invert()


def map_bbox(m: AffineMap, b: BBox) -> BBox:
    x, y = m.apply((b.x, b.y))
    return BBox(x, y, b.w * m.scale, b.h * m.scale)


def map_pose(m: AffineMap, pose: Pose) -> Pose:
    """Transform every keypoint's coordinates; visibility is untouched."""
    kps = []
    for kp in pose:
        x, y = m.apply((kp.x, kp.y))
        kps.append(Keypoint(kp.index, x, y, kp.vis))
    return Pose(tuple(kps))


def euclidean(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])
