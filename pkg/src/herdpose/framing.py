"""Frame tiling and per-animal square patch extraction.

Both operations are invertible coordinate transforms that carry annotations
along: tiling slides fixed-size windows over a frame so small animals occupy
a detector-appropriate fraction of the input, and patch extraction maps a
margin-padded square around a detection to a fixed output resolution. No
pixels are touched anywhere; only coordinates and labels move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from . import evaluation
from .core import (
    AffineMap,
    BBox,
    FrameRecord,
    Instance,
    Keypoint,
    Pose,
    Visibility,
    map_pose,
)

DEFAULT_TILE_SIDE = 800
DEFAULT_TILE_OVERLAP = 0.33
DEFAULT_PATCH_MARGIN = 0.2
DEFAULT_PATCH_OUT_SIZE = 100
DEFAULT_MIN_VISIBLE_FRACTION = 0.5


@dataclass(frozen=True)
class TileSpec:
    """One square window of a tile grid, fully inside its parent frame."""

    row: int
    col: int
    x0: int
    y0: int
    side: int

    @property
    def map(self) -> AffineMap:
        """Frame -> tile coordinates (pure translation, scale 1)."""
        return AffineMap(1.0, -float(self.x0), -float(self.y0))

    def rect(self) -> BBox:
        return BBox(float(self.x0), float(self.y0), float(self.side), float(self.side))


@dataclass(frozen=True)
class TileGrid:
    """Row-major tiling of a frame with overlapping square windows."""

    frame_w: int
    frame_h: int
    side: int
    overlap: float
    stride: int
    tiles: tuple[TileSpec, ...]

    def __len__(self) -> int:
        return len(self.tiles)


def _axis_origins(extent: int, side: int, stride: int) -> list[int]:
    """Window origins along one axis; the last window clamps to the edge."""
    origins = []
    x = 0
    while True:
        if x + side >= extent:
            origins.append(max(0, min(x, extent - side)))
            break
        origins.append(x)
        x += stride
    return origins


def build_grid(
    frame_w: int,
    frame_h: int,
    side: int = DEFAULT_TILE_SIDE,
    overlap: float = DEFAULT_TILE_OVERLAP,
) -> TileGrid:
    """Cover a frame with square tiles of the given side and overlap ratio.

    The stride is round(side * (1 - overlap)); the final row/column clamps
    so the last tile ends exactly at the frame edge. Frames smaller than the
    tile in either dimension fall back to side = min(side, frame_w, frame_h)
    so every tile stays fully inside the frame.
    """
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError(f"frame dimensions must be positive, got {frame_w}x{frame_h}")
    if side <= 0:
        raise ValueError(f"tile side must be positive, got {side}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")

    eff_side = min(side, frame_w, frame_h)
    stride = max(1, round(eff_side * (1.0 - overlap)))
    xs = _axis_origins(frame_w, eff_side, stride)
    ys = _axis_origins(frame_h, eff_side, stride)
    tiles = tuple(
        TileSpec(row=r, col=c, x0=x, y0=y, side=eff_side)
        for r, y in enumerate(ys)
        for c, x in enumerate(xs)
    )
    return TileGrid(
        frame_w=frame_w,
        frame_h=frame_h,
        side=eff_side,
        overlap=overlap,
        stride=stride,
        tiles=tiles,
    )


def _clip_bbox(b: BBox, rect: BBox) -> Optional[BBox]:
    x1 = max(b.x, rect.x)
    y1 = max(b.y, rect.y)
    x2 = min(b.x2, rect.x2)
    y2 = min(b.y2, rect.y2)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return BBox(x1, y1, x2 - x1, y2 - y1)


def _pose_into_tile(pose: Pose, tile: TileSpec) -> Pose:
    """Translate keypoints; demote those landing outside the tile."""
    kps = []
    for kp in pose:
        if not kp.labeled:
            kps.append(kp)
            continue
        inside = (
            tile.x0 <= kp.x <= tile.x0 + tile.side
            and tile.y0 <= kp.y <= tile.y0 + tile.side
        )
        if not inside:
            kps.append(Keypoint(kp.index, 0.0, 0.0, Visibility.NOT_LABELED))
        else:
            x, y = tile.map.apply((kp.x, kp.y))
            kps.append(Keypoint(kp.index, x, y, kp.vis))
    return Pose(tuple(kps))


def project_to_tile(
    tile: TileSpec,
    fr: FrameRecord,
    min_visible_fraction: float = DEFAULT_MIN_VISIBLE_FRACTION,
) -> FrameRecord:
    """Project a frame's instances into one tile's coordinate space.

    Instances keep their ids. An instance survives when the fraction of its
    box area inside the tile is >= min_visible_fraction (and is positive);
    its box is clipped to the tile. Keypoints outside the tile become
    NOT_LABELED so no fabricated coordinates enter downstream exports.
    """
    rect = tile.rect()
    kept = []
    for inst in fr.instances:
        inter = inst.bbox.intersection_area(rect)
        if inter <= 0.0 or inter / inst.bbox.area() < min_visible_fraction:
            continue
        clipped = _clip_bbox(inst.bbox, rect)
        if clipped is None:
            continue
        x, y = tile.map.apply((clipped.x, clipped.y))
        new_bbox = BBox(x, y, clipped.w, clipped.h)
        new_pose = _pose_into_tile(inst.pose, tile) if inst.pose is not None else None
        kept.append(replace(inst, bbox=new_bbox, pose=new_pose))
    return FrameRecord(
        video_id=fr.video_id,
        frame_index=fr.frame_index,
        width=float(tile.side),
        height=float(tile.side),
        instances=tuple(kept),
        file_name=fr.file_name,
    )


def merge_tiles(
    per_tile_preds: Sequence[tuple[TileSpec, Sequence[Instance]]],
    nms_iou: float = 0.5,
) -> list[Instance]:
    """Fuse per-tile predictions back into frame space.

    Predictions are translated by their tile origin, re-numbered with
    frame-unique ids (tile order, then local id), and de-duplicated with
    NMS so no surviving pair overlaps at IoU >= nms_iou. Objects straddling
    a tile boundary survive as whichever copy NMS keeps; copies clipped
    below the NMS threshold relative to the full box are not fused.
    """
    flat = []
    next_id = 0
    for tile, preds in per_tile_preds:
        back = tile.map.invert()
        for inst in sorted(preds, key=lambda p: p.id):
            x, y = back.apply((inst.bbox.x, inst.bbox.y))
            bbox = BBox(x, y, inst.bbox.w, inst.bbox.h)
            pose = map_pose(back, inst.pose) if inst.pose is not None else None
            flat.append(replace(inst, id=next_id, bbox=bbox, pose=pose))
            next_id += 1
    return evaluation.nms(flat, iou_threshold=nms_iou)


@dataclass(frozen=True)
class PatchSpec:
    """Square crop geometry around one detection, mapped to out_size pixels.

    The square is centered on the box and sized by adding the margin to the
    box's largest dimension; it may extend past the frame edge (negative
    origins), padding being a consumer concern.
    """

    bbox: BBox
    cx: float
    cy: float
    side: float
    out_size: int
    map: AffineMap

    @property
    def origin(self) -> tuple[float, float]:
        return (self.cx - self.side / 2.0, self.cy - self.side / 2.0)


def build_patch(
    b: BBox,
    margin: float = DEFAULT_PATCH_MARGIN,
    out_size: int = DEFAULT_PATCH_OUT_SIZE,
) -> PatchSpec:
    """Margin-padded square patch centered on a box.

    side = (1 + margin) * max(w, h); the map sends the box center to the
    patch center (out_size/2, out_size/2) with scale out_size/side.
    """
    if 1.0 + margin <= 0:
        raise ValueError(f"margin must be > -1, got {margin}")
    if out_size <= 0:
        raise ValueError(f"out_size must be positive, got {out_size}")
    side = (1.0 + margin) * b.max_dim()
    cx, cy = b.center()
    scale = out_size / side
    m = AffineMap(scale, out_size / 2.0 - cx * scale, out_size / 2.0 - cy * scale)
    return PatchSpec(bbox=b, cx=cx, cy=cy, side=side, out_size=out_size, map=m)


def pose_to_patch(ps: PatchSpec, pose: Pose) -> Pose:
    """Project a frame-space pose into patch coordinates."""
    return map_pose(ps.map, pose)


def pose_to_frame(ps: PatchSpec, pose_in_patch: Pose) -> Pose:
    """Map a patch-space pose back to frame coordinates (inverse of the
    patch map); visibility is unchanged."""
    return map_pose(ps.map.invert(), pose_in_patch)
