"""Shared builders for test data."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from herdpose.core import (
    NUM_KEYPOINTS,
    BBox,
    FrameRecord,
    Instance,
    Keypoint,
    Pose,
    Source,
    Visibility,
)
from herdpose.ingest import Dataset, PredictionSet


def gt(i, x, y, w, h, pose=None):
    return Instance(id=i, bbox=BBox(x, y, w, h), source=Source.GROUND_TRUTH, pose=pose)


def pred(i, x, y, w, h, score, pose=None):
    return Instance(
        id=i, bbox=BBox(x, y, w, h), source=Source.PREDICTION, score=score, pose=pose
    )


def full_pose(points, vis=Visibility.VISIBLE):
    """Pose from 8 (x, y) points, all with one visibility."""
    assert len(points) == NUM_KEYPOINTS
    return Pose(
        tuple(Keypoint(i, float(x), float(y), vis) for i, (x, y) in enumerate(points))
    )


def grid_pose(x0=0.0, y0=0.0, step=5.0, vis=Visibility.VISIBLE):
    """Deterministic well-spread pose for round-trip style tests."""
    pts = [(x0 + step * (i % 4), y0 + step * (i // 4)) for i in range(NUM_KEYPOINTS)]
    return full_pose(pts, vis)


def random_boxes(rng: np.random.Generator, n, extent=100.0, min_side=2.0, max_side=30.0):
    out = []
    for _ in range(n):
        w = rng.uniform(min_side, max_side)
        h = rng.uniform(min_side, max_side)
        x = rng.uniform(0, extent - w)
        y = rng.uniform(0, extent - h)
        out.append(BBox(x, y, w, h))
    return out


def transform_instance(inst: Instance, scale=1.0, dx=0.0, dy=0.0) -> Instance:
    b = inst.bbox
    bbox = BBox(b.x * scale + dx, b.y * scale + dy, b.w * scale, b.h * scale)
    pose = None
    if inst.pose is not None:
        pose = Pose(
            tuple(
                Keypoint(kp.index, kp.x * scale + dx, kp.y * scale + dy, kp.vis)
                for kp in inst.pose
            )
        )
    return replace(inst, bbox=bbox, pose=pose)


def transform_scene(dataset: Dataset, predictions: PredictionSet, scale=1.0, dx=0.0, dy=0.0):
    """Apply one global similarity transform to every box and keypoint."""
    frames = []
    for fr in dataset.frames:
        frames.append(
            FrameRecord(
                video_id=fr.video_id,
                frame_index=fr.frame_index,
                width=fr.width * scale + abs(dx) + 1.0,
                height=fr.height * scale + abs(dy) + 1.0,
                instances=tuple(
                    transform_instance(inst, scale, dx, dy) for inst in fr.instances
                ),
                file_name=fr.file_name,
            )
        )
    ds = Dataset(frames=tuple(frames), skeleton=dataset.skeleton)
    entries = tuple(
        (vid, fi, transform_instance(inst, scale, dx, dy))
        for vid, fi, inst in predictions.entries
    )
    return ds, PredictionSet(entries=entries)
