"""Annotation/prediction file parsing, validation, and the dataset split.

Annotation files follow a COCO-keypoints-style layout: top-level ``images``,
``annotations`` and ``categories`` (single category "elephant"). Prediction
files are a JSON list of per-detection entries keyed by ``image_id``; a
wrapped form ``{"config": ..., "predictions": [...]}`` is also accepted so
pipeline outputs can carry provenance. Keypoint visibility integers map
0 -> NOT_LABELED, 1 -> OCCLUDED, 2 -> VISIBLE.

Serialization is canonical: floats are written with 6 decimal places and
keys are sorted, so file digests are stable across runs and platforms.
Instance ids are per-frame ordinals assigned in file order at load time;
annotation ids in files are globally sequential and regenerated on save.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import (
    KEYPOINT_NAMES,
    NUM_KEYPOINTS,
    BBox,
    FrameRecord,
    Instance,
    Pose,
    Skeleton,
    Source,
    Visibility,
)

FLOAT_DECIMALS = 6
CATEGORY_NAME = "elephant"


class IngestError(Exception):
    """Base class for file-level failures."""


class ParseError(IngestError):
    """The file is not well-formed JSON; carries the byte offset."""

    def __init__(self, path, msg: str, offset: Optional[int] = None):
        self.path = str(path)
        self.offset = offset
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{path}: invalid JSON{where}: {msg}")


class ValidationError(IngestError):
    """The file parsed but violates a domain invariant."""

    def __init__(self, path, msg: str):
        self.path = str(path)
        super().__init__(f"{path}: {msg}")


def round6(v: float) -> float:
    """Canonical float rounding used by every writer."""
    return round(float(v), FLOAT_DECIMALS)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file + rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class Dataset:
    """Validated, immutable collection of annotated frames.

    ``image_index`` maps the source file's image ids to frame keys so a
    companion prediction file can be resolved; it is excluded from equality
    because save regenerates canonical ids.
    """

    frames: tuple[FrameRecord, ...]
    skeleton: Skeleton = Skeleton()
    provenance: str = field(default="in-memory", compare=False)
    image_index: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        keys = [fr.key for fr in self.frames]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate (video_id, frame_index) key in dataset")
        for fr in self.frames:
            for inst in fr.instances:
                if inst.pose is not None and len(inst.pose.keypoints) != len(self.skeleton.names):
                    raise ValueError("pose length does not match skeleton size")
        if not self.image_index:
            object.__setattr__(self, "image_index", canonical_image_index(self.frames))

    def by_key(self) -> dict:
        return {fr.key: fr for fr in self.frames}

    def videos(self) -> list[str]:
        return sorted({fr.video_id for fr in self.frames})

    def frames_of(self, video_id: str) -> list[FrameRecord]:
        return sorted(
            (fr for fr in self.frames if fr.video_id == video_id),
            key=lambda fr: fr.frame_index,
        )


def canonical_image_index(frames: Iterable[FrameRecord]) -> dict:
    """Image ids 1..n over frames sorted by (video_id, frame_index)."""
    ordered = sorted(frames, key=lambda fr: fr.key)
    return {i + 1: fr.key for i, fr in enumerate(ordered)}


@dataclass(frozen=True)
class PredictionSet:
    """Predictions keyed to frames of a companion Dataset."""

    entries: tuple[tuple[str, int, Instance], ...]
    provenance: str = field(default="in-memory", compare=False)

    def __post_init__(self):
        seen: dict = {}
        for video_id, frame_index, inst in self.entries:
            if inst.source is not Source.PREDICTION:
                raise ValueError("prediction set entry must have source PREDICTION")
            key = (video_id, frame_index)
            if inst.id in seen.setdefault(key, set()):
                raise ValueError(f"duplicate prediction id {inst.id} on frame {key}")
            seen[key].add(inst.id)

    def by_frame(self) -> dict:
        grouped: dict = {}
        for video_id, frame_index, inst in self.entries:
            grouped.setdefault((video_id, frame_index), []).append(inst)
        return grouped

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SplitAssignment:
    """Frame keys for train/val plus whole-video test hold-out."""

    train: frozenset
    val: frozenset
    test_videos: frozenset

    def __post_init__(self):
        if self.train & self.val:
            raise ValueError("train and val frame sets overlap")
        for key in self.train | self.val:
            if key[0] in self.test_videos:
                raise ValueError(f"test video {key[0]} leaked into train/val")


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.msg, offset=e.pos) from e


def _parse_visibility(path, v) -> Visibility:
    try:
        return Visibility(int(v))
    except ValueError:
        raise ValidationError(path, f"visibility code must be 0, 1 or 2, got {v!r}")


def _parse_bbox(path, raw, ctx: str) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(path, f"{ctx}: bbox must be [x, y, w, h]")
    try:
        return BBox(float(raw[0]), float(raw[1]), float(raw[2]), float(raw[3]))
    except ValueError as e:
        raise ValidationError(path, f"{ctx}: {e}")


def _parse_pose(path, raw, ctx: str) -> Optional[Pose]:
    if raw is None:
        return None
    if len(raw) != 3 * NUM_KEYPOINTS:
        raise ValidationError(
            path,
            f"{ctx}: keypoints must be a flat [x, y, v] * {NUM_KEYPOINTS} list, got length {len(raw)}",
        )
    flat = []
    for i in range(NUM_KEYPOINTS):
        x, y, v = raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]
        flat.extend((float(x), float(y), int(_parse_visibility(path, v))))
    return Pose.from_flat(flat)


def load_annotations(path) -> Dataset:
    """Parse and validate a COCO-keypoints-style annotation file."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ValidationError(path, "top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise ValidationError(path, f"missing top-level key '{key}'")

    cats = data["categories"]
    if len(cats) != 1:
        raise ValidationError(path, f"expected exactly 1 category, got {len(cats)}")
    cat = cats[0]
    names = tuple(cat.get("keypoints", ()))
    if len(names) != NUM_KEYPOINTS:
        raise ValidationError(
            path, f"skeleton size mismatch: expected {NUM_KEYPOINTS} keypoint names, got {len(names)}"
        )
    if names != KEYPOINT_NAMES:
        raise ValidationError(
            path, f"keypoint names mismatch: expected {list(KEYPOINT_NAMES)}, got {list(names)}"
        )
    edges = tuple(
        (int(a) - 1, int(b) - 1) for a, b in cat.get("skeleton", ())
    )  # files are 1-based, internal indices 0-based
    try:
        skeleton = Skeleton(names, edges) if edges else Skeleton(names)
    except ValueError as e:
        raise ValidationError(path, str(e))

    image_index: dict = {}
    image_meta: dict = {}
    seen_keys = set()
    for im in data["images"]:
        try:
            image_id = int(im["id"])
            key = (str(im["video_id"]), int(im["frame_index"]))
            width, height = float(im["width"]), float(im["height"])
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(path, f"malformed image entry: {e}")
        if image_id in image_index:
            raise ValidationError(path, f"duplicate image id {image_id}")
        if key in seen_keys:
            raise ValidationError(path, f"duplicate frame key {key}")
        if key[1] < 0:
            raise ValidationError(path, f"negative frame index in {key}")
        seen_keys.add(key)
        image_index[image_id] = key
        image_meta[image_id] = (key, width, height, im.get("file_name"))

    per_image: dict = {image_id: [] for image_id in image_index}
    for ann in data["annotations"]:
        ctx = f"annotation {ann.get('id')}"
        image_id = ann.get("image_id")
        if image_id not in per_image:
            raise ValidationError(path, f"{ctx}: unknown image id {image_id}")
        bbox = _parse_bbox(path, ann.get("bbox"), ctx)
        pose = _parse_pose(path, ann.get("keypoints"), ctx)
        per_image[image_id].append((bbox, pose))

    frames = []
    for image_id in sorted(image_index):
        (key, width, height, file_name) = image_meta[image_id]
        instances = tuple(
            Instance(id=i, bbox=bbox, source=Source.GROUND_TRUTH, pose=pose)
            for i, (bbox, pose) in enumerate(per_image[image_id])
        )
        try:
            frames.append(
                FrameRecord(
                    video_id=key[0],
                    frame_index=key[1],
                    width=width,
                    height=height,
                    instances=instances,
                    file_name=file_name,
                )
            )
        except ValueError as e:
            raise ValidationError(path, f"frame {key}: {e}")

    frames.sort(key=lambda fr: fr.key)
    return Dataset(
        frames=tuple(frames),
        skeleton=skeleton,
        provenance=file_digest(path),
        image_index=image_index,
    )


def _bbox_json(b: BBox) -> list:
    return [round6(b.x), round6(b.y), round6(b.w), round6(b.h)]


def _pose_json(p: Pose) -> list:
    flat = []
    for kp in p:
        flat.extend((round6(kp.x), round6(kp.y), int(kp.vis)))
    return flat


def annotations_to_obj(ds: Dataset, info: Optional[dict] = None) -> dict:
    """Serialize a Dataset to the annotation-file object."""
    ordered = sorted(ds.frames, key=lambda fr: fr.key)
    images = []
    annotations = []
    ann_id = 1
    for image_id, fr in enumerate(ordered, start=1):
        file_name = fr.file_name or f"{fr.video_id}/{fr.frame_index:06d}.png"
        images.append(
            {
                "id": image_id,
                "file_name": file_name,
                "width": round6(fr.width),
                "height": round6(fr.height),
                "video_id": fr.video_id,
                "frame_index": fr.frame_index,
            }
        )
        for inst in fr.instances:
            entry = {
                "id": ann_id,
                "image_id": image_id,
                "category_id": 1,
                "bbox": _bbox_json(inst.bbox),
            }
            if inst.pose is not None:
                entry["keypoints"] = _pose_json(inst.pose)
                entry["num_keypoints"] = inst.pose.labeled_count()
            annotations.append(entry)
            ann_id += 1
    obj = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {
                "id": 1,
                "name": CATEGORY_NAME,
                "keypoints": list(ds.skeleton.names),
                "skeleton": [[a + 1, b + 1] for a, b in ds.skeleton.edges],
            }
        ],
    }
    if info is not None:
        obj["info"] = info
    return obj


def save_annotations(ds: Dataset, path, info: Optional[dict] = None) -> None:
    atomic_write_text(path, dump_canonical_json(annotations_to_obj(ds, info)))


def load_predictions(path, ds: Dataset) -> PredictionSet:
    """Parse and validate a prediction file against its companion Dataset."""
    data = _read_json(path)
    if isinstance(data, dict) and "predictions" in data:
        data = data["predictions"]
    if not isinstance(data, list):
        raise ValidationError(path, "prediction file must be a JSON list")

    unknown = sorted(
        {e.get("image_id") for e in data if e.get("image_id") not in ds.image_index}
    )
    if unknown:
        raise ValidationError(path, f"unknown image id(s): {unknown}")

    next_id: dict = {}
    entries = []
    for e in data:
        key = ds.image_index[e["image_id"]]
        ctx = f"prediction for image {e['image_id']}"
        score = e.get("score")
        if score is None:
            raise ValidationError(path, f"{ctx}: missing score")
        if not 0.0 <= float(score) <= 1.0:
            raise ValidationError(path, f"{ctx}: score out of range [0, 1]: {score}")
        bbox = _parse_bbox(path, e.get("bbox"), ctx)
        pose = _parse_pose(path, e.get("keypoints"), ctx)
        pid = next_id.get(key, 0)
        next_id[key] = pid + 1
        entries.append(
            (
                key[0],
                key[1],
                Instance(
                    id=pid, bbox=bbox, source=Source.PREDICTION, pose=pose, score=float(score)
                ),
            )
        )
    return PredictionSet(entries=tuple(entries), provenance=file_digest(path))


def predictions_to_obj(
    ps: PredictionSet,
    ds: Dataset,
    info: Optional[dict] = None,
    track_ids: Optional[dict] = None,
):
    """Serialize predictions; wrapped form when info/track ids are present."""
    key_to_image = {key: image_id for image_id, key in ds.image_index.items()}
    rows = []
    for video_id, frame_index, inst in sorted(
        ps.entries, key=lambda e: (e[0], e[1], e[2].id)
    ):
        key = (video_id, frame_index)
        if key not in key_to_image:
            raise ValueError(f"prediction references frame {key} absent from dataset")
        row = {
            "image_id": key_to_image[key],
            "bbox": _bbox_json(inst.bbox),
            "score": round6(inst.score),
        }
        if inst.pose is not None:
            row["keypoints"] = _pose_json(inst.pose)
        if track_ids is not None:
            row["track_id"] = track_ids.get((video_id, frame_index, inst.id))
        rows.append(row)
    if info is None and track_ids is None:
        return rows
    obj = {"predictions": rows}
    if info is not None:
        obj.update(info)
    return obj


def save_predictions(
    ps: PredictionSet,
    ds: Dataset,
    path,
    info: Optional[dict] = None,
    track_ids: Optional[dict] = None,
) -> None:
    atomic_write_text(
        path, dump_canonical_json(predictions_to_obj(ps, ds, info, track_ids))
    )


def make_split(
    ds: Dataset, test_videos, val_fraction: float = 0.1, seed: int = 0
) -> SplitAssignment:
    """Whole-video test hold-out, then a seeded train/val frame shuffle.

    Pure function of its inputs: the same (dataset, test videos, fraction,
    seed) always produces the same assignment.
    """
    known = set(ds.videos())
    test = set(test_videos)
    unknown = sorted(test - known)
    if unknown:
        raise ValueError(f"unknown video id(s): {unknown}")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")

    rest = sorted(fr.key for fr in ds.frames if fr.video_id not in test)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(rest))
    n_val = int(round(val_fraction * len(rest)))
    val_keys = frozenset(rest[i] for i in order[:n_val])
    train_keys = frozenset(rest[i] for i in order[n_val:])
    return SplitAssignment(train=train_keys, val=val_keys, test_videos=frozenset(test))


def load_split_config(path) -> dict:
    """Read a split file: {"test_videos": [...], "val_fraction": f, "seed": n}."""
    data = _read_json(path)
    if not isinstance(data, dict) or "test_videos" not in data:
        raise ValidationError(path, "split file must be an object with 'test_videos'")
    return {
        "test_videos": list(data["test_videos"]),
        "val_fraction": float(data.get("val_fraction", 0.1)),
        "seed": int(data.get("seed", 0)),
    }
