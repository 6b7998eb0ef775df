"""SORT-style multi-object tracking over per-frame detections.

Constant-velocity Kalman motion on (cx, cy, area, aspect), minimum-cost
bipartite assignment on 1 - IoU (optionally blended with an appearance
term from a pluggable embedding provider), and a tentative/confirmed/
deleted lifecycle. Tracking is sequential per video; separate videos can
be tracked concurrently with independent Tracker instances.

The "small detection" gate interprets the minimum size as a length:
max(box w, h) < min_size is too small. It is applied both when spawning
tracks and when exporting segments, and recorded in manifest metadata.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import framing
from .core import BBox, Instance, iou

STATE_DIM = 7  # cx, cy, area, aspect, vcx, vcy, varea
MEAS_DIM = 4


@dataclass(frozen=True)
class TrackerConfig:
    iou_gate: float = 0.3
    lambda_app: float = 0.0
    confirm_hits: int = 3
    max_age: int = 5
    min_size: float = 50.0
    # Process noise (per frame) and measurement noise; position/velocity
    # defaults sized for ~30 fps footage.
    pos_process_sigma: float = 1.0
    vel_process_sigma: float = 0.5
    area_process_sigma: float = 1.0
    aspect_process_sigma: float = 0.01
    area_vel_process_sigma: float = 0.1
    pos_meas_sigma: float = 1.0
    area_meas_sigma: float = 10.0
    aspect_meas_sigma: float = 0.1
    init_vel_sigma: float = 10.0

    def to_dict(self) -> dict:
        return {
            "iou_gate": self.iou_gate,
            "lambda_app": self.lambda_app,
            "confirm_hits": self.confirm_hits,
            "max_age": self.max_age,
            "min_size": self.min_size,
            "size_rule": "max(bbox w, h)",
            "size_gate": "spawn and export",
        }


class TrackStatus(enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


def bbox_to_measurement(b: BBox) -> np.ndarray:
    cx, cy = b.center()
    return np.array([cx, cy, b.area(), b.w / b.h], dtype=float)


def measurement_to_bbox(z: np.ndarray) -> BBox:
    cx, cy, s, r = float(z[0]), float(z[1]), float(z[2]), float(z[3])
    s = max(s, 1e-6)
    r = max(r, 1e-6)
    w = math.sqrt(s * r)
    h = s / w
    return BBox(cx - w / 2.0, cy - h / 2.0, w, h)


def _transition_matrix() -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[0, 4] = f[1, 5] = f[2, 6] = 1.0
    return f


def _measurement_matrix() -> np.ndarray:
    h = np.zeros((MEAS_DIM, STATE_DIM))
    h[:MEAS_DIM, :MEAS_DIM] = np.eye(MEAS_DIM)
    return h


class KalmanBoxState:
    """Constant-velocity Kalman filter over (cx, cy, area, aspect).

    Aspect carries no velocity. The Joseph-form update keeps the
    covariance symmetric positive semidefinite through long runs.
    """

    def __init__(self, bbox: BBox, cfg: TrackerConfig):
        self._f = _transition_matrix()
        self._h = _measurement_matrix()
        self._q = np.diag(
            [
                cfg.pos_process_sigma**2,
                cfg.pos_process_sigma**2,
                cfg.area_process_sigma**2,
                cfg.aspect_process_sigma**2,
                cfg.vel_process_sigma**2,
                cfg.vel_process_sigma**2,
                cfg.area_vel_process_sigma**2,
            ]
        )
        self._r = np.diag(
            [
                cfg.pos_meas_sigma**2,
                cfg.pos_meas_sigma**2,
                cfg.area_meas_sigma**2,
                cfg.aspect_meas_sigma**2,
            ]
        )
        self.x = np.zeros(STATE_DIM)
        self.x[:MEAS_DIM] = bbox_to_measurement(bbox)
        self.P = np.diag(
            [
                cfg.pos_meas_sigma**2,
                cfg.pos_meas_sigma**2,
                cfg.area_meas_sigma**2,
                cfg.aspect_meas_sigma**2,
                cfg.init_vel_sigma**2,
                cfg.init_vel_sigma**2,
                cfg.init_vel_sigma**2,
            ]
        )

    def predict(self) -> None:
        # A negative-going area velocity must never drive the area below 0.
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0
        self.x = self._f @ self.x
        self.P = self._f @ self.P @ self._f.T + self._q
        self.P = (self.P + self.P.T) / 2.0

    def update(self, bbox: BBox) -> None:
        z = bbox_to_measurement(bbox)
        y = z - self._h @ self.x
        s = self._h @ self.P @ self._h.T + self._r
        k = np.linalg.solve(s.T, (self.P @ self._h.T).T).T
        self.x = self.x + k @ y
        ikh = np.eye(STATE_DIM) - k @ self._h
        self.P = ikh @ self.P @ ikh.T + k @ self._r @ k.T
        self.P = (self.P + self.P.T) / 2.0

    def bbox(self) -> BBox:
        return measurement_to_bbox(self.x[:MEAS_DIM])


@dataclass
class HistoryEntry:
    """One frame of a track's life; instance_id is None on missed frames
    (the box is then the motion prediction, never exported)."""

    frame_index: int
    bbox: BBox
    instance_id: Optional[int]


class Track:
    """One tracked individual with Kalman state and lifecycle counters."""

    def __init__(
        self,
        track_id: int,
        detection: Instance,
        frame_index: int,
        cfg: TrackerConfig,
        embedding: Optional[np.ndarray] = None,
    ):
        self.track_id = track_id
        self.cfg = cfg
        self.kf = KalmanBoxState(detection.bbox, cfg)
        self.hits = 1
        self.misses_in_a_row = 0
        self.status = (
            TrackStatus.CONFIRMED if cfg.confirm_hits <= 1 else TrackStatus.TENTATIVE
        )
        self.was_confirmed = self.status is TrackStatus.CONFIRMED
        self.history: list[HistoryEntry] = [
            HistoryEntry(frame_index, detection.bbox, detection.id)
        ]
        self.embeddings: list[np.ndarray] = []
        if embedding is not None:
            self.embeddings.append(embedding)

    def predict(self) -> BBox:
        """Propagate the motion model one frame and return the predicted box."""
        if self.status is TrackStatus.DELETED:
            raise ValueError(f"track {self.track_id} is deleted")
        self.kf.predict()
        return self.kf.bbox()

    def bbox(self) -> BBox:
        return self.kf.bbox()

    def update(
        self, frame_index: int, detection: Instance, embedding: Optional[np.ndarray] = None
    ) -> None:
        self.kf.update(detection.bbox)
        self.hits += 1
        self.misses_in_a_row = 0
        self.history.append(HistoryEntry(frame_index, detection.bbox, detection.id))
        if embedding is not None:
            self.embeddings.append(embedding)
        if self.status is TrackStatus.TENTATIVE and self.hits >= self.cfg.confirm_hits:
            self.status = TrackStatus.CONFIRMED
            self.was_confirmed = True

    def miss(self, frame_index: int) -> None:
        self.misses_in_a_row += 1
        if self.misses_in_a_row > self.cfg.max_age:
            self.status = TrackStatus.DELETED
        else:
            self.history.append(HistoryEntry(frame_index, self.kf.bbox(), None))

    def gallery_mean(self) -> Optional[np.ndarray]:
        if not self.embeddings:
            return None
        return np.mean(np.stack(self.embeddings), axis=0)


@dataclass(frozen=True)
class Association:
    pairs: tuple[tuple[int, int], ...]  # (track index, detection index)
    unmatched_tracks: tuple[int, ...]
    unmatched_detections: tuple[int, ...]


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost bipartite assignment (optimal, not greedy)."""
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def associate(
    tracks: Sequence[Track],
    detections: Sequence[Instance],
    iou_gate: float = 0.3,
    lambda_app: float = 0.0,
    det_embeddings: Optional[Sequence[np.ndarray]] = None,
) -> Association:
    """Globally optimal track-to-detection assignment.

    Cost is (1 - IoU of the track's predicted box with the detection), plus
    lambda_app * (1 - cosine(track gallery mean, detection embedding)) when
    an appearance term is enabled. Pairs with IoU below the gate are
    stripped after assignment. Tracks must already be predicted forward.
    """
    if not tracks or not detections:
        return Association(
            pairs=(),
            unmatched_tracks=tuple(range(len(tracks))),
            unmatched_detections=tuple(range(len(detections))),
        )
    if lambda_app > 0 and det_embeddings is None:
        raise ValueError("appearance term requires detection embeddings")

    track_boxes = [t.bbox() for t in tracks]
    iou_m = np.zeros((len(tracks), len(detections)))
    for i, tb in enumerate(track_boxes):
        for j, d in enumerate(detections):
            iou_m[i, j] = iou(tb, d.bbox)
    cost = 1.0 - iou_m
    if lambda_app > 0:
        for i, t in enumerate(tracks):
            mean = t.gallery_mean()
            for j in range(len(detections)):
                sim = 0.0 if mean is None else _cosine(mean, det_embeddings[j])
                cost[i, j] += lambda_app * (1.0 - sim)

    pairs = []
    matched_t, matched_d = set(), set()
    for i, j in solve_assignment(cost):
        if iou_m[i, j] < iou_gate:
            continue
        pairs.append((i, j))
        matched_t.add(i)
        matched_d.add(j)
    return Association(
        pairs=tuple(pairs),
        unmatched_tracks=tuple(i for i in range(len(tracks)) if i not in matched_t),
        unmatched_detections=tuple(
            j for j in range(len(detections)) if j not in matched_d
        ),
    )


EmbeddingProvider = Callable[[Instance], np.ndarray]


class Tracker:
    """Frame-by-frame tracker for one video.

    Feed frames in strictly increasing order via step(); detections are
    expected to be NMS-filtered. Track ids are never reused. Identical
    detection streams always produce identical tracks.
    """

    def __init__(
        self,
        config: TrackerConfig = TrackerConfig(),
        embedding_provider: Optional[EmbeddingProvider] = None,
    ):
        self.config = config
        self.embedding_provider = embedding_provider
        self.tracks: list[Track] = []
        self._next_id = 0
        self._last_frame: Optional[int] = None

    def live_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.status is not TrackStatus.DELETED]

    def confirmed_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.was_confirmed]

    def _embed(self, det: Instance) -> np.ndarray:
        vec = np.asarray(self.embedding_provider(det), dtype=float)
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(
                f"embedding for detection {det.id} has norm {norm}, expected 1"
            )
        return vec

    def step(self, frame_index: int, detections: Sequence[Instance]) -> None:
        if self._last_frame is not None and frame_index <= self._last_frame:
            raise ValueError(
                f"out-of-order frame index {frame_index} (last was {self._last_frame})"
            )
        self._last_frame = frame_index

        live = self.live_tracks()
        for t in live:
            t.predict()

        det_embeddings = None
        if self.embedding_provider is not None:
            det_embeddings = [self._embed(d) for d in detections]

        assoc = associate(
            live,
            detections,
            iou_gate=self.config.iou_gate,
            lambda_app=self.config.lambda_app,
            det_embeddings=det_embeddings,
        )
        for ti, dj in assoc.pairs:
            emb = det_embeddings[dj] if det_embeddings is not None else None
            live[ti].update(frame_index, detections[dj], emb)
        for ti in assoc.unmatched_tracks:
            live[ti].miss(frame_index)
        for dj in assoc.unmatched_detections:
            det = detections[dj]
            if det.bbox.max_dim() < self.config.min_size:
                continue
            emb = det_embeddings[dj] if det_embeddings is not None else None
            self.tracks.append(
                Track(self._next_id, det, frame_index, self.config, emb)
            )
            self._next_id += 1


@dataclass(frozen=True)
class SegmentEntry:
    frame_index: int
    bbox: BBox
    patch: framing.PatchSpec


@dataclass(frozen=True)
class TrackSegment:
    track_id: int
    first_frame: int
    last_frame: int
    entries: tuple[SegmentEntry, ...]


@dataclass(frozen=True)
class SegmentManifest:
    """Exported per-individual segments: confirmed tracks whose every
    contributing detection passes the minimum-size gate."""

    video_id: str
    segments: tuple[TrackSegment, ...]
    meta: dict


def export_manifest(
    tracker: Tracker,
    video_id: str,
    margin: float = framing.DEFAULT_PATCH_MARGIN,
    out_size: int = framing.DEFAULT_PATCH_OUT_SIZE,
) -> SegmentManifest:
    """Build the per-individual segment manifest from tracker state.

    Only detection-backed history entries appear (missed frames are never
    interpolated); a track is dropped entirely if any of its detections is
    smaller than the size gate.
    """
    min_size = tracker.config.min_size
    segments = []
    for t in tracker.confirmed_tracks():
        det_entries = [h for h in t.history if h.instance_id is not None]
        if not det_entries:
            continue
        if any(h.bbox.max_dim() < min_size for h in det_entries):
            continue
        entries = tuple(
            SegmentEntry(
                frame_index=h.frame_index,
                bbox=h.bbox,
                patch=framing.build_patch(h.bbox, margin=margin, out_size=out_size),
            )
            for h in det_entries
        )
        segments.append(
            TrackSegment(
                track_id=t.track_id,
                first_frame=entries[0].frame_index,
                last_frame=entries[-1].frame_index,
                entries=entries,
            )
        )
    meta = dict(tracker.config.to_dict())
    meta.update({"patch_margin": margin, "patch_out_size": out_size})
    return SegmentManifest(video_id=video_id, segments=tuple(segments), meta=meta)
