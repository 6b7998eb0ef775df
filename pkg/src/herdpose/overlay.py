"""Per-frame SVG overlays for qualitative review.

Coordinates are written exactly as annotated (three decimals, no
rescaling), so a parsed-back document reproduces the source geometry.
Occluded keypoints render hollow; ground truth and predictions get
distinct colors; track ids draw as text labels when provided.
"""

from __future__ import annotations

import json
from typing import Mapping, Optional

from .core import FrameRecord, Instance, Skeleton, Source, Visibility
from .ingest import atomic_write_text

GT_COLOR = "#1b9e77"
PRED_COLOR = "#d95f02"
MARKER_RADIUS = 2.0


def _esc(text: str) -> str:
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _f(v: float) -> str:
    return f"{v:.3f}"


def _instance_group(
    inst: Instance, skeleton: Skeleton, track_id: Optional[int]
) -> list[str]:
    color = GT_COLOR if inst.source is Source.GROUND_TRUTH else PRED_COLOR
    kind = "gt" if inst.source is Source.GROUND_TRUTH else "pred"
    parts = [f'<g class="instance {kind}" data-instance-id="{inst.id}">']
    b = inst.bbox
    parts.append(
        f'<rect x="{_f(b.x)}" y="{_f(b.y)}" width="{_f(b.w)}" height="{_f(b.h)}" '
        f'fill="none" stroke="{color}" stroke-width="1"/>'
    )
    if inst.pose is not None:
        for a, bb in skeleton.edges:
            ka, kb = inst.pose[a], inst.pose[bb]
            if not (ka.labeled and kb.labeled):
                continue
            parts.append(
                f'<line x1="{_f(ka.x)}" y1="{_f(ka.y)}" x2="{_f(kb.x)}" y2="{_f(kb.y)}" '
                f'stroke="{color}" stroke-width="0.75"/>'
            )
        for kp in inst.pose:
            if not kp.labeled:
                continue
            hollow = kp.vis is Visibility.OCCLUDED
            fill = "none" if hollow else color
            cls = "kp occluded" if hollow else "kp visible"
            parts.append(
                f'<circle class="{cls}" data-slot="{kp.index}" cx="{_f(kp.x)}" '
                f'cy="{_f(kp.y)}" r="{MARKER_RADIUS}" fill="{fill}" stroke="{color}" '
                f'stroke-width="0.75"/>'
            )
    label = None
    if track_id is not None:
        label = f"t{track_id}"
    elif inst.source is Source.PREDICTION and inst.score is not None:
        label = f"{inst.score:.2f}"
    if label is not None:
        parts.append(
            f'<text x="{_f(b.x)}" y="{_f(b.y - 2.0)}" font-size="10" '
            f'fill="{color}">{_esc(label)}</text>'
        )
    parts.append("</g>")
    return parts


def svg_document(
    frame: FrameRecord,
    skeleton: Skeleton = Skeleton(),
    track_ids: Optional[Mapping[int, int]] = None,
    meta: Optional[dict] = None,
) -> str:
    """Render one frame's instances to an SVG string.

    track_ids maps instance id -> track id. ``meta`` (run config, digests)
    is embedded in a <desc> element so the artifact carries its provenance.
    """
    w, h = frame.width, frame.height
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(w)}" height="{_f(h)}" '
        f'viewBox="0 0 {_f(w)} {_f(h)}">',
    ]
    if meta is not None:
        lines.append(f"<desc>{_esc(json.dumps(meta, sort_keys=True))}</desc>")
    lines.append(
        f'<title>{_esc(frame.video_id)} frame {frame.frame_index}</title>'
    )
    for inst in frame.instances:
        tid = track_ids.get(inst.id) if track_ids else None
        lines.extend(_instance_group(inst, skeleton, tid))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_overlay(
    frame: FrameRecord,
    out_path,
    skeleton: Skeleton = Skeleton(),
    track_ids: Optional[Mapping[int, int]] = None,
    meta: Optional[dict] = None,
) -> None:
    """Write one frame's overlay SVG atomically."""
    atomic_write_text(out_path, svg_document(frame, skeleton, track_ids, meta))
