"""Batch toolkit for aerial multi-animal pose data.

Operates on annotation and prediction files, never on pixels: frame
tiling, square patch geometry, detection de-duplication and matching,
detection/pose metrics (mAP, RMSE, PCK, OKS), SORT-style track
extraction, and a deterministic synthetic scenario generator.
"""

from .core import (
    KEYPOINT_NAMES,
    NUM_KEYPOINTS,
    AffineMap,
    BBox,
    FrameRecord,
    Instance,
    Keypoint,
    Pose,
    Skeleton,
    Source,
    Visibility,
    apply_map,
    invert_map,
    iou,
)
from .evaluation import (
    EvalConfig,
    KeypointMetricRow,
    MatchResult,
    MetricReport,
    PrCurve,
    average_precision,
    evaluate,
    keypoint_metrics,
    map_sweep,
    match,
    nms,
)
from .framing import (
    PatchSpec,
    TileGrid,
    TileSpec,
    build_grid,
    build_patch,
    merge_tiles,
    pose_to_frame,
    pose_to_patch,
    project_to_tile,
)
from .ingest import (
    Dataset,
    IngestError,
    ParseError,
    PredictionSet,
    SplitAssignment,
    ValidationError,
    load_annotations,
    load_predictions,
    load_split_config,
    make_split,
    save_annotations,
    save_predictions,
)
from .synth import (
    CorruptionModel,
    MotionModel,
    SynthOutput,
    SynthScenario,
    generate,
    oracle_metrics,
)
from .tracking import (
    SegmentManifest,
    Track,
    Tracker,
    TrackerConfig,
    TrackStatus,
    associate,
    export_manifest,
    solve_assignment,
)

__version__ = "0.1.0"
