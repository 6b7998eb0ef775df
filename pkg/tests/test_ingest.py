import json

import pytest

from herdpose.core import KEYPOINT_NAMES, Source, Visibility
from herdpose.ingest import (
    Dataset,
    ParseError,
    PredictionSet,
    ValidationError,
    load_annotations,
    load_predictions,
    load_split_config,
    make_split,
    save_annotations,
    save_predictions,
)
from herdpose.synth import CorruptionModel, SynthScenario, generate


def minimal_annotation_obj():
    return {
        "images": [
            {
                "id": 1,
                "file_name": "v0/000000.png",
                "width": 640,
                "height": 480,
                "video_id": "v0",
                "frame_index": 0,
            }
        ],
        "annotations": [
            {
                "id": 1,
                "image_id": 1,
                "category_id": 1,
                "bbox": [10.0, 20.0, 30.0, 40.0],
                "keypoints": [15.0, 25.0, 2] * 8,
                "num_keypoints": 8,
            }
        ],
        "categories": [
            {
                "id": 1,
                "name": "elephant",
                "keypoints": list(KEYPOINT_NAMES),
                "skeleton": [[1, 4], [2, 4], [3, 4], [4, 5], [5, 6], [2, 7], [3, 8]],
            }
        ],
    }


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


class TestLoadAnnotations:
    def test_minimal_file(self, tmp_path):
        path = write_json(tmp_path / "ann.json", minimal_annotation_obj())
        ds = load_annotations(path)
        assert len(ds.frames) == 1
        fr = ds.frames[0]
        assert fr.key == ("v0", 0)
        assert len(fr.instances) == 1
        inst = fr.instances[0]
        assert inst.source is Source.GROUND_TRUTH
        assert inst.bbox.w == 30.0
        assert inst.pose is not None
        assert all(kp.vis is Visibility.VISIBLE for kp in inst.pose)

    def test_seven_keypoint_names_is_skeleton_size_mismatch(self, tmp_path):
        obj = minimal_annotation_obj()
        obj["categories"][0]["keypoints"] = list(KEYPOINT_NAMES[:7])
        path = write_json(tmp_path / "ann.json", obj)
        with pytest.raises(ValidationError, match="skeleton size mismatch"):
            load_annotations(path)

    def test_malformed_json_reports_offset(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"images": [,]}', encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            load_annotations(path)
        assert exc.value.offset is not None

    def test_visibility_code_mapping(self, tmp_path):
        obj = minimal_annotation_obj()
        flat = []
        for v in (0, 1, 2, 2, 2, 2, 1, 0):
            flat.extend([5.0, 5.0, v])
        obj["annotations"][0]["keypoints"] = flat
        ds = load_annotations(write_json(tmp_path / "a.json", obj))
        pose = ds.frames[0].instances[0].pose
        assert pose[0].vis is Visibility.NOT_LABELED
        assert pose[1].vis is Visibility.OCCLUDED
        assert pose[2].vis is Visibility.VISIBLE

    def test_duplicate_frame_key_rejected(self, tmp_path):
        obj = minimal_annotation_obj()
        obj["images"].append(dict(obj["images"][0], id=2))
        path = write_json(tmp_path / "a.json", obj)
        with pytest.raises(ValidationError, match="duplicate frame key"):
            load_annotations(path)

    def test_bad_keypoint_length_rejected(self, tmp_path):
        obj = minimal_annotation_obj()
        obj["annotations"][0]["keypoints"] = [1.0, 2.0, 2] * 7
        path = write_json(tmp_path / "a.json", obj)
        with pytest.raises(ValidationError, match="keypoints"):
            load_annotations(path)

    def test_missing_file_raises_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_annotations(tmp_path / "nope.json")


class TestRoundTrip:
    def test_dataset_round_trip(self, tmp_path):
        out = generate(SynthScenario(seed=9, n_animals=3, n_frames=4))
        path = tmp_path / "ann.json"
        save_annotations(out.dataset, path)
        loaded = load_annotations(path)
        assert loaded == out.dataset

    def test_dataset_double_round_trip_is_stable(self, tmp_path):
        out = generate(SynthScenario(seed=10, n_animals=2, n_frames=3))
        p1, p2 = tmp_path / "a1.json", tmp_path / "a2.json"
        save_annotations(out.dataset, p1)
        save_annotations(load_annotations(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_predictions_round_trip(self, tmp_path):
        out = generate(
            SynthScenario(
                seed=11,
                n_animals=3,
                n_frames=4,
                corruption=CorruptionModel(
                    bbox_jitter=1.0, keypoint_jitter=1.0, false_positive_rate=0.5
                ),
            )
        )
        ann = tmp_path / "ann.json"
        save_annotations(out.dataset, ann)
        ds = load_annotations(ann)
        path = tmp_path / "pred.json"
        save_predictions(out.predictions, out.dataset, path)
        loaded = load_predictions(path, ds)
        assert loaded == out.predictions


class TestLoadPredictions:
    @pytest.fixture()
    def ds(self, tmp_path):
        path = write_json(tmp_path / "ann.json", minimal_annotation_obj())
        return load_annotations(path)

    def test_empty_list(self, tmp_path, ds):
        path = write_json(tmp_path / "p.json", [])
        ps = load_predictions(path, ds)
        assert len(ps) == 0

    def test_score_out_of_range(self, tmp_path, ds):
        path = write_json(
            tmp_path / "p.json",
            [{"image_id": 1, "bbox": [0, 0, 5, 5], "score": 1.5}],
        )
        with pytest.raises(ValidationError, match="score out of range"):
            load_predictions(path, ds)

    def test_unknown_image_id_lists_offenders(self, tmp_path, ds):
        path = write_json(
            tmp_path / "p.json",
            [{"image_id": 42, "bbox": [0, 0, 5, 5], "score": 0.5}],
        )
        with pytest.raises(ValidationError, match=r"unknown image id.*42"):
            load_predictions(path, ds)

    def test_keypoints_optional(self, tmp_path, ds):
        path = write_json(
            tmp_path / "p.json",
            [{"image_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5}],
        )
        ps = load_predictions(path, ds)
        assert ps.entries[0][2].pose is None

    def test_wrapped_form_accepted(self, tmp_path, ds):
        path = write_json(
            tmp_path / "p.json",
            {
                "config": {"x": 1},
                "predictions": [{"image_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5}],
            },
        )
        assert len(load_predictions(path, ds)) == 1


class TestMakeSplit:
    @pytest.fixture()
    def ds(self):
        # 23 one-frame-per-index videos, a few frames each
        out = generate(SynthScenario(seed=1, n_animals=1, n_frames=3))
        frames = []
        for v in range(23):
            for fr in out.dataset.frames:
                frames.append(
                    type(fr)(
                        video_id=f"video{v:02d}",
                        frame_index=fr.frame_index,
                        width=fr.width,
                        height=fr.height,
                        instances=fr.instances,
                        file_name=None,
                    )
                )
        return Dataset(frames=tuple(frames), skeleton=out.dataset.skeleton)

    def test_test_videos_fully_held_out(self, ds):
        test_videos = ["video01", "video05", "video13", "video22"]
        split = make_split(ds, test_videos, val_fraction=0.1, seed=0)
        assert split.test_videos == frozenset(test_videos)
        for key in split.train | split.val:
            assert key[0] not in split.test_videos
        covered = {fr.key for fr in ds.frames if fr.video_id not in split.test_videos}
        assert (split.train | split.val) == covered

    def test_val_fraction_zero_gives_empty_val(self, ds):
        split = make_split(ds, ["video00"], val_fraction=0.0, seed=3)
        assert split.val == frozenset()

    def test_deterministic_in_seed(self, ds):
        a = make_split(ds, ["video00"], val_fraction=0.25, seed=1)
        b = make_split(ds, ["video00"], val_fraction=0.25, seed=1)
        c = make_split(ds, ["video00"], val_fraction=0.25, seed=2)
        assert a == b
        assert a != c
        assert len(a.val) == len(c.val)
        assert len(a.train) == len(c.train)

    def test_unknown_video_rejected(self, ds):
        with pytest.raises(ValueError, match="unknown video"):
            make_split(ds, ["nope"], val_fraction=0.1, seed=0)

    def test_val_fraction_range(self, ds):
        with pytest.raises(ValueError):
            make_split(ds, ["video00"], val_fraction=1.0, seed=0)

    def test_split_config_loader(self, tmp_path):
        path = write_json(
            tmp_path / "split.json",
            {"test_videos": ["a", "b"], "val_fraction": 0.2, "seed": 7},
        )
        cfg = load_split_config(path)
        assert cfg == {"test_videos": ["a", "b"], "val_fraction": 0.2, "seed": 7}
