import numpy as np
import pytest

from herdpose.core import (
    BBox,
    FrameRecord,
    Keypoint,
    Pose,
    Visibility,
)
from herdpose.framing import (
    TileSpec,
    build_grid,
    build_patch,
    merge_tiles,
    pose_to_frame,
    pose_to_patch,
    project_to_tile,
)

from .helpers import full_pose, grid_pose, gt, pred
from .oracles import coverage_depth, grid_coverage_ok


class TestBuildGrid:
    def test_paper_sized_frame(self):
        grid = build_grid(3840, 2160, side=800, overlap=0.33)
        assert grid.stride == 536
        cols = sorted({t.x0 for t in grid.tiles})
        rows = sorted({t.y0 for t in grid.tiles})
        assert len(cols) == 7 and len(rows) == 4
        assert len(grid) == 28
        assert cols[-1] == 3040
        assert rows[-1] == 1360
        assert grid_coverage_ok(grid, 3840, 2160)

    def test_single_exact_tile(self):
        grid = build_grid(800, 800, side=800, overlap=0.33)
        assert len(grid) == 1
        t = grid.tiles[0]
        assert (t.x0, t.y0, t.side) == (0, 0, 800)

    def test_zero_overlap_two_disjoint_tiles(self):
        grid = build_grid(1600, 800, side=800, overlap=0.0)
        assert len(grid) == 2
        a, b = grid.tiles
        assert a.rect().intersection_area(b.rect()) == 0.0

    def test_tiles_inside_frame_and_row_major(self):
        grid = build_grid(2000, 1500, side=800, overlap=0.33)
        for t in grid.tiles:
            assert 0 <= t.x0 and t.x0 + t.side <= 2000
            assert 0 <= t.y0 and t.y0 + t.side <= 1500
        order = [(t.row, t.col) for t in grid.tiles]
        assert order == sorted(order)

    def test_overlap_bands_are_doubly_covered(self):
        grid = build_grid(1920, 1080, side=800, overlap=0.33)
        depth = coverage_depth(grid, 1920, 1080)
        # Pixels between the second tile start and the first tile end sit
        # in two column bands (536 <= x < 800).
        assert depth[100, 600] >= 2
        assert depth.min() >= 1

    def test_small_frame_clamps_tile_side(self):
        grid = build_grid(500, 400, side=800, overlap=0.33)
        assert grid.side == 400
        assert grid_coverage_ok(grid, 500, 400)
        for t in grid.tiles:
            assert t.x0 + t.side <= 500 and t.y0 + t.side <= 400

    @pytest.mark.parametrize("w,h", [(0, 100), (100, -5)])
    def test_rejects_nonpositive_dimensions(self, w, h):
        with pytest.raises(ValueError):
            build_grid(w, h)

    def test_rejects_bad_overlap(self):
        with pytest.raises(ValueError):
            build_grid(800, 800, overlap=1.0)

    def test_pure_function_of_inputs(self):
        assert build_grid(3840, 2160) == build_grid(3840, 2160)


def tile_at(x0, y0, side=800, row=0, col=0):
    return TileSpec(row=row, col=col, x0=x0, y0=y0, side=side)


class TestProjectToTile:
    def frame(self, instances):
        return FrameRecord(
            video_id="v", frame_index=0, width=1920, height=1080, instances=instances
        )

    def test_fully_inside_is_pure_translation(self):
        tile = tile_at(536, 0)
        pose = grid_pose(600, 100)
        fr = self.frame((gt(0, 590, 90, 60, 60, pose=pose),))
        out = project_to_tile(tile, fr, 0.5)
        assert len(out.instances) == 1
        inst = out.instances[0]
        assert inst.id == 0
        assert (inst.bbox.x, inst.bbox.y) == (590 - 536, 90)
        assert (inst.bbox.w, inst.bbox.h) == (60, 60)
        for kp, src in zip(inst.pose, pose):
            assert (kp.x, kp.y) == (src.x - 536, src.y)
            assert kp.vis == src.vis

    def test_fully_outside_is_dropped(self):
        tile = tile_at(0, 0)
        fr = self.frame((gt(0, 1000, 900, 50, 50),))
        out = project_to_tile(tile, fr, 0.5)
        assert out.instances == ()

    def test_straddling_membership_threshold(self):
        tile = tile_at(0, 0)
        # 60 of 100 px of width inside the tile -> fraction 0.6
        fr = self.frame((gt(0, 740, 100, 100, 50),))
        kept = project_to_tile(tile, fr, 0.5)
        assert len(kept.instances) == 1
        clipped = kept.instances[0].bbox
        assert (clipped.x, clipped.w) == (740, 60)
        dropped = project_to_tile(tile, fr, 0.7)
        assert dropped.instances == ()

    def test_exact_fraction_is_kept(self):
        tile = tile_at(0, 0)
        fr = self.frame((gt(0, 750, 100, 100, 50),))  # exactly half inside
        assert len(project_to_tile(tile, fr, 0.5).instances) == 1

    def test_keypoints_outside_tile_demoted(self):
        tile = tile_at(0, 0, side=800)
        pts = [(790 + 4 * i, 100) for i in range(8)]  # slots 3.. land past 800
        pose = full_pose(pts)
        fr = self.frame((gt(0, 700, 90, 100, 40, pose=pose),))
        out = project_to_tile(tile, fr, 0.5)
        vis = [kp.vis for kp in out.instances[0].pose]
        assert vis[:3] == [Visibility.VISIBLE] * 3
        assert set(vis[3:]) == {Visibility.NOT_LABELED}

    def test_tile_frame_dimensions_are_tile_side(self):
        tile = tile_at(0, 0, side=800)
        out = project_to_tile(tile, self.frame(()), 0.5)
        assert (out.width, out.height) == (800.0, 800.0)


class TestMergeTiles:
    def test_duplicate_across_tiles_keeps_higher_score(self):
        t0, t1 = tile_at(0, 0), tile_at(400, 0, col=1)
        a = pred(0, 500, 100, 50, 50, score=0.9)  # frame space box in t0 coords
        b = pred(0, 101, 102, 50, 50, score=0.8)  # t1-local copy, slightly off
        merged = merge_tiles([(t0, [a]), (t1, [b])], nms_iou=0.5)
        assert len(merged) == 1
        assert merged[0].score == 0.9
        assert (merged[0].bbox.x, merged[0].bbox.y) == (500, 100)

    def test_single_tile_is_pure_translation(self):
        t = tile_at(536, 536, row=1, col=1)
        local = pred(0, 10, 20, 30, 40, score=0.7, pose=grid_pose(15, 25))
        merged = merge_tiles([(t, [local])])
        assert len(merged) == 1
        out = merged[0]
        assert (out.bbox.x, out.bbox.y) == (546, 556)
        assert (out.pose[0].x, out.pose[0].y) == (551, 561)

    def test_distinct_objects_both_retained(self):
        t0, t1 = tile_at(0, 0), tile_at(800, 0, col=1)
        merged = merge_tiles(
            [(t0, [pred(0, 100, 100, 40, 40, 0.9)]), (t1, [pred(0, 50, 50, 40, 40, 0.8)])]
        )
        assert len(merged) == 2

    def test_merged_ids_are_frame_unique(self):
        t0, t1 = tile_at(0, 0), tile_at(800, 0, col=1)
        merged = merge_tiles(
            [
                (t0, [pred(0, 100, 100, 40, 40, 0.9), pred(1, 200, 200, 40, 40, 0.8)]),
                (t1, [pred(0, 50, 50, 40, 40, 0.7)]),
            ]
        )
        ids = [m.id for m in merged]
        assert len(ids) == len(set(ids)) == 3

    def test_tiling_then_merging_interior_objects_is_identity(self):
        grid = build_grid(1920, 1080, side=800, overlap=0.33)
        objects = [
            pred(0, 100.5, 100.25, 40, 30, 0.9, pose=grid_pose(110, 110)),
            pred(1, 600.0, 200.0, 50, 50, 0.8, pose=grid_pose(610, 210)),
            pred(2, 1500.0, 900.0, 35, 45, 0.7, pose=grid_pose(1505, 905)),
        ]
        fr = FrameRecord(
            video_id="v", frame_index=0, width=1920, height=1080, instances=tuple(objects)
        )
        per_tile = [(t, project_to_tile(t, fr, 0.5).instances) for t in grid.tiles]
        merged = merge_tiles(per_tile, nms_iou=0.5)
        got = sorted(
            ((m.bbox.x, m.bbox.y, m.bbox.w, m.bbox.h, m.score) for m in merged)
        )
        want = sorted(
            ((o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h, o.score) for o in objects)
        )
        assert got == pytest.approx(want)


class TestBuildPatch:
    def test_worked_example(self):
        spec = build_patch(BBox(10, 20, 40, 60), margin=0.2, out_size=100)
        assert spec.side == pytest.approx(72.0)
        assert (spec.cx, spec.cy) == (30.0, 50.0)
        assert spec.origin == pytest.approx((-6.0, 14.0))
        assert spec.map.scale == pytest.approx(100.0 / 72.0)
        assert spec.map.apply((30.0, 50.0)) == pytest.approx((50.0, 50.0), abs=1e-9)
        assert spec.map.apply((-6.0, 14.0)) == pytest.approx((0.0, 0.0), abs=1e-9)

    def test_square_box_with_margin(self):
        spec = build_patch(BBox(0, 0, 100, 100), margin=0.2, out_size=100)
        assert spec.side == pytest.approx(120.0)
        assert spec.map.scale == pytest.approx(100.0 / 120.0)

    def test_zero_margin_identity_scale(self):
        spec = build_patch(BBox(10, 10, 100, 100), margin=0.0, out_size=100)
        assert spec.map.scale == pytest.approx(1.0)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            build_patch(BBox(0, 0, 10, 10), margin=-1.0)
        with pytest.raises(ValueError):
            build_patch(BBox(0, 0, 10, 10), out_size=0)

    def test_pose_round_trip(self):
        rng = np.random.Generator(np.random.PCG64(21))
        for _ in range(200):
            x, y = rng.uniform(0, 2000, size=2)
            w, h = rng.uniform(5, 80, size=2)
            b = BBox(float(x), float(y), float(w), float(h))
            spec = build_patch(b)
            pts = [
                (float(rng.uniform(x - 10, x + w + 10)), float(rng.uniform(y - 10, y + h + 10)))
                for _ in range(8)
            ]
            pose = full_pose(pts)
            back = pose_to_frame(spec, pose_to_patch(spec, pose))
            for kp, src in zip(back, pose):
                assert abs(kp.x - src.x) < 1e-6
                assert abs(kp.y - src.y) < 1e-6
                assert kp.vis == src.vis

    def test_patch_center_maps_to_bbox_center(self):
        b = BBox(7, 9, 31, 17)
        spec = build_patch(b)
        inv = spec.map.invert()
        assert inv.apply((50.0, 50.0)) == pytest.approx(b.center(), abs=1e-9)

    def test_visibility_preserved_through_maps(self):
        b = BBox(0, 0, 50, 50)
        spec = build_patch(b)
        pose = grid_pose(10, 10, vis=Visibility.OCCLUDED)
        out = pose_to_frame(spec, pose_to_patch(spec, pose))
        assert all(kp.vis is Visibility.OCCLUDED for kp in out)
