import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sceneshift.model import (
    ObjectInstance,
    OrientedBoundingBox,
    Pose,
    ValidationError,
    apply_pose,
    compute_obb,
    identity_pose,
    normalize_angle,
    rotation_z,
)
from sceneshift import synth

from reference import sweep_min_area_angle


def unit_cube_corners():
    return np.array(
        [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float
    )


class TestComputeObb:
    def test_axis_aligned_unit_cube(self):
        obb = compute_obb(unit_cube_corners())
        np.testing.assert_allclose(obb.center, [0.5, 0.5, 0.5], atol=1e-9)
        np.testing.assert_allclose(sorted(obb.extents), [1, 1, 1], atol=1e-9)

    def test_rotated_cube_recovers_angle(self):
        theta = math.radians(30.0)
        pts = (unit_cube_corners() - 0.5) @ rotation_z(theta).T
        obb = compute_obb(pts)
        np.testing.assert_allclose(obb.extents, [1, 1, 1], atol=1e-9)
        sweep_angle, major, minor = sweep_min_area_angle(pts[:, :2])
        assert abs(major - obb.dx) < 1e-3 and abs(minor - obb.dy) < 1e-3
        # Box orientation is defined modulo 90 degrees.
        diff = (math.degrees(obb.heading) - math.degrees(sweep_angle)) % 90.0
        assert min(diff, 90.0 - diff) < 1.0
        diff30 = (math.degrees(obb.heading) - 30.0) % 90.0
        assert min(diff30, 90.0 - diff30) < 1.0

    def test_long_box_major_axis(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, size=(500, 3)) * [1.0, 0.5, 0.5]
        pts = np.vstack([pts, [[-1, -0.5, -0.5], [1, 0.5, 0.5]]])  # pin extremes
        obb = compute_obb(pts)
        _, major, minor = sweep_min_area_angle(pts[:, :2])
        assert abs(obb.dx - major) < 1e-2
        assert abs(obb.dy - minor) < 1e-2
        # Major axis along world x for this cloud.
        assert abs(abs(obb.axes[0, 0]) - 1.0) < 1e-2
        assert obb.dx == pytest.approx(2.0, abs=5e-3)

    def test_rejects_degenerate(self):
        line = np.column_stack([np.linspace(0, 1, 10)] * 3)
        with pytest.raises(ValidationError):
            compute_obb(line)
        with pytest.raises(ValidationError):
            compute_obb(np.zeros((3, 3)))

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_contains_all_points(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(30, 3)) * rng.uniform(0.1, 2.0, size=3)
        obb = compute_obb(pts)
        assert np.all(obb.contains(pts, slack=1e-9))
        obb.validate()


class TestApplyPose:
    def test_identity_is_noop(self):
        obj = synth.make_box_object(1, "crate", (0.5, 0.5), 0.0, (1, 1, 1))
        moved = apply_pose(obj, identity_pose(obj))
        assert moved is obj

    def test_translation_shifts_x(self):
        obj = synth.make_box_object(1, "crate", (0.5, 0.5), 0.0, (1, 1, 1))
        moved = apply_pose(obj, Pose(1.0, 0.0, 0.0, obj.bottom_z))
        np.testing.assert_allclose(moved.points[:, 0], obj.points[:, 0] + 1.0)
        np.testing.assert_allclose(moved.points[:, 1:], obj.points[:, 1:])

    def test_half_turn_on_cube(self):
        obj = synth.make_box_object(1, "crate", (0, 0), 0.0, (1, 1, 1))
        moved = apply_pose(obj, Pose(0.0, 0.0, math.pi, obj.bottom_z))
        np.testing.assert_allclose(moved.obb.extents, obj.obb.extents, atol=1e-12)
        np.testing.assert_allclose(moved.front_normal, -obj.front_normal, atol=1e-12)

    def test_extents_invariant(self):
        obj = synth.make_box_object(2, "crate", (1, 2), 0.3, (0.8, 0.4, 0.5))
        moved = apply_pose(obj, Pose(0.3, -0.2, 0.7, 1.1))
        np.testing.assert_allclose(moved.obb.extents, obj.obb.extents, atol=1e-9)

    def test_composition_matches_matrix_chain(self):
        obj = synth.make_box_object(3, "crate", (1, 1), 0.0, (0.6, 0.3, 0.4))
        p1 = Pose(0.4, -0.1, 0.5, 0.2)
        p2 = Pose(-0.2, 0.3, -1.1, 0.6)
        via_engine = apply_pose(apply_pose(obj, p1), p2)

        # Oracle: chain the two rigid maps directly on raw arrays.
        def rigid(points, center_xy, pose, bottom):
            rot = rotation_z(pose.theta)[:2, :2]
            out = points.copy()
            out[:, :2] = (out[:, :2] - center_xy) @ rot.T + center_xy
            out[:, 0] += pose.tx
            out[:, 1] += pose.ty
            out[:, 2] += pose.z - bottom
            return out

        step1 = rigid(obj.points, obj.obb.center[:2], p1, obj.bottom_z)
        c1 = obj.obb.center[:2] + [p1.tx, p1.ty]
        step2 = rigid(step1, c1, p2, step1[:, 2].min())
        np.testing.assert_allclose(via_engine.points, step2, atol=1e-6)

    def test_surfaces_and_height_move_together(self):
        obj = synth.make_box_object(
            4, "table", (1, 1), 0.0, (1.0, 0.6, 0.7), with_top_surface=True
        )
        moved = apply_pose(obj, Pose(0.5, 0.2, 0.3, 0.1))
        surf = moved.support_surfaces[0]
        assert surf.height == pytest.approx(0.7 + 0.1, abs=1e-12)
        moved.validate()


class TestPose:
    def test_theta_normalized(self):
        assert Pose(0, 0, 3 * math.pi, 0).theta == pytest.approx(math.pi)
        assert Pose(0, 0, -math.pi, 0).theta == pytest.approx(math.pi)
        assert normalize_angle(2 * math.pi) == pytest.approx(0.0)


class TestValidation:
    def test_duplicate_ids_rejected(self):
        objects, floor_surface = synth.simple_room(3, 3, with_walls=False)
        dup = synth.make_box_object(0, "crate", (1, 1), 0, (0.4, 0.4, 0.4))
        with pytest.raises(ValidationError, match="0"):
            synth.assemble_scene(objects + [dup], floor_surface)

    def test_points_must_fit_obb(self):
        obj = synth.make_box_object(1, "crate", (0, 0), 0, (1, 1, 1))
        bad_points = np.vstack([obj.points, [[5.0, 5.0, 5.0]]])
        bad = ObjectInstance(
            id=1, class_label="crate", points=bad_points, obb=obj.obb
        )
        with pytest.raises(ValidationError):
            bad.validate()

    def test_front_normal_must_be_unit(self):
        obj = synth.make_box_object(1, "crate", (0, 0), 0, (1, 1, 1))
        bad = ObjectInstance(
            id=1, class_label="crate", points=obj.points, obb=obj.obb,
            front_normal=np.array([2.0, 0.0, 0.0]),
        )
        with pytest.raises(ValidationError):
            bad.validate()
