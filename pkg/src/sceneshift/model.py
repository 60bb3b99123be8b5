"""Core scene data model: objects, oriented boxes, support surfaces, poses.

All geometry lives in a right-handed, z-up world frame with coordinates in
meters. Instances are immutable values; "moving" an object means building a
new posed copy via :func:`apply_pose`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull

DEFAULT_RESOLUTION_M = 0.01

UNIT_TOL = 1e-6
VERTICAL_TOL_DEG = 1.0


class SceneError(Exception):
    """Base error for scene model violations."""


class ValidationError(SceneError):
    """An invariant of the data model does not hold."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def rotation_z(theta: float) -> np.ndarray:
    """3x3 rotation about the world vertical axis."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_2d(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class OrientedBoundingBox:
    """Vertical-axis-aligned oriented bounding box.

    ``axes`` columns are the local x, y, z directions in world coordinates;
    the z column is the world vertical. ``extents`` are full side lengths
    (Dx, Dy, Dz). Local x is the major horizontal axis (Dx >= Dy).
    """

    center: np.ndarray
    axes: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "axes", np.asarray(self.axes, dtype=float))
        object.__setattr__(self, "extents", np.asarray(self.extents, dtype=float))

    @property
    def heading(self) -> float:
        """Angle of the local x axis against world +x, in (-pi, pi]."""
        return math.atan2(self.axes[1, 0], self.axes[0, 0])

    @property
    def dx(self) -> float:
        return float(self.extents[0])

    @property
    def dy(self) -> float:
        return float(self.extents[1])

    @property
    def dz(self) -> float:
        return float(self.extents[2])

    @property
    def horizontal_diagonal(self) -> float:
        return math.hypot(self.dx, self.dy)

    def corners(self) -> np.ndarray:
        """The 8 box corners, shape (8, 3)."""
        half = self.extents / 2.0
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=float,
        )
        return self.center + (signs * half) @ self.axes.T

    def footprint_corners(self) -> np.ndarray:
        """The 4 corners of the horizontal footprint rectangle, shape (4, 2)."""
        half = self.extents[:2] / 2.0
        signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        return self.center[:2] + (signs * half) @ self.axes[:2, :2].T

    def footprint_area(self) -> float:
        return self.dx * self.dy

    def contains(self, points: np.ndarray, slack: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box expanded by ``slack``."""
        local = (np.atleast_2d(points) - self.center) @ self.axes
        return np.all(np.abs(local) <= self.extents / 2.0 + slack, axis=1)

    def extent_along(self, direction_xy: np.ndarray) -> float:
        """Full support width of the box footprint along a horizontal unit vector."""
        d = np.asarray(direction_xy, dtype=float)
        return float(
            abs(d @ self.axes[:2, 0]) * self.dx + abs(d @ self.axes[:2, 1]) * self.dy
        )

    def validate(self) -> None:
        if not np.allclose(self.axes @ self.axes.T, np.eye(3), atol=UNIT_TOL):
            raise ValidationError("OBB axes are not orthonormal")
        vertical_angle = math.degrees(
            math.acos(min(1.0, abs(float(self.axes[2, 2]))))
        )
        if vertical_angle > VERTICAL_TOL_DEG:
            raise ValidationError("OBB third axis deviates from world vertical")
        if np.any(self.extents < 0):
            raise ValidationError("OBB extents must be non-negative")


def _min_area_rect(points_xy: np.ndarray) -> tuple[float, float, float, np.ndarray]:
    """Minimum-area enclosing rectangle of a 2D point set.

    Returns (angle of major side, major extent, minor extent, center). Uses
    rotating calipers over convex hull edges; optimal boxes are hull-edge
    aligned. Ties break toward the direction with the smallest angle to +x.
    """
    pts = np.unique(points_xy, axis=0)
    if len(pts) == 1:
        return 0.0, 0.0, 0.0, pts[0]
    try:
        hull = ConvexHull(pts)
        hull_pts = pts[hull.vertices]
    except Exception:
        # Collinear input: orient along the principal direction.
        centered = pts - pts.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        direction = vt[0]
        angle = math.atan2(direction[1], direction[0])
        angle = normalize_angle(angle)
        if angle <= -math.pi / 2 or angle > math.pi / 2:
            angle = normalize_angle(angle + math.pi)
        rot = rotation_2d(-angle)
        local = centered @ rot.T
        lo, hi = local.min(axis=0), local.max(axis=0)
        center = pts.mean(axis=0) + rotation_2d(angle) @ ((lo + hi) / 2.0)
        return angle, float(hi[0] - lo[0]), float(hi[1] - lo[1]), center

    best = None
    edges = np.roll(hull_pts, -1, axis=0) - hull_pts
    for edge in edges:
        norm = np.linalg.norm(edge)
        if norm < 1e-12:
            continue
        angle = math.atan2(edge[1], edge[0])
        rot = rotation_2d(-angle)
        local = hull_pts @ rot.T
        lo, hi = local.min(axis=0), local.max(axis=0)
        w, h = hi - lo
        area = w * h
        center_local = (lo + hi) / 2.0
        # Candidate orientation with the major side first.
        if w >= h:
            cand_angle, cand_major, cand_minor = angle, w, h
        else:
            cand_angle, cand_major, cand_minor = angle + math.pi / 2.0, h, w
        cand_angle = normalize_angle(cand_angle)
        # A box direction and its opposite are equivalent; use (-pi/2, pi/2].
        if cand_angle <= -math.pi / 2 or cand_angle > math.pi / 2:
            cand_angle = normalize_angle(cand_angle + math.pi)
        center = rotation_2d(angle) @ center_local
        key = (round(area, 12), round(abs(cand_angle), 12))
        if best is None or key < best[0]:
            best = (key, cand_angle, float(cand_major), float(cand_minor), center)
    _, angle, major, minor, center = best
    return angle, major, minor, center


def compute_obb(points: np.ndarray) -> OrientedBoundingBox:
    """Fit a vertical-axis-aligned oriented bounding box around a point set.

    The z axis is the world vertical; the horizontal orientation is the
    minimum-area enclosing rectangle of the ground-plane projection (ties
    broken toward the smaller angle to world +x), so symmetric footprints
    get a deterministic, tight box. The box contains all input points.

    Raises:
        ValidationError: fewer than 4 points, or degenerate (all points
            collinear in 3D).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise ValidationError("compute_obb needs at least 4 points of shape (N, 3)")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("compute_obb: non-finite coordinates")
    centered = pts - pts.mean(axis=0)
    rank = np.linalg.matrix_rank(centered, tol=1e-9)
    if rank < 2:
        raise ValidationError("compute_obb: degenerate (collinear) point set")

    angle, major, minor, center_xy = _min_area_rect(pts[:, :2])
    z_lo, z_hi = float(pts[:, 2].min()), float(pts[:, 2].max())
    axes = rotation_z(angle)
    center = np.array([center_xy[0], center_xy[1], (z_lo + z_hi) / 2.0])
    extents = np.array([major, minor, z_hi - z_lo])
    return OrientedBoundingBox(center=center, axes=axes, extents=extents)


@dataclass(frozen=True)
class SupportSurface:
    """A horizontal region of an object able to hold other objects.

    The contour is a closed polyline (the last point connects back to the
    first) sampled at roughly the scene point resolution; normals are
    per-contour-point outward unit 2-vectors.
    """

    owner_id: int
    height: float
    contour_points: np.ndarray
    contour_normals: np.ndarray
    max_clearance: float = math.inf

    def __post_init__(self):
        object.__setattr__(
            self, "contour_points", np.asarray(self.contour_points, dtype=float)
        )
        object.__setattr__(
            self, "contour_normals", np.asarray(self.contour_normals, dtype=float)
        )

    @property
    def barycenter(self) -> np.ndarray:
        return self.contour_points.mean(axis=0)

    def area(self) -> float:
        """Enclosed area of the closed contour (shoelace)."""
        x = self.contour_points[:, 0]
        y = self.contour_points[:, 1]
        return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)

    def validate(self) -> None:
        if len(self.contour_points) < 3:
            raise ValidationError("support surface contour needs >= 3 points")
        if self.contour_points.shape != self.contour_normals.shape:
            raise ValidationError("contour points and normals must align")
        norms = np.linalg.norm(self.contour_normals, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValidationError("contour normals must be unit length")
        outward = self.contour_points - self.barycenter
        dots = np.einsum("ij,ij->i", outward, self.contour_normals)
        if np.any(dots <= 0):
            raise ValidationError("contour normals must point away from barycenter")


@dataclass(frozen=True)
class Pose:
    """Optimizable planar pose: xy translation, rotation about vertical, height.

    ``z`` addresses the object's bottom (minimum point height); it stays
    fixed during optimization. ``theta`` is normalized to (-pi, pi].
    """

    tx: float
    ty: float
    theta: float
    z: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


@dataclass(frozen=True)
class ObjectInstance:
    """One segmented object of the scene."""

    id: int
    class_label: str
    points: np.ndarray
    obb: OrientedBoundingBox
    color: str = ""
    material: str = ""
    description: str = ""
    front_normal: Optional[np.ndarray] = None
    support_surfaces: tuple[SupportSurface, ...] = ()
    is_architectural: bool = False
    has_semantic_front: bool = False

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        if self.front_normal is not None:
            object.__setattr__(
                self, "front_normal", np.asarray(self.front_normal, dtype=float)
            )
        object.__setattr__(self, "support_surfaces", tuple(self.support_surfaces))

    @property
    def bottom_z(self) -> float:
        return float(self.points[:, 2].min())

    @property
    def height(self) -> float:
        return float(self.points[:, 2].max() - self.points[:, 2].min())

    @property
    def center_xy(self) -> np.ndarray:
        return self.obb.center[:2]

    def validate(self) -> None:
        if len(self.points) == 0:
            raise ValidationError(f"object {self.id}: empty point set")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError(f"object {self.id}: non-finite coordinates")
        try:
            self.obb.validate()
        except ValidationError as exc:
            raise ValidationError(f"object {self.id}: {exc}") from exc
        if not np.all(self.obb.contains(self.points, slack=0.01)):
            raise ValidationError(
                f"object {self.id}: points outside OBB expanded by 1 cm"
            )
        if self.front_normal is not None:
            if abs(np.linalg.norm(self.front_normal) - 1.0) > UNIT_TOL:
                raise ValidationError(f"object {self.id}: front normal not unit")
        for surf in self.support_surfaces:
            try:
                surf.validate()
            except ValidationError as exc:
                raise ValidationError(f"object {self.id}: {exc}") from exc
            contour3 = np.column_stack(
                [
                    surf.contour_points,
                    np.full(len(surf.contour_points), surf.height),
                ]
            )
            if not np.all(self.obb.contains(contour3, slack=0.02)):
                raise ValidationError(
                    f"object {self.id}: surface contour outside OBB expanded by 2 cm"
                )


def identity_pose(obj: ObjectInstance) -> Pose:
    """The pose that leaves ``obj`` exactly where it is."""
    return Pose(0.0, 0.0, 0.0, obj.bottom_z)


def _transform_surface(
    surf: SupportSurface, rot2: np.ndarray, pivot_xy: np.ndarray,
    shift_xy: np.ndarray, dz: float,
) -> SupportSurface:
    pts = (surf.contour_points - pivot_xy) @ rot2.T + pivot_xy + shift_xy
    normals = surf.contour_normals @ rot2.T
    return replace(
        surf, height=surf.height + dz, contour_points=pts, contour_normals=normals
    )


def apply_pose(obj: ObjectInstance, pose: Pose) -> ObjectInstance:
    """Rigidly move an object by a planar pose.

    Points transform as ``p' = R(theta) (p - c) + c + (tx, ty, z - z0)`` where
    ``c`` is the horizontal projection of the OBB center and ``z0`` the
    object's current bottom height. The OBB, front normal, and support
    surfaces move consistently; OBB extents are unchanged.
    """
    if pose.tx == 0.0 and pose.ty == 0.0 and pose.theta == 0.0 and pose.z == obj.bottom_z:
        return obj
    rot2 = rotation_2d(pose.theta)
    pivot = obj.obb.center[:2].copy()
    shift_xy = np.array([pose.tx, pose.ty])
    dz = pose.z - obj.bottom_z

    pts = obj.points.copy()
    pts[:, :2] = (pts[:, :2] - pivot) @ rot2.T + pivot + shift_xy
    pts[:, 2] += dz

    rot3 = rotation_z(pose.theta)
    new_center = obj.obb.center + np.array([shift_xy[0], shift_xy[1], dz])
    new_axes = rot3 @ obj.obb.axes
    obb = OrientedBoundingBox(center=new_center, axes=new_axes, extents=obj.obb.extents.copy())

    front = None
    if obj.front_normal is not None:
        front = rot3 @ obj.front_normal

    surfaces = tuple(
        _transform_surface(s, rot2, pivot, shift_xy, dz) for s in obj.support_surfaces
    )
    return replace(
        obj, points=pts, obb=obb, front_normal=front, support_surfaces=surfaces
    )


@dataclass(frozen=True)
class Scene:
    """An instance-decomposed scene.

    ``floor`` is the walkable floor contour used by the in-bounds metric and
    as the root support region. ``walls`` lists the architectural wall object
    ids (architectural objects other than the floor owner). ``resolution_m``
    is the point sampling resolution; the collision stop threshold is four
    times this value.
    """

    objects: tuple[ObjectInstance, ...]
    floor: SupportSurface
    walls: tuple[int, ...] = ()
    resolution_m: float = DEFAULT_RESOLUTION_M

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "walls", tuple(self.walls))

    def object_by_id(self, object_id: int) -> ObjectInstance:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(f"no object with id {object_id}")

    def has_object(self, object_id: int) -> bool:
        return any(o.id == object_id for o in self.objects)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(o.id for o in self.objects)

    def with_objects(self, new_objects: Sequence[ObjectInstance]) -> "Scene":
        """Copy of the scene with some objects replaced (matched by id)."""
        by_id = {o.id: o for o in new_objects}
        return replace(
            self,
            objects=tuple(by_id.get(o.id, o) for o in self.objects),
        )

    def validate(self) -> None:
        ids = [o.id for o in self.objects]
        seen = set()
        for object_id in ids:
            if object_id in seen:
                raise ValidationError(f"duplicate object id {object_id}")
            seen.add(object_id)
        for obj in self.objects:
            obj.validate()
        if len(self.floor.contour_points) < 3:
            raise ValidationError("floor contour must be closed with >= 3 points")


def derive_walls(objects: Sequence[ObjectInstance], floor_owner: int) -> tuple[int, ...]:
    """Wall ids: architectural objects that are not the floor."""
    return tuple(
        o.id for o in objects if o.is_architectural and o.id != floor_owner
    )
