"""Joint scene optimization over per-object planar poses.

Resolves support, wall-contact, collision, and group-structure constraints
by gradient descent on (tx, ty, theta) per movable object, with heights
pinned to the assigned surfaces. Losses:

- on-top-of: mean hinge of the signed contour distance over the object's
  points, zero once every point is on or inside the target surface.
- against-wall: in the wall frame (+x into the room), distance of the
  object center from the contact gap (Dx_wall + Dx_o)/2 along x, plus |c_y|
  whenever the center leaves the wall's y-extent. Orientation stays pinned
  to the wall while the constraint is active.
- collision: per target, the mean hinge of pairwise point distances against
  a margin (over points of other objects inside the target's box) plus a
  mean hinge of center distances against a per-pair margin; the whole term
  is gated by a stop indicator once the target clears all gathered geometry
  by four point-resolutions.
- group: sum over ordered center pairs of the change in relative vectors
  against the initial configuration.

Within one descent step the discrete structure (gather sets, indicators,
and the world placement of constraint surfaces owned by moving objects) is
held frozen, so the per-step objective is piecewise smooth and its gradient
finite-difference checkable; indicators carry no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .model import ObjectInstance, Pose, Scene, SceneError, apply_pose, rotation_2d
from .graph import EdgeKind, SceneGraph

ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


class OptimizationError(SceneError):
    """Optimization could not proceed (bad constraints or diverged state)."""


@dataclass(frozen=True)
class SurfaceRef:
    """Reference to one support surface of a scene object."""

    owner_id: int
    surface_index: int


@dataclass(frozen=True)
class ConstraintSet:
    """Per-target constraints plus group structure.

    ``groups`` partitions (a subset of) the targets by shared (parent,
    surface); singleton groups contribute nothing.
    """

    on_top_of: dict[int, SurfaceRef] = field(default_factory=dict)
    against_wall: dict[int, int] = field(default_factory=dict)
    groups: tuple[tuple[int, ...], ...] = ()

    def validate(self, scene: Scene, targets: Sequence[int]) -> None:
        target_set = set(targets)
        for target, ref in self.on_top_of.items():
            if target not in target_set:
                raise OptimizationError(f"surface constraint for non-target {target}")
            owner = scene.object_by_id(ref.owner_id)
            if not 0 <= ref.surface_index < len(owner.support_surfaces):
                raise OptimizationError(
                    f"object {ref.owner_id} has no surface {ref.surface_index}"
                )
        for target, wall_id in self.against_wall.items():
            if target not in target_set:
                raise OptimizationError(f"wall constraint for non-target {target}")
            if wall_id not in scene.walls:
                raise OptimizationError(f"{wall_id} is not a wall")
        seen: set[int] = set()
        for group in self.groups:
            for member in group:
                if member in seen:
                    raise OptimizationError(f"object {member} in two groups")
                if member not in target_set:
                    raise OptimizationError(f"group member {member} is not a target")
                seen.add(member)

    def to_dict(self) -> dict:
        return {
            "on_top_of": {
                str(t): {"owner": r.owner_id, "surface_index": r.surface_index}
                for t, r in sorted(self.on_top_of.items())
            },
            "against_wall": {
                str(t): w for t, w in sorted(self.against_wall.items())
            },
            "groups": [list(g) for g in self.groups],
        }

    @staticmethod
    def from_dict(data: dict) -> "ConstraintSet":
        return ConstraintSet(
            on_top_of={
                int(t): SurfaceRef(int(r["owner"]), int(r["surface_index"]))
                for t, r in data.get("on_top_of", {}).items()
            },
            against_wall={
                int(t): int(w) for t, w in data.get("against_wall", {}).items()
            },
            groups=tuple(
                tuple(int(m) for m in g) for g in data.get("groups", [])
            ),
        )


@dataclass
class OptimizationConfig:
    """Weights, margins, and schedule for the joint optimization.

    ``delta_center`` of None uses the geometry-aware policy: the margin for
    a pair of centers is half the sum of their horizontal box diagonals, so
    center repulsion stays active until the boxes are roughly disjoint. A
    float fixes one margin for all pairs.
    """

    alpha: float = 2.0
    gamma: float = 1.0
    delta_point: float = 0.04
    delta_center: Optional[float] = None
    steps: int = 200
    lr_fraction: float = 0.25
    lr_theta_max: float = math.radians(15.0)
    seed: int = 0
    noise_scale: float = 0.0

    def validate(self) -> None:
        if self.alpha < 0 or self.gamma < 0:
            raise OptimizationError("loss weights must be non-negative")
        if self.steps < 1:
            raise OptimizationError("steps must be >= 1")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "delta_point": self.delta_point,
            "delta_center": self.delta_center,
            "steps": self.steps,
            "lr_fraction": self.lr_fraction,
            "lr_theta_max": self.lr_theta_max,
            "seed": self.seed,
            "noise_scale": self.noise_scale,
        }

    @staticmethod
    def from_dict(data: dict) -> "OptimizationConfig":
        cfg = OptimizationConfig()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise OptimizationError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class WallFrame:
    """Wall coordinate frame: origin at the wall center, +x into the room."""

    wall_id: int
    origin: np.ndarray  # (2,)
    x_axis: np.ndarray  # (2,) unit
    y_axis: np.ndarray  # (2,) unit
    dx_wall: float
    dy_wall: float

    @staticmethod
    def from_wall(wall: ObjectInstance) -> "WallFrame":
        if wall.front_normal is None:
            raise OptimizationError(f"wall {wall.id} has no front normal")
        x_axis = np.asarray(wall.front_normal[:2], dtype=float)
        norm = np.linalg.norm(x_axis)
        if norm < 1e-9:
            raise OptimizationError(f"wall {wall.id} front normal is vertical")
        x_axis = x_axis / norm
        y_axis = ROT90 @ x_axis
        return WallFrame(
            wall_id=wall.id,
            origin=wall.obb.center[:2].copy(),
            x_axis=x_axis,
            y_axis=y_axis,
            dx_wall=wall.obb.extent_along(x_axis),
            dy_wall=wall.obb.extent_along(y_axis),
        )

    def to_frame(self, point_xy: np.ndarray) -> np.ndarray:
        rel = np.asarray(point_xy, dtype=float) - self.origin
        return np.array([rel @ self.x_axis, rel @ self.y_axis])


def loss_on_top_of(points_xy: np.ndarray, contour: np.ndarray,
                   normals: np.ndarray) -> float:
    """Mean hinge of the signed contour distance over an object's points."""
    tree = cKDTree(contour)
    _, idx = tree.query(points_xy, k=1)
    d = np.einsum("ij,ij->i", points_xy - contour[idx], normals[idx])
    return float(np.sum(np.maximum(d, 0.0)) / len(points_xy))


def loss_against_wall(center_xy, dx_obj: float, frame: WallFrame) -> float:
    """Exact wall-contact loss; the second term activates in full beyond the
    wall's y-extent (a jump, not a hinge)."""
    c = frame.to_frame(center_xy)
    gap = (frame.dx_wall + dx_obj) / 2.0
    term = abs(c[0] - gap)
    if abs(c[1]) > frame.dy_wall / 2.0:
        term += abs(c[1])
    return float(term)


def loss_group(centers_now: np.ndarray, centers_init: np.ndarray) -> float:
    """Sum over ordered pairs of the relative-vector drift from init."""
    v_now = centers_now[None, :, :] - centers_now[:, None, :]
    v_init = centers_init[None, :, :] - centers_init[:, None, :]
    return float(np.linalg.norm(v_init - v_now, axis=2).sum())


@dataclass
class _Target:
    object_id: int
    base_points: np.ndarray      # (n, 3) at optimization start
    base_center: np.ndarray      # (3,)
    extents: np.ndarray          # (3,)
    surface: Optional[SurfaceRef]
    wall: Optional[WallFrame]
    dx_against_wall: float
    theta_pinned: bool


@dataclass
class StepStructure:
    """Discrete structure frozen for one descent step."""

    surfaces: dict[int, tuple[np.ndarray, np.ndarray, cKDTree]]
    gathers: dict[int, tuple[np.ndarray, np.ndarray]]  # (base points, owner slot)
    stop: dict[int, float]
    wall_active: dict[int, float]


class JointLossEvaluator:
    """Precomputed geometry and loss/gradient evaluation for one target set.

    Poses are (m, 3) arrays of (tx, ty, theta) per target, in sorted-id
    order, relative to the scene as passed in. Heights never change.
    """

    def __init__(
        self,
        scene: Scene,
        target_ids: Sequence[int],
        constraints: ConstraintSet,
        config: Optional[OptimizationConfig] = None,
        group_reference: Optional[dict[int, np.ndarray]] = None,
    ):
        self.scene = scene
        self.config = config or OptimizationConfig()
        self.config.validate()
        self.target_ids = tuple(sorted(target_ids))
        for target_id in self.target_ids:
            if scene.object_by_id(target_id).is_architectural:
                raise OptimizationError(f"target {target_id} is architectural")
        constraints.validate(scene, self.target_ids)
        self.constraints = constraints
        self.slot = {t: i for i, t in enumerate(self.target_ids)}

        self.targets: list[_Target] = []
        for target_id in self.target_ids:
            obj = scene.object_by_id(target_id)
            wall_frame = None
            dx_wall_obj = 0.0
            pinned = False
            if target_id in constraints.against_wall:
                wall = scene.object_by_id(constraints.against_wall[target_id])
                wall_frame = WallFrame.from_wall(wall)
                dx_wall_obj = obj.obb.extent_along(wall_frame.x_axis)
                pinned = True
            self.targets.append(
                _Target(
                    object_id=target_id,
                    base_points=obj.points.copy(),
                    base_center=obj.obb.center.copy(),
                    extents=obj.obb.extents.copy(),
                    surface=constraints.on_top_of.get(target_id),
                    wall=wall_frame,
                    dx_against_wall=dx_wall_obj,
                    theta_pinned=pinned,
                )
            )

        # Per-object KD trees over base points, for box gathers.
        self._object_trees: dict[int, cKDTree] = {}
        self._object_points: dict[int, np.ndarray] = {}
        for obj in scene.objects:
            self._object_points[obj.id] = obj.points
            self._object_trees[obj.id] = cKDTree(obj.points)

        # Group structure: member slots plus reference centers.
        self.groups: list[tuple[list[int], np.ndarray]] = []
        for group in constraints.groups:
            if len(group) < 2:
                continue
            slots = [self.slot[m] for m in group]
            if group_reference is not None:
                ref = np.array([group_reference[m][:2] for m in group])
            else:
                ref = np.array(
                    [scene.object_by_id(m).obb.center[:2] for m in group]
                )
            self.groups.append((slots, ref))

        self.stop_margin = 4.0 * scene.resolution_m

    # -- pose helpers -----------------------------------------------------

    def initial_poses(self) -> np.ndarray:
        return np.zeros((len(self.targets), 3))

    def posed_points(self, target: _Target, pose_row: np.ndarray) -> np.ndarray:
        if not pose_row.any():
            return target.base_points
        rot = rotation_2d(pose_row[2])
        pts = target.base_points.copy()
        pivot = target.base_center[:2]
        pts[:, :2] = (pts[:, :2] - pivot) @ rot.T + pivot + pose_row[:2]
        return pts

    def posed_center(self, target: _Target, pose_row: np.ndarray) -> np.ndarray:
        return target.base_center[:2] + pose_row[:2]

    def posed_obb_corners(self, target: _Target, pose_row: np.ndarray):
        obj = self.scene.object_by_id(target.object_id)
        rot = rotation_2d(pose_row[2])
        axes2 = rot @ obj.obb.axes[:2, :2]
        center = self.posed_center(target, pose_row)
        return center, axes2, obj.obb.extents

    # -- structure freezing ------------------------------------------------

    def _surface_snapshot(self, ref: SurfaceRef, poses: np.ndarray):
        owner = self.scene.object_by_id(ref.owner_id)
        surface = owner.support_surfaces[ref.surface_index]
        contour = surface.contour_points
        normals = surface.contour_normals
        if ref.owner_id in self.slot:
            row = poses[self.slot[ref.owner_id]]
            rot = rotation_2d(row[2])
            pivot = owner.obb.center[:2]
            contour = (contour - pivot) @ rot.T + pivot + row[:2]
            normals = normals @ rot.T
        return contour, normals, cKDTree(contour)

    def _gather_obstacles(self, index: int, poses: np.ndarray):
        """Base points of other objects inside the target's posed box.

        The target's designated contact partners (its support parent, its
        constrained wall) are exempt: resting or wall contact is sanctioned
        by the corresponding loss and must not register as collision.
        """
        target = self.targets[index]
        exempt = {target.object_id}
        if target.surface is not None:
            exempt.add(target.surface.owner_id)
        if target.wall is not None:
            exempt.add(target.wall.wall_id)
        center, axes2, extents = self.posed_obb_corners(target, poses[index])
        z_half = extents[2] / 2.0
        z_center = target.base_center[2]
        radius = float(np.linalg.norm(extents / 2.0)) + 1e-9

        base_rows = []
        owner_rows = []
        for obj in self.scene.objects:
            if obj.id in exempt:
                continue
            pts = self._object_points[obj.id]
            owner_slot = self.slot.get(obj.id, -1)
            if owner_slot >= 0 and poses[owner_slot].any():
                # Query in the owner's base frame: move the box query back.
                row = poses[owner_slot]
                inv_rot = rotation_2d(-row[2])
                pivot = self.targets[owner_slot].base_center[:2]
                q_center_xy = inv_rot @ (center - row[:2] - pivot) + pivot
                q_axes = inv_rot @ axes2
            else:
                q_center_xy = center
                q_axes = axes2
            query = np.array([q_center_xy[0], q_center_xy[1], z_center])
            candidates = self._object_trees[obj.id].query_ball_point(query, radius)
            if not candidates:
                continue
            candidates = np.sort(np.asarray(candidates, dtype=int))
            local = pts[candidates] - query
            inside = (
                (np.abs(local[:, :2] @ q_axes) <= extents[:2] / 2.0).all(axis=1)
                & (np.abs(local[:, 2]) <= z_half)
            )
            if inside.any():
                base_rows.append(pts[candidates[inside]])
                owner_rows.append(np.full(int(inside.sum()), owner_slot))
        if base_rows:
            return np.concatenate(base_rows), np.concatenate(owner_rows)
        return np.zeros((0, 3)), np.zeros(0, dtype=int)

    def freeze(self, poses: np.ndarray) -> StepStructure:
        """Snapshot the discrete structure at the current poses."""
        surfaces = {}
        gathers = {}
        stop = {}
        wall_active = {}
        for i, target in enumerate(self.targets):
            if target.surface is not None:
                surfaces[target.object_id] = self._surface_snapshot(
                    target.surface, poses
                )
            base, owners = self._gather_obstacles(i, poses)
            gathers[target.object_id] = (base, owners)
            if len(base):
                posed_q = self._pose_obstacles(base, owners, poses)
                posed_p = self.posed_points(target, poses[i])
                tree = cKDTree(posed_q)
                min_d, _ = tree.query(posed_p, k=1)
                stop[target.object_id] = (
                    1.0 if float(np.min(min_d)) < self.stop_margin else 0.0
                )
            else:
                stop[target.object_id] = 0.0
            if target.wall is not None:
                c = target.wall.to_frame(self.posed_center(target, poses[i]))
                wall_active[target.object_id] = (
                    1.0 if abs(c[1]) > target.wall.dy_wall / 2.0 else 0.0
                )
        return StepStructure(
            surfaces=surfaces, gathers=gathers, stop=stop, wall_active=wall_active
        )

    def _pose_obstacles(
        self, base: np.ndarray, owners: np.ndarray, poses: np.ndarray
    ) -> np.ndarray:
        out = base.copy()
        for owner_slot in np.unique(owners):
            if owner_slot < 0 or not poses[owner_slot].any():
                continue
            mask = owners == owner_slot
            row = poses[owner_slot]
            rot = rotation_2d(row[2])
            pivot = self.targets[owner_slot].base_center[:2]
            out[mask, :2] = (out[mask, :2] - pivot) @ rot.T + pivot + row[:2]
        return out

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, poses: np.ndarray, structure: StepStructure,
                 want_grad: bool = True):
        """Total loss, per-kind components, and (m, 3) gradients."""
        cfg = self.config
        m = len(self.targets)
        grads = np.zeros((m, 3))
        comps = {"on_top_of": 0.0, "against_wall": 0.0, "collision": 0.0,
                 "group": 0.0}

        posed_pts = [
            self.posed_points(t, poses[i]) for i, t in enumerate(self.targets)
        ]
        centers = np.array(
            [self.posed_center(t, poses[i]) for i, t in enumerate(self.targets)]
        )

        # on-top-of
        for i, target in enumerate(self.targets):
            if target.surface is None:
                continue
            contour, normals, tree = structure.surfaces[target.object_id]
            pts_xy = posed_pts[i][:, :2]
            _, idx = tree.query(pts_xy, k=1)
            d = np.einsum("ij,ij->i", pts_xy - contour[idx], normals[idx])
            active = d > 0.0
            n = len(pts_xy)
            comps["on_top_of"] += float(d[active].sum() / n)
            if want_grad and active.any():
                na = normals[idx[active]]
                grads[i, :2] += na.sum(axis=0) / n
                arm = (pts_xy[active] - centers[i]) @ ROT90.T
                grads[i, 2] += float(np.einsum("ij,ij->", na, arm) / n)

        # against-wall
        for i, target in enumerate(self.targets):
            if target.wall is None:
                continue
            frame = target.wall
            c = frame.to_frame(centers[i])
            gap = (frame.dx_wall + target.dx_against_wall) / 2.0
            opt = structure.wall_active[target.object_id]
            comps["against_wall"] += abs(c[0] - gap) + opt * abs(c[1])
            if want_grad:
                if c[0] != gap:
                    grads[i, :2] += math.copysign(1.0, c[0] - gap) * frame.x_axis
                if opt and c[1] != 0.0:
                    grads[i, :2] += math.copysign(1.0, c[1]) * frame.y_axis

        # collision
        col_grads = np.zeros((m, 3))
        collision = 0.0
        n_t = m
        for i, target in enumerate(self.targets):
            if structure.stop[target.object_id] == 0.0:
                continue
            base, owners = structure.gathers[target.object_id]
            term = 0.0
            if len(base):
                q = self._pose_obstacles(base, owners, poses)
                p = posed_pts[i]
                diff = p[:, None, :] - q[None, :, :]
                dist = np.linalg.norm(diff, axis=2)
                n_pairs = dist.size
                hinge = np.maximum(cfg.delta_point - dist, 0.0)
                term += float(np.sum(hinge) / n_pairs)
                if want_grad:
                    active = hinge > 0.0
                    if active.any():
                        pi, qi = np.nonzero(active)
                        u = diff[pi, qi]
                        dd = dist[pi, qi]
                        dd[dd < 1e-12] = 1e-12
                        u_xy = u[:, :2] / dd[:, None] / n_pairs
                        col_grads[i, :2] += -u_xy.sum(axis=0)
                        arm_p = (p[pi, :2] - centers[i]) @ ROT90.T
                        col_grads[i, 2] += float(
                            -np.einsum("ij,ij->", u_xy, arm_p)
                        )
                        for owner_slot in np.unique(owners[qi]):
                            if owner_slot < 0:
                                continue
                            sel = owners[qi] == owner_slot
                            col_grads[owner_slot, :2] += u_xy[sel].sum(axis=0)
                            arm_q = (
                                q[qi[sel], :2] - centers[owner_slot]
                            ) @ ROT90.T
                            col_grads[owner_slot, 2] += float(
                                np.einsum("ij,ij->", u_xy[sel], arm_q)
                            )
            if n_t > 1:
                deltas = np.delete(centers, i, axis=0) - centers[i]
                others = [j for j in range(n_t) if j != i]
                dist_c = np.linalg.norm(deltas, axis=1)
                margins = np.array(
                    [self._center_margin(i, j) for j in others]
                )
                hinge_c = np.maximum(margins - dist_c, 0.0)
                term += float(hinge_c.sum() / (n_t - 1))
                if want_grad:
                    for row, j in enumerate(others):
                        if hinge_c[row] <= 0.0:
                            continue
                        d = max(dist_c[row], 1e-12)
                        u = (centers[i] - centers[j]) / d / (n_t - 1)
                        col_grads[i, :2] += -u
                        col_grads[j, :2] += u
            collision += term
        comps["collision"] = collision

        # group
        group_grads = np.zeros((m, 3))
        group_total = 0.0
        for slots, ref in self.groups:
            now = centers[slots]
            v_now = now[None, :, :] - now[:, None, :]
            v_ref = ref[None, :, :] - ref[:, None, :]
            u = v_ref - v_now
            norms = np.linalg.norm(u, axis=2)
            group_total += float(norms.sum())
            if want_grad:
                safe = norms.copy()
                safe[safe < 1e-12] = 1.0
                unit = u / safe[:, :, None]
                unit[norms < 1e-12] = 0.0
                # d||u_ij|| / dc_j = -unit_ij, / dc_i = +unit_ij
                for a, slot_a in enumerate(slots):
                    group_grads[slot_a, :2] += unit[a, :, :].sum(axis=0)
                    group_grads[slot_a, :2] -= unit[:, a, :].sum(axis=0)
        comps["group"] = group_total

        total = (
            comps["on_top_of"]
            + comps["against_wall"]
            + cfg.alpha * comps["collision"]
            + cfg.gamma * comps["group"]
        )
        if want_grad:
            grads += cfg.alpha * col_grads + cfg.gamma * group_grads
            for i, target in enumerate(self.targets):
                if target.theta_pinned:
                    grads[i, 2] = 0.0
        return total, comps, grads

    def _center_margin(self, i: int, j: int) -> float:
        if self.config.delta_center is not None:
            return float(self.config.delta_center)
        di = math.hypot(self.targets[i].extents[0], self.targets[i].extents[1])
        dj = math.hypot(self.targets[j].extents[0], self.targets[j].extents[1])
        return (di + dj) / 2.0

    def loss(self, poses: np.ndarray, structure: Optional[StepStructure] = None):
        if structure is None:
            structure = self.freeze(poses)
        total, comps, _ = self.evaluate(poses, structure, want_grad=False)
        return total, comps

    def gradients(self, poses: np.ndarray, structure: Optional[StepStructure] = None):
        if structure is None:
            structure = self.freeze(poses)
        _, _, grads = self.evaluate(poses, structure, want_grad=True)
        return grads


@dataclass
class OptimizationResult:
    target_ids: tuple[int, ...]
    poses: dict[int, Pose]
    trace: list[dict]
    final_total: float
    components: dict[str, float]


def cosine_schedule(step: int, steps: int) -> float:
    return (1.0 + math.cos(math.pi * step / steps)) / 2.0


def optimize_scene(
    scene: Scene,
    target_ids: Sequence[int],
    constraints: ConstraintSet,
    config: Optional[OptimizationConfig] = None,
    group_reference: Optional[dict[int, np.ndarray]] = None,
) -> OptimizationResult:
    """Run the joint gradient descent and return final poses plus a trace.

    Steps are bounded per object and axis by a cosine-annealed cap of a
    quarter of the object's box extent (15 degrees for rotation); raw
    gradient steps beyond the cap are clipped to it. Objects under an
    active wall constraint keep their orientation pinned.
    """
    config = config or OptimizationConfig()
    evaluator = JointLossEvaluator(
        scene, target_ids, constraints, config, group_reference
    )
    poses = evaluator.initial_poses()
    rng = np.random.default_rng(config.seed)
    trace: list[dict] = []

    bounds_xy = np.array(
        [
            [config.lr_fraction * t.extents[0], config.lr_fraction * t.extents[1]]
            for t in evaluator.targets
        ]
    )

    for step in range(config.steps):
        structure = evaluator.freeze(poses)
        total, comps, grads = evaluator.evaluate(poses, structure)
        if not math.isfinite(total):
            offender = _find_non_finite(evaluator, poses, structure)
            raise OptimizationError(
                f"non-finite loss at step {step} (object {offender})"
            )
        sched = cosine_schedule(step, config.steps)
        cap = np.column_stack(
            [bounds_xy * sched, np.full(len(poses), config.lr_theta_max * sched)]
        )
        delta = -np.clip(grads, -cap, cap)
        if config.noise_scale > 0.0:
            delta[:, :2] += rng.normal(
                scale=config.noise_scale * sched, size=delta[:, :2].shape
            )
        for i, target in enumerate(evaluator.targets):
            if target.theta_pinned:
                delta[i, 2] = 0.0
        trace.append(
            {
                "step": step,
                "total": total,
                **comps,
                "lr_x": {
                    str(t.object_id): float(bounds_xy[i, 0] * sched)
                    for i, t in enumerate(evaluator.targets)
                },
                "max_step": float(np.abs(delta).max()) if len(delta) else 0.0,
            }
        )
        poses = poses + delta

    final_total, final_comps = evaluator.loss(poses)
    trace.append(
        {
            "step": config.steps,
            "total": final_total,
            **final_comps,
            "lr_x": {str(t.object_id): 0.0 for t in evaluator.targets},
            "max_step": 0.0,
        }
    )

    out_poses = {}
    for i, target in enumerate(evaluator.targets):
        obj = scene.object_by_id(target.object_id)
        out_poses[target.object_id] = Pose(
            tx=float(poses[i, 0]),
            ty=float(poses[i, 1]),
            theta=float(poses[i, 2]),
            z=obj.bottom_z,
        )
    return OptimizationResult(
        target_ids=evaluator.target_ids,
        poses=out_poses,
        trace=trace,
        final_total=final_total,
        components=final_comps,
    )


def _find_non_finite(evaluator, poses, structure) -> int:
    for i, target in enumerate(evaluator.targets):
        pts = evaluator.posed_points(target, poses[i])
        if not np.all(np.isfinite(pts)):
            return target.object_id
    return evaluator.targets[0].object_id if evaluator.targets else -1


def apply_optimized_poses(scene: Scene, poses: dict[int, Pose]) -> Scene:
    """New scene with the optimized poses applied to their objects."""
    moved = []
    for object_id, pose in sorted(poses.items()):
        obj = scene.object_by_id(object_id)
        moved.append(apply_pose(obj, pose))
    return scene.with_objects(moved)


def groups_from_assignments(
    assignments: dict[int, SurfaceRef]
) -> tuple[tuple[int, ...], ...]:
    """Partition targets into groups by shared (parent, surface)."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for target, ref in sorted(assignments.items()):
        buckets.setdefault((ref.owner_id, ref.surface_index), []).append(target)
    return tuple(tuple(members) for _, members in sorted(buckets.items()))
