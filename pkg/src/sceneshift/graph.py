"""Hierarchical scene graph: node attribute estimation and edge detection.

Nodes are scene objects; directed typed edges encode `on top of' (an object
rests on another object's support surface), `against wall', and `facing'.
All relations are detected with plain 3D heuristics over the point clouds.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .model import (
    ObjectInstance,
    Scene,
    SceneError,
    SupportSurface,
    compute_obb,
)

logger = logging.getLogger(__name__)

# Detection thresholds. The 5 cm support / wall-contact gaps and the 1 cm
# float tolerance are fixed by the relation definitions; the 15 degree
# alignment cone and the 3 m facing range are engine policy.
ON_TOP_MAX_GAP_M = 0.05
AGAINST_WALL_MAX_DIST_M = 0.05
ALIGNMENT_MAX_DEG = 15.0
FACING_MAX_RANGE_M = 3.0

LEVEL_BIN_M = 0.02
LEVEL_MIN_FRACTION = 0.05
MIN_SURFACE_AREA_M2 = 0.01
CONTOUR_ANGULAR_BINS = 64
VERTICAL_NORMAL_MIN_Z = 0.85
NORMAL_NEIGHBORS = 12


class GraphError(SceneError):
    """Scene graph construction failed."""


class EdgeKind(enum.Enum):
    ON_TOP_OF = "on_top_of"
    AGAINST_WALL = "against_wall"
    FACING = "facing"


@dataclass(frozen=True, order=True)
class Edge:
    """Directed typed edge src -> dst. ``surface_index`` indexes the dst
    object's support surfaces for on-top-of edges."""

    src: int
    dst: int
    kind: EdgeKind = field(compare=False)
    surface_index: Optional[int] = None

    def sort_key(self):
        return (self.src, self.dst, self.kind.value, self.surface_index or 0)

    def to_dict(self) -> dict:
        out = {"src": self.src, "dst": self.dst, "kind": self.kind.value}
        if self.surface_index is not None:
            out["surface_index"] = self.surface_index
        return out

    @staticmethod
    def from_dict(data: dict) -> "Edge":
        return Edge(
            src=int(data["src"]),
            dst=int(data["dst"]),
            kind=EdgeKind(data["kind"]),
            surface_index=data.get("surface_index"),
        )


@dataclass(frozen=True)
class SceneGraph:
    node_ids: tuple[int, ...]
    edges: tuple[Edge, ...]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(
            self, "edges", tuple(sorted(self.edges, key=Edge.sort_key))
        )

    def edges_of_kind(self, kind: EdgeKind) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.kind == kind)

    def on_top_parent(self, node_id: int) -> Optional[Edge]:
        for e in self.edges:
            if e.kind == EdgeKind.ON_TOP_OF and e.src == node_id:
                return e
        return None

    def children_of(self, node_id: int) -> tuple[int, ...]:
        return tuple(
            e.src for e in self.edges
            if e.kind == EdgeKind.ON_TOP_OF and e.dst == node_id
        )

    def descendants_of(self, node_id: int) -> tuple[int, ...]:
        """All transitive on-top-of descendants, depth first, deterministic."""
        out: list[int] = []
        stack = [node_id]
        while stack:
            current = stack.pop()
            kids = sorted(self.children_of(current))
            out.extend(k for k in kids if k not in out)
            stack.extend(reversed(kids))
        return tuple(k for k in out if k != node_id)

    def validate(self) -> None:
        nodes = set(self.node_ids)
        parents: dict[int, int] = {}
        for e in self.edges:
            if e.src not in nodes or e.dst not in nodes:
                raise GraphError(f"edge {e.src}->{e.dst} references unknown node")
            if e.kind == EdgeKind.ON_TOP_OF:
                if e.src in parents:
                    raise GraphError(f"node {e.src} has two on-top-of parents")
                parents[e.src] = e.dst
        # Forest check: walking parent pointers must terminate.
        for start in parents:
            seen = {start}
            current = start
            while current in parents:
                current = parents[current]
                if current in seen:
                    raise GraphError(f"on-top-of cycle through node {current}")
                seen.add(current)

    def to_dict(self, scene: Optional[Scene] = None) -> dict:
        nodes = []
        for node_id in self.node_ids:
            entry: dict = {"id": node_id}
            if scene is not None and scene.has_object(node_id):
                obj = scene.object_by_id(node_id)
                entry.update(
                    {
                        "class": obj.class_label,
                        "color": obj.color,
                        "material": obj.material,
                        "is_architectural": obj.is_architectural,
                        "center": obj.obb.center.tolist(),
                        "extents": obj.obb.extents.tolist(),
                        "heading": obj.obb.heading,
                        "num_surfaces": len(obj.support_surfaces),
                    }
                )
            nodes.append(entry)
        return {
            "nodes": nodes,
            "edges": [e.to_dict() for e in self.edges],
            "warnings": list(self.warnings),
        }

    @staticmethod
    def from_dict(data: dict) -> "SceneGraph":
        return SceneGraph(
            node_ids=tuple(n["id"] for n in data["nodes"]),
            edges=tuple(Edge.from_dict(e) for e in data["edges"]),
            warnings=tuple(data.get("warnings", ())),
        )


# ---------------------------------------------------------------------------
# Shared signed-distance primitive

def closest_contour_indices(
    points_xy: np.ndarray, surface: SupportSurface
) -> np.ndarray:
    """Index of the nearest contour point for each query point."""
    pts = np.atleast_2d(np.asarray(points_xy, dtype=float))
    contour = surface.contour_points
    if len(contour) > 48:
        tree = cKDTree(contour)
        _, idx = tree.query(pts, k=1)
        return np.atleast_1d(idx)
    d2 = ((pts[:, None, :] - contour[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def signed_distances_to_contour(
    points_xy: np.ndarray, surface: SupportSurface
) -> np.ndarray:
    """Signed distance of 2D points to a surface contour.

    For each point p, d(p) = (p - p_s) . n_s with p_s the closest contour
    point and n_s its outward normal: positive outside, negative inside.
    """
    pts = np.atleast_2d(np.asarray(points_xy, dtype=float))
    idx = closest_contour_indices(pts, surface)
    diff = pts - surface.contour_points[idx]
    return np.einsum("ij,ij->i", diff, surface.contour_normals[idx])


def signed_distance_to_contour(point_xy, surface: SupportSurface) -> float:
    return float(signed_distances_to_contour(point_xy, surface)[0])


# ---------------------------------------------------------------------------
# Node attributes

def estimate_point_normals(points: np.ndarray, k: int = NORMAL_NEIGHBORS) -> np.ndarray:
    """Per-point unit normals from local PCA, oriented away from the centroid."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    k = min(k, n - 1)
    if k < 2:
        return np.tile([0.0, 0.0, 1.0], (n, 1))
    tree = cKDTree(pts)
    _, neighbor_idx = tree.query(pts, k=k + 1)
    neighborhoods = pts[neighbor_idx]  # (n, k+1, 3)
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    _, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]  # smallest eigenvalue
    centroid = pts.mean(axis=0)
    outward = pts - centroid
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] *= -1.0
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths[lengths < 1e-12] = 1.0
    return normals / lengths


def _angular_bin_contour(points_xy: np.ndarray, bins: int = CONTOUR_ANGULAR_BINS):
    """Farthest point from the barycenter per angular bin, ordered by angle."""
    barycenter = points_xy.mean(axis=0)
    rel = points_xy - barycenter
    radius = np.linalg.norm(rel, axis=1)
    angle = np.arctan2(rel[:, 1], rel[:, 0])
    bin_idx = np.floor((angle + math.pi) / (2 * math.pi) * bins).astype(int)
    bin_idx = np.clip(bin_idx, 0, bins - 1)
    chosen = {}
    for b in range(bins):
        mask = bin_idx == b
        if not mask.any():
            continue
        local = np.nonzero(mask)[0]
        best = local[np.argmax(radius[local])]
        chosen[b] = best
    order = sorted(chosen.keys())
    idx = [chosen[b] for b in order]
    return points_xy[idx], barycenter


def _smooth_closed_contour(
    contour: np.ndarray, resolution: float
) -> tuple[np.ndarray, np.ndarray]:
    """Periodic cubic interpolation through contour points, resampled at
    ~resolution spacing. Returns (points, unit tangents)."""
    closed = np.vstack([contour, contour[:1]])
    seglen = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    keep = np.concatenate([[True], seglen > 1e-9])
    closed = closed[keep]
    if len(closed) < 4:
        raise GraphError("contour too degenerate for interpolation")
    seglen = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(seglen)])
    total = t[-1]
    spline = CubicSpline(t, closed, bc_type="periodic", axis=0)
    samples = max(12, int(round(total / resolution)))
    ts = np.linspace(0.0, total, samples, endpoint=False)
    pts = spline(ts)
    tangents = spline(ts, 1)
    lengths = np.linalg.norm(tangents, axis=1, keepdims=True)
    lengths[lengths < 1e-12] = 1.0
    return pts, tangents / lengths


def extract_support_surfaces(
    obj: ObjectInstance, resolution_m: float
) -> list[SupportSurface]:
    """Detect horizontal support regions of an object.

    Points with near-vertical local normals are histogrammed by height in
    2 cm bins; runs of bins holding at least 5% of the object's points each
    form one level. Per level the contour is the farthest point from the
    level barycenter in each of 64 angular bins, smoothed by a closed cubic
    interpolation and resampled at the point resolution. Surfaces smaller
    than 0.01 m^2 are rejected.
    """
    pts = obj.points
    if len(pts) < 50:
        return []
    normals = estimate_point_normals(pts)
    up_mask = np.abs(normals[:, 2]) >= VERTICAL_NORMAL_MIN_Z
    up_points = pts[up_mask]
    if len(up_points) < 3:
        return []

    z = up_points[:, 2]
    z_lo = float(pts[:, 2].min())
    z_hi = float(pts[:, 2].max())
    n_bins = max(1, int(math.ceil((z_hi - z_lo) / LEVEL_BIN_M)) + 1)
    bin_idx = np.clip(((z - z_lo) / LEVEL_BIN_M).astype(int), 0, n_bins - 1)
    counts = np.bincount(bin_idx, minlength=n_bins)
    threshold = LEVEL_MIN_FRACTION * len(pts)
    qualifying = counts >= max(threshold, 3)

    surfaces = []
    b = 0
    while b < n_bins:
        if not qualifying[b]:
            b += 1
            continue
        run_start = b
        while b < n_bins and qualifying[b]:
            b += 1
        run_end = b  # exclusive
        in_run = (bin_idx >= run_start) & (bin_idx < run_end)
        level_points = up_points[in_run]
        if len(level_points) < CONTOUR_ANGULAR_BINS // 8:
            continue
        height = float(level_points[:, 2].mean())
        contour_raw, _ = _angular_bin_contour(level_points[:, :2])
        if len(contour_raw) < 4:
            continue
        try:
            contour, tangents = _smooth_closed_contour(contour_raw, resolution_m)
        except GraphError:
            continue
        normals_xy = np.column_stack([tangents[:, 1], -tangents[:, 0]])
        barycenter = contour.mean(axis=0)
        outward = contour - barycenter
        flip = np.einsum("ij,ij->i", normals_xy, outward) < 0
        normals_xy[flip] *= -1.0
        surface = SupportSurface(
            owner_id=obj.id,
            height=height,
            contour_points=contour,
            contour_normals=normals_xy,
        )
        if surface.area() < MIN_SURFACE_AREA_M2:
            continue
        surfaces.append(surface)

    # Clearance: vertical space to the owner's next geometry above the level.
    finished = []
    for surface in surfaces:
        above = pts[:, 2] > surface.height + 2 * LEVEL_BIN_M
        if above.any():
            sd = signed_distances_to_contour(pts[above][:, :2], surface)
            over = pts[above][sd <= 0.0]
            clearance = (
                float(over[:, 2].min() - surface.height) if len(over) else math.inf
            )
        else:
            clearance = math.inf
        finished.append(replace(surface, max_clearance=clearance))
    return finished


def estimate_front_normal(
    obj: ObjectInstance, has_semantic_front: Optional[bool] = None
) -> np.ndarray:
    """Estimate the horizontal direction an object faces.

    Point normals oriented away from the centroid accumulate on the object's
    dominant closed shell (its back); the front is the horizontal OBB axis
    direction opposite that mean. Symmetric objects, where the mean carries
    no horizontal signal, fall back to the major OBB axis direction closest
    to world +x.
    """
    if has_semantic_front is None:
        has_semantic_front = obj.has_semantic_front
    obb = obj.obb
    if obb.dx < 1e-9 and obb.dy < 1e-9:
        logger.warning("object %d: degenerate OBB, front normal set to +x", obj.id)
        return np.array([1.0, 0.0, 0.0])
    candidates = [
        obb.axes[:, 0].copy(), -obb.axes[:, 0], obb.axes[:, 1].copy(), -obb.axes[:, 1]
    ]
    candidates = [c / np.linalg.norm(c) for c in candidates]

    normals = estimate_point_normals(obj.points)
    mean_normal = normals.mean(axis=0)
    mean_h = mean_normal.copy()
    mean_h[2] = 0.0
    if np.linalg.norm(mean_h) < 1e-6:
        best = max(candidates, key=lambda c: (c[0], c[1]))
        return best
    scores = [float(-c @ mean_h) for c in candidates]
    return candidates[int(np.argmax(scores))]


def annotate_scene(scene: Scene) -> Scene:
    """Fill in missing support surfaces and front normals for all objects."""
    updated = []
    for obj in scene.objects:
        new_obj = obj
        if not new_obj.support_surfaces:
            surfaces = extract_support_surfaces(new_obj, scene.resolution_m)
            if surfaces:
                new_obj = replace(new_obj, support_surfaces=tuple(surfaces))
        if new_obj.front_normal is None:
            front = estimate_front_normal(new_obj)
            new_obj = replace(new_obj, front_normal=front)
        updated.append(new_obj)
    return replace(scene, objects=tuple(updated))


def is_annotated(scene: Scene) -> bool:
    return all(o.front_normal is not None for o in scene.objects)


# ---------------------------------------------------------------------------
# Edge detection

def _horizontal_angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    """Angle in degrees between the horizontal components of two vectors."""
    uh = np.asarray(u, dtype=float)[:2]
    vh = np.asarray(v, dtype=float)[:2]
    nu, nv = np.linalg.norm(uh), np.linalg.norm(vh)
    if nu < 1e-12 or nv < 1e-12:
        return 180.0
    cos = float(np.clip(uh @ vh / (nu * nv), -1.0, 1.0))
    return math.degrees(math.acos(cos))


def iter_support_surfaces(scene: Scene):
    """Yield (owner_id, surface_index, surface) over all objects, sorted."""
    for obj in sorted(scene.objects, key=lambda o: o.id):
        for index, surface in enumerate(obj.support_surfaces):
            yield obj.id, index, surface


def detect_on_top_of(scene: Scene) -> list[Edge]:
    """Assign each non-architectural object to its closest support surface.

    A surface qualifies when it belongs to another object and its height is
    within 5 cm of the object's minimum point height; closest means smallest
    horizontal distance from the object's footprint center to the surface
    region (zero when the center projects inside the contour).
    """
    surfaces = list(iter_support_surfaces(scene))
    edges = []
    for obj in scene.objects:
        if obj.is_architectural:
            continue
        bottom = obj.bottom_z
        center = obj.obb.center[:2]
        best = None
        for owner_id, index, surface in surfaces:
            if owner_id == obj.id:
                continue
            gap = abs(surface.height - bottom)
            if gap >= ON_TOP_MAX_GAP_M:
                continue
            sd = signed_distance_to_contour(center, surface)
            dist = max(sd, 0.0)
            key = (dist, gap, owner_id, index)
            if best is None or key < best[0]:
                best = (key, owner_id, index)
        if best is not None:
            edges.append(
                Edge(src=obj.id, dst=best[1], kind=EdgeKind.ON_TOP_OF,
                     surface_index=best[2])
            )
    return edges


def detect_against_wall(scene: Scene) -> list[Edge]:
    """Objects whose front normal aligns with a wall's and that touch it.

    Requires the angle between the horizontal front normals to stay below
    15 degrees and the minimum point-to-point distance below 5 cm.
    """
    edges = []
    wall_trees = {}
    for wall_id in scene.walls:
        wall = scene.object_by_id(wall_id)
        if wall.front_normal is None:
            continue
        wall_trees[wall_id] = (wall, cKDTree(wall.points))
    for obj in scene.objects:
        if obj.is_architectural or obj.front_normal is None:
            continue
        for wall_id, (wall, tree) in sorted(wall_trees.items()):
            angle = _horizontal_angle_deg(obj.front_normal, wall.front_normal)
            if angle >= ALIGNMENT_MAX_DEG:
                continue
            min_dist, _ = tree.query(obj.points, k=1)
            if float(np.min(min_dist)) < AGAINST_WALL_MAX_DIST_M:
                edges.append(Edge(src=obj.id, dst=wall_id, kind=EdgeKind.AGAINST_WALL))
    return edges


def detect_facing(scene: Scene) -> list[Edge]:
    """Objects whose front normal points at another object's center.

    The angle between the horizontal front normal and the center-to-center
    direction must stay below 15 degrees; pairs farther apart than 3 m are
    skipped to bound the edge count in large scans. Architecture neither
    faces nor is faced (wall adjacency has its own relation).
    """
    edges = []
    objects = sorted(scene.objects, key=lambda o: o.id)
    for src in objects:
        if src.is_architectural or src.front_normal is None:
            continue
        for dst in objects:
            if dst.id == src.id or dst.is_architectural:
                continue
            direction = dst.obb.center[:2] - src.obb.center[:2]
            dist = float(np.linalg.norm(direction))
            if dist > FACING_MAX_RANGE_M or dist < 1e-9:
                continue
            angle = _horizontal_angle_deg(src.front_normal, np.append(direction, 0.0))
            if angle < ALIGNMENT_MAX_DEG:
                edges.append(Edge(src=src.id, dst=dst.id, kind=EdgeKind.FACING))
    return edges


def _enforce_acyclic(edges: list[Edge], scene: Scene) -> tuple[list[Edge], list[str]]:
    """Break on-top-of cycles, dropping the edge with the larger height gap."""
    warnings = []
    by_src = {e.src: e for e in edges if e.kind == EdgeKind.ON_TOP_OF}

    def height_gap(edge: Edge) -> float:
        obj = scene.object_by_id(edge.src)
        surface = scene.object_by_id(edge.dst).support_surfaces[edge.surface_index]
        return abs(surface.height - obj.bottom_z)

    removed = set()
    for start in sorted(by_src):
        path = []
        seen = set()
        current = start
        while current in by_src and id(by_src[current]) not in removed:
            if current in seen:
                cycle_edges = []
                collecting = False
                for e in path:
                    if e.src == current:
                        collecting = True
                    if collecting:
                        cycle_edges.append(e)
                worst = max(cycle_edges, key=lambda e: (height_gap(e), e.src))
                removed.add(id(worst))
                warnings.append(
                    f"on-top-of cycle broken: dropped {worst.src}->{worst.dst}"
                )
                break
            seen.add(current)
            path.append(by_src[current])
            current = by_src[current].dst
    kept = [e for e in edges if e.kind != EdgeKind.ON_TOP_OF or id(e) not in removed]
    return kept, warnings


def build_graph(scene: Scene) -> SceneGraph:
    """Run all three edge detectors and assemble the scene graph.

    Missing node attributes (front normals, support surfaces) are estimated
    on the fly; pass an :func:`annotate_scene` result to keep the annotated
    scene. On-top-of acyclicity is enforced by dropping the larger-gap edge
    of any cycle.
    """
    if not is_annotated(scene):
        scene = annotate_scene(scene)
    edges = detect_on_top_of(scene) + detect_against_wall(scene) + detect_facing(scene)
    edges, warnings = _enforce_acyclic(edges, scene)
    graph = SceneGraph(
        node_ids=tuple(sorted(o.id for o in scene.objects)),
        edges=tuple(edges),
        warnings=tuple(warnings),
    )
    graph.validate()
    return graph
