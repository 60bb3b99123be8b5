"""Synthetic scene construction for tests and demos.

Builds small rooms out of point-sampled boxes with known geometry: explicit
support surfaces, front normals, and feasible free space, so expected graph
edges and optimization outcomes can be stated exactly.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .model import (
    ObjectInstance,
    OrientedBoundingBox,
    Pose,
    Scene,
    SupportSurface,
    compute_obb,
    derive_walls,
    rotation_2d,
    rotation_z,
)
from .sceneio import densify_polygon


def plane_points(x0, x1, y0, y1, z, spacing=0.02) -> np.ndarray:
    """Grid of points on a horizontal rectangle."""
    xs = np.arange(x0, x1 + spacing / 2, spacing)
    ys = np.arange(y0, y1 + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))])


def box_shell_points(
    size, spacing=0.02, open_faces: Sequence[str] = ()
) -> np.ndarray:
    """Points on the faces of an axis-aligned box centered at the origin.

    ``open_faces`` names faces to leave unsampled: '+x', '-x', '+y', '-y',
    '+z', '-z'.
    """
    sx, sy, sz = size
    hx, hy, hz = sx / 2, sy / 2, sz / 2
    faces = []

    def grid(a0, a1, b0, b1):
        av = np.arange(a0, a1 + spacing / 2, spacing)
        bv = np.arange(b0, b1 + spacing / 2, spacing)
        ga, gb = np.meshgrid(av, bv, indexing="ij")
        return ga.ravel(), gb.ravel()

    if "+x" not in open_faces:
        a, b = grid(-hy, hy, -hz, hz)
        faces.append(np.column_stack([np.full(a.size, hx), a, b]))
    if "-x" not in open_faces:
        a, b = grid(-hy, hy, -hz, hz)
        faces.append(np.column_stack([np.full(a.size, -hx), a, b]))
    if "+y" not in open_faces:
        a, b = grid(-hx, hx, -hz, hz)
        faces.append(np.column_stack([a, np.full(a.size, hy), b]))
    if "-y" not in open_faces:
        a, b = grid(-hx, hx, -hz, hz)
        faces.append(np.column_stack([a, np.full(a.size, -hy), b]))
    if "+z" not in open_faces:
        a, b = grid(-hx, hx, -hy, hy)
        faces.append(np.column_stack([a, b, np.full(a.size, hz)]))
    if "-z" not in open_faces:
        a, b = grid(-hx, hx, -hy, hy)
        faces.append(np.column_stack([a, b, np.full(a.size, -hz)]))
    return np.unique(np.round(np.concatenate(faces), 9), axis=0)


def box_solid_points(size, spacing=0.04) -> np.ndarray:
    """Filled grid of points in an axis-aligned box centered at the origin."""
    sx, sy, sz = size
    xs = np.arange(-sx / 2, sx / 2 + spacing / 2, spacing)
    ys = np.arange(-sy / 2, sy / 2 + spacing / 2, spacing)
    zs = np.arange(-sz / 2, sz / 2 + spacing / 2, spacing)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


def rect_surface(
    owner_id: int, center_xy, size_xy, height, theta=0.0,
    resolution=0.01, max_clearance=math.inf,
) -> SupportSurface:
    """Rectangular support surface with a densified contour."""
    hx, hy = size_xy[0] / 2, size_xy[1] / 2
    corners = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    corners = corners @ rotation_2d(theta).T + np.asarray(center_xy, dtype=float)
    contour, normals = densify_polygon(corners, resolution)
    return SupportSurface(
        owner_id=owner_id, height=float(height), contour_points=contour,
        contour_normals=normals, max_clearance=max_clearance,
    )


def make_box_object(
    object_id: int,
    class_label: str,
    center_xy,
    bottom_z: float,
    size,
    *,
    theta: float = 0.0,
    spacing: float = 0.02,
    front_axis=(1.0, 0.0),
    open_front: bool = False,
    with_top_surface: bool = False,
    surface_margin: float = 0.0,
    color: str = "",
    material: str = "",
    description: str = "",
    is_architectural: bool = False,
    has_semantic_front: bool = False,
) -> ObjectInstance:
    """A box-shaped object resting with its base at ``bottom_z``.

    ``front_axis`` is the facing direction in the unrotated local frame;
    ``open_front`` removes the face the object faces (useful for shelves).
    ``with_top_surface`` attaches an explicit support contour on the top
    face, inset by ``surface_margin``.
    """
    size = np.asarray(size, dtype=float)
    open_faces = []
    if open_front:
        fa = np.asarray(front_axis, dtype=float)
        open_faces = ["+x" if abs(fa[0]) >= abs(fa[1]) else "+y"]
        if fa[0] < -0.5:
            open_faces = ["-x"]
        elif fa[1] < -0.5:
            open_faces = ["-y"]
    local = box_shell_points(size, spacing=spacing, open_faces=open_faces)
    rot = rotation_z(theta)
    center = np.array(
        [center_xy[0], center_xy[1], bottom_z + size[2] / 2.0]
    )
    points = local @ rot.T + center

    fa = np.asarray(front_axis, dtype=float)
    fa = fa / np.linalg.norm(fa)
    front3 = rot @ np.array([fa[0], fa[1], 0.0])

    surfaces = ()
    if with_top_surface:
        surfaces = (
            rect_surface(
                object_id,
                center_xy,
                (size[0] - 2 * surface_margin, size[1] - 2 * surface_margin),
                bottom_z + size[2],
                theta=theta,
            ),
        )
    return ObjectInstance(
        id=object_id,
        class_label=class_label,
        color=color,
        material=material,
        description=description,
        points=points,
        obb=compute_obb(points),
        front_normal=front3,
        support_surfaces=surfaces,
        is_architectural=is_architectural,
        has_semantic_front=has_semantic_front,
    )


def make_floor(object_id: int, width: float, depth: float, spacing=0.05) -> tuple[ObjectInstance, SupportSurface]:
    """Floor slab covering [0, width] x [0, depth] at z = 0."""
    pts = plane_points(0.0, width, 0.0, depth, 0.0, spacing=spacing)
    pts = np.vstack([pts, plane_points(0.0, width, 0.0, depth, -0.02, spacing=spacing * 4)])
    surface = rect_surface(object_id, (width / 2, depth / 2), (width, depth), 0.0)
    floor = ObjectInstance(
        id=object_id,
        class_label="floor",
        points=pts,
        obb=compute_obb(pts),
        front_normal=np.array([1.0, 0.0, 0.0]),
        support_surfaces=(surface,),
        is_architectural=True,
    )
    return floor, surface


def make_wall(
    object_id: int, side: str, width: float, depth: float,
    height: float = 2.5, thickness: float = 0.06, spacing: float = 0.05,
) -> ObjectInstance:
    """One of the four room walls; the front normal points into the room."""
    if side == "south":
        center_xy, size, front = (width / 2, -thickness / 2), (width, thickness, height), (0, 1)
    elif side == "north":
        center_xy, size, front = (width / 2, depth + thickness / 2), (width, thickness, height), (0, -1)
    elif side == "west":
        center_xy, size, front = (-thickness / 2, depth / 2), (thickness, depth, height), (1, 0)
    elif side == "east":
        center_xy, size, front = (width + thickness / 2, depth / 2), (thickness, depth, height), (-1, 0)
    else:
        raise ValueError(f"unknown wall side {side!r}")
    return make_box_object(
        object_id, "wall", center_xy, 0.0, size,
        spacing=spacing, front_axis=front, is_architectural=True,
    )


def assemble_scene(
    objects: Sequence[ObjectInstance], floor_surface: SupportSurface,
    resolution_m: float = 0.01,
) -> Scene:
    scene = Scene(
        objects=tuple(objects),
        floor=floor_surface,
        walls=derive_walls(objects, floor_surface.owner_id),
        resolution_m=resolution_m,
    )
    scene.validate()
    return scene


def simple_room(
    width: float = 4.0, depth: float = 3.0, with_walls: bool = True
) -> tuple[list[ObjectInstance], SupportSurface]:
    """Floor (id 0) and optionally four walls (ids 1-4)."""
    floor, floor_surface = make_floor(0, width, depth)
    objects = [floor]
    if with_walls:
        for i, side in enumerate(("south", "north", "west", "east"), start=1):
            objects.append(make_wall(i, side, width, depth))
    return objects, floor_surface


def vase_table_scene() -> Scene:
    """A small room: table with a vase on it, plus a shelf and a chair."""
    objects, floor_surface = simple_room(4.0, 3.0)
    table = make_box_object(
        10, "table", (1.0, 1.5), 0.0, (1.2, 0.7, 0.75),
        with_top_surface=True, color="brown", material="wood",
        description="rectangular dining table",
    )
    vase = make_box_object(
        11, "vase", (0.8, 1.5), 0.75, (0.12, 0.12, 0.3),
        spacing=0.015, color="red", material="ceramic",
        description="small red vase",
    )
    shelf = make_box_object(
        12, "shelf", (3.5, 1.0), 0.0, (0.8, 0.3, 1.0),
        with_top_surface=True, color="white", material="wood",
        description="low open shelf", front_axis=(-1.0, 0.0),
    )
    chair = make_box_object(
        13, "chair", (2.2, 0.8), 0.0, (0.45, 0.45, 0.9),
        color="black", material="plastic", description="office chair",
        front_axis=(0.0, 1.0), has_semantic_front=True,
    )
    return assemble_scene(objects + [table, vase, shelf, chair], floor_surface)


def random_room(
    seed: int, n_objects: Optional[int] = None, width: float = 5.0, depth: float = 4.0
) -> Scene:
    """Randomized but collision-free room with tables and small items.

    Geometry keeps clear margins from the detection thresholds (support gaps
    well under 5 cm, alignments either tight or far off) so edge detection
    is stable under floating-point noise.
    """
    rng = np.random.default_rng(seed)
    objects, floor_surface = simple_room(width, depth)
    next_id = 10
    if n_objects is None:
        n_objects = int(rng.integers(3, 9))

    placed_rects: list[tuple[float, float, float]] = []  # x, y, radius

    def fits(x, y, radius):
        if not (0.4 + radius < x < width - 0.4 - radius):
            return False
        if not (0.4 + radius < y < depth - 0.4 - radius):
            return False
        return all(
            math.hypot(x - px, y - py) > radius + pr + 0.25
            for px, py, pr in placed_rects
        )

    tables = []
    scene_objects = list(objects)
    for _ in range(n_objects):
        for _attempt in range(40):
            x = float(rng.uniform(0.5, width - 0.5))
            y = float(rng.uniform(0.5, depth - 0.5))
            kind = rng.choice(["table", "chair", "cabinet"])
            if kind == "table":
                size = (
                    float(rng.uniform(0.8, 1.4)),
                    float(rng.uniform(0.6, 0.9)),
                    float(rng.uniform(0.6, 0.8)),
                )
            elif kind == "chair":
                size = (0.45, 0.45, float(rng.uniform(0.8, 1.0)))
            else:
                size = (
                    float(rng.uniform(0.5, 0.9)),
                    float(rng.uniform(0.3, 0.5)),
                    float(rng.uniform(1.0, 1.6)),
                )
            radius = math.hypot(size[0], size[1]) / 2
            if not fits(x, y, radius):
                continue
            theta = float(rng.choice([0.0, math.pi / 2, math.pi / 4]))
            obj = make_box_object(
                next_id, kind, (x, y), 0.0, size, theta=theta,
                with_top_surface=kind != "chair",
                front_axis=(1.0, 0.0),
                color=str(rng.choice(["red", "blue", "white", "black"])),
                material=str(rng.choice(["wood", "metal", "plastic"])),
            )
            placed_rects.append((x, y, radius))
            scene_objects.append(obj)
            if kind == "table":
                tables.append(obj)
            next_id += 1
            break

    # Small items on some tables; sits exactly on the surface.
    for table in tables:
        if rng.random() < 0.6:
            surface = table.support_surfaces[0]
            size = (0.1, 0.1, float(rng.uniform(0.15, 0.3)))
            item = make_box_object(
                next_id, "vase", tuple(table.obb.center[:2]), surface.height,
                size, spacing=0.015,
                color=str(rng.choice(["green", "red", "yellow"])),
                material="ceramic",
            )
            scene_objects.append(item)
            next_id += 1

    return assemble_scene(scene_objects, floor_surface)


def rigid_transform_scene(scene: Scene, theta: float, offset) -> Scene:
    """Rotate the whole scene about the world origin, then translate.

    Applies the same rigid map to every object (points, OBB, front normal,
    surfaces) and to the floor, so relational structure is preserved.
    """
    offset = np.asarray(offset, dtype=float)
    rot3 = rotation_z(theta)
    rot2 = rotation_2d(theta)

    def move_surface(surface: SupportSurface) -> SupportSurface:
        return replace(
            surface,
            height=surface.height + offset[2],
            contour_points=surface.contour_points @ rot2.T + offset[:2],
            contour_normals=surface.contour_normals @ rot2.T,
        )

    moved = []
    for obj in scene.objects:
        obb = OrientedBoundingBox(
            center=rot3 @ obj.obb.center + offset,
            axes=rot3 @ obj.obb.axes,
            extents=obj.obb.extents.copy(),
        )
        moved.append(
            replace(
                obj,
                points=obj.points @ rot3.T + offset,
                obb=obb,
                front_normal=None if obj.front_normal is None else rot3 @ obj.front_normal,
                support_surfaces=tuple(move_surface(s) for s in obj.support_surfaces),
            )
        )
    return replace(scene, objects=tuple(moved), floor=move_surface(scene.floor))
