"""Scene file I/O: JSON manifests referencing per-object PLY point files.

The manifest is hand-writable JSON; point clouds live in separate PLY files
(ASCII or binary little-endian, float or double x/y/z properties) so
synthetic test scenes stay tiny and real scans import directly. A scene can
also round-trip through a self-contained dict with inline points, which is
what the HTTP service exchanges.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import jsonschema

from .model import (
    DEFAULT_RESOLUTION_M,
    ObjectInstance,
    OrientedBoundingBox,
    Scene,
    SceneError,
    SupportSurface,
    compute_obb,
    derive_walls,
)


class ManifestError(SceneError):
    """A scene manifest or one of its referenced files is invalid."""


_SURFACE_SCHEMA = {
    "type": "object",
    "required": ["height", "contour"],
    "properties": {
        "height": {"type": "number"},
        "contour": {
            "type": "array",
            "minItems": 3,
            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                      "items": {"type": "number"}},
        },
        "normals": {
            "type": "array",
            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                      "items": {"type": "number"}},
        },
        "max_clearance": {"type": "number"},
        "owner": {"type": "integer"},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["floor", "objects"],
    "properties": {
        "resolution_m": {"type": "number", "exclusiveMinimum": 0},
        "floor": _SURFACE_SCHEMA,
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "class"],
                "properties": {
                    "id": {"type": "integer"},
                    "class": {"type": "string"},
                    "color": {"type": "string"},
                    "material": {"type": "string"},
                    "description": {"type": "string"},
                    "is_architectural": {"type": "boolean"},
                    "has_semantic_front": {"type": "boolean"},
                    "points_file": {"type": "string"},
                    "points": {"type": "array"},
                    "front_normal": {
                        "type": "array", "minItems": 3, "maxItems": 3,
                        "items": {"type": "number"},
                    },
                    "support_surfaces": {
                        "type": "array", "items": _SURFACE_SCHEMA,
                    },
                },
            },
        },
    },
}


# ---------------------------------------------------------------------------
# PLY

def read_ply(path: Path | str) -> np.ndarray:
    """Read x,y,z from an ASCII or binary-little-endian PLY file."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ManifestError(f"{path}: not a PLY file")
        fmt = None
        n_vertices = None
        properties: list[tuple[str, str]] = []
        in_vertex_element = False
        while True:
            line = fh.readline()
            if not line:
                raise ManifestError(f"{path}: unterminated PLY header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex_element = tokens[1] == "vertex"
                if in_vertex_element:
                    n_vertices = int(tokens[2])
            elif tokens[0] == "property" and in_vertex_element:
                properties.append((tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ManifestError(f"{path}: unsupported PLY format {fmt}")
        if n_vertices is None:
            raise ManifestError(f"{path}: no vertex element")
        names = [name for _, name in properties]
        for coord in ("x", "y", "z"):
            if coord not in names:
                raise ManifestError(f"{path}: missing '{coord}' property")

        if fmt == "ascii":
            rows = np.loadtxt(fh, max_rows=n_vertices, ndmin=2)
            if rows.shape[0] != n_vertices or rows.shape[1] < len(properties):
                raise ManifestError(f"{path}: truncated vertex data")
            cols = [names.index(c) for c in ("x", "y", "z")]
            return np.ascontiguousarray(rows[:, cols], dtype=float)

        type_map = {
            "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
            "uchar": "<u1", "uint8": "<u1", "char": "<i1", "int8": "<i1",
            "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
            "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
        }
        try:
            dtype = np.dtype([(name, type_map[t]) for t, name in properties])
        except KeyError as exc:
            raise ManifestError(f"{path}: unsupported property type {exc}")
        raw = fh.read(dtype.itemsize * n_vertices)
        if len(raw) < dtype.itemsize * n_vertices:
            raise ManifestError(f"{path}: truncated vertex data")
        data = np.frombuffer(raw, dtype=dtype, count=n_vertices)
        return np.column_stack(
            [data["x"].astype(float), data["y"].astype(float), data["z"].astype(float)]
        )


def write_ply(path: Path | str, points: np.ndarray, binary: bool = True) -> None:
    """Write an x,y,z point cloud as PLY with double precision."""
    points = np.asarray(points, dtype=float)
    path = Path(path)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(points)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(points, dtype="<f8").tobytes())
        else:
            for x, y, z in points:
                fh.write(
                    f"{float(x)!r} {float(y)!r} {float(z)!r}\n".encode("ascii")
                )


# ---------------------------------------------------------------------------
# Resampling

def voxel_downsample(points: np.ndarray, resolution: float) -> np.ndarray:
    """Thin a cloud to at most one point per ``resolution`` voxel.

    Keeps, per occupied voxel, the input point closest to the voxel center
    (lowest index on ties), so the result is a subset of the input and the
    operation is idempotent.
    """
    if len(points) == 0:
        return points
    # Round before flooring so grid-aligned coordinates sitting exactly on a
    # voxel boundary quantize consistently instead of straddling it.
    keys = np.floor(np.round(points / resolution, 6)).astype(np.int64)
    centers = (keys + 0.5) * resolution
    dist = np.linalg.norm(points - centers, axis=1)
    order = np.lexsort((np.arange(len(points)), dist))
    _, first = np.unique(keys[order], axis=0, return_index=True)
    keep = np.sort(order[first])
    return points[keep]


# ---------------------------------------------------------------------------
# Surfaces

def _surface_from_json(data: dict, owner_id: int, resolution: float) -> SupportSurface:
    contour = np.asarray(data["contour"], dtype=float)
    height = float(data["height"])
    clearance = float(data.get("max_clearance", math.inf))
    if "normals" in data:
        normals = np.asarray(data["normals"], dtype=float)
        if normals.shape != contour.shape:
            raise ManifestError("surface normals do not match contour points")
    else:
        contour, normals = densify_polygon(contour, resolution)
    owner = int(data.get("owner", owner_id))
    return SupportSurface(
        owner_id=owner, height=height, contour_points=contour,
        contour_normals=normals, max_clearance=clearance,
    )


def _surface_to_json(surf: SupportSurface, include_owner: bool = False) -> dict:
    out: dict[str, Any] = {
        "height": surf.height,
        "contour": surf.contour_points.tolist(),
        "normals": surf.contour_normals.tolist(),
    }
    if math.isfinite(surf.max_clearance):
        out["max_clearance"] = surf.max_clearance
    if include_owner:
        out["owner"] = surf.owner_id
    return out


def densify_polygon(
    corners: np.ndarray, resolution: float
) -> tuple[np.ndarray, np.ndarray]:
    """Resample a closed polygon at ~resolution spacing with outward normals.

    Outward orientation is fixed against the signed polygon area, so corner
    ordering (CW or CCW) does not matter.
    """
    corners = np.asarray(corners, dtype=float)
    x, y = corners[:, 0], corners[:, 1]
    signed_area = (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0
    ccw = signed_area >= 0
    pts_out = []
    normals_out = []
    n = len(corners)
    for i in range(n):
        a, b = corners[i], corners[(i + 1) % n]
        edge = b - a
        length = np.linalg.norm(edge)
        if length < 1e-12:
            continue
        steps = max(1, int(round(length / resolution)))
        ts = np.arange(steps) / steps
        seg = a + ts[:, None] * edge
        tangent = edge / length
        normal = np.array([tangent[1], -tangent[0]]) if ccw else np.array(
            [-tangent[1], tangent[0]]
        )
        pts_out.append(seg)
        normals_out.append(np.tile(normal, (steps, 1)))
    return np.concatenate(pts_out), np.concatenate(normals_out)


# ---------------------------------------------------------------------------
# Manifests

def _object_from_json(
    entry: dict, base_dir: Optional[Path], resolution: float
) -> ObjectInstance:
    object_id = int(entry["id"])
    if "points" in entry:
        points = np.asarray(entry["points"], dtype=float)
    elif "points_file" in entry:
        if base_dir is None:
            raise ManifestError(
                f"object {object_id}: points_file given but no base directory"
            )
        ply_path = base_dir / entry["points_file"]
        if not ply_path.exists():
            raise ManifestError(
                f"object {object_id}: missing point file {ply_path}"
            )
        points = read_ply(ply_path)
    else:
        raise ManifestError(f"object {object_id}: needs points or points_file")
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ManifestError(f"object {object_id}: empty or malformed point cloud")
    if not np.all(np.isfinite(points)):
        raise ManifestError(f"object {object_id}: non-finite coordinates")
    points = voxel_downsample(points, resolution)

    front = entry.get("front_normal")
    front_normal = None
    if front is not None:
        front_normal = np.asarray(front, dtype=float)
        norm = np.linalg.norm(front_normal)
        if norm < 1e-9:
            raise ManifestError(f"object {object_id}: zero front normal")
        front_normal = front_normal / norm

    surfaces = tuple(
        _surface_from_json(s, object_id, resolution)
        for s in entry.get("support_surfaces", [])
    )
    return ObjectInstance(
        id=object_id,
        class_label=entry["class"],
        color=entry.get("color", ""),
        material=entry.get("material", ""),
        description=entry.get("description", ""),
        points=points,
        obb=compute_obb(points),
        front_normal=front_normal,
        support_surfaces=surfaces,
        is_architectural=bool(entry.get("is_architectural", False)),
        has_semantic_front=bool(entry.get("has_semantic_front", False)),
    )


def scene_from_dict(data: dict, base_dir: Optional[Path] = None) -> Scene:
    """Build a validated Scene from a manifest dict (inline or file points)."""
    try:
        jsonschema.validate(data, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ManifestError(f"manifest schema violation: {exc.message}") from exc
    resolution = float(data.get("resolution_m", DEFAULT_RESOLUTION_M))

    objects = []
    seen_ids = set()
    for entry in data["objects"]:
        object_id = int(entry["id"])
        if object_id in seen_ids:
            raise ManifestError(f"duplicate object id {object_id}")
        seen_ids.add(object_id)
        objects.append(_object_from_json(entry, base_dir, resolution))

    floor = _surface_from_json(data["floor"], owner_id=-1, resolution=resolution)
    if floor.owner_id >= 0 and floor.owner_id not in seen_ids:
        raise ManifestError(f"floor owner {floor.owner_id} is not an object id")
    # Attach the floor region to its owner object so edge detection sees it
    # as an ordinary support surface.
    if floor.owner_id >= 0:
        for i, obj in enumerate(objects):
            if obj.id != floor.owner_id:
                continue
            duplicate = any(
                abs(s.height - floor.height) < 0.01 for s in obj.support_surfaces
            )
            if not duplicate:
                objects[i] = ObjectInstance(
                    **{
                        **obj.__dict__,
                        "support_surfaces": obj.support_surfaces + (floor,),
                    }
                )

    floor_owner = floor.owner_id
    scene = Scene(
        objects=tuple(objects),
        floor=floor,
        walls=derive_walls(objects, floor_owner),
        resolution_m=resolution,
    )
    try:
        scene.validate()
    except SceneError as exc:
        raise ManifestError(str(exc)) from exc
    return scene


def scene_to_dict(scene: Scene, points_files: Optional[dict[int, str]] = None) -> dict:
    """Serialize a scene to a manifest dict.

    With ``points_files`` given, objects reference those relative paths;
    otherwise points are inlined as arrays (self-contained form).
    """
    objects = []
    for obj in scene.objects:
        entry: dict[str, Any] = {
            "id": obj.id,
            "class": obj.class_label,
            "color": obj.color,
            "material": obj.material,
            "description": obj.description,
            "is_architectural": obj.is_architectural,
            "has_semantic_front": obj.has_semantic_front,
        }
        if points_files is not None:
            entry["points_file"] = points_files[obj.id]
        else:
            entry["points"] = obj.points.tolist()
        if obj.front_normal is not None:
            entry["front_normal"] = obj.front_normal.tolist()
        if obj.support_surfaces:
            # The floor region attached at load time is emitted only with the
            # scene-level floor entry.
            surfs = [
                s for s in obj.support_surfaces
                if not (obj.id == scene.floor.owner_id
                        and abs(s.height - scene.floor.height) < 1e-12
                        and len(s.contour_points) == len(scene.floor.contour_points))
            ]
            if surfs:
                entry["support_surfaces"] = [_surface_to_json(s) for s in surfs]
        objects.append(entry)
    return {
        "resolution_m": scene.resolution_m,
        "floor": _surface_to_json(scene.floor, include_owner=scene.floor.owner_id >= 0),
        "objects": objects,
    }


def load_scene(manifest_path: Path | str) -> Scene:
    """Load and validate a scene manifest from disk."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        data = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    return scene_from_dict(data, base_dir=manifest_path.parent)


def save_scene(scene: Scene, manifest_path: Path | str) -> None:
    """Write a scene as a manifest plus per-object binary PLY files."""
    manifest_path = Path(manifest_path)
    out_dir = manifest_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    points_dir_name = manifest_path.stem + "_points"
    points_dir = out_dir / points_dir_name
    points_dir.mkdir(exist_ok=True)
    points_files = {}
    for obj in scene.objects:
        rel = f"{points_dir_name}/object_{obj.id}.ply"
        write_ply(out_dir / rel, obj.points)
        points_files[obj.id] = rel
    data = scene_to_dict(scene, points_files=points_files)
    manifest_path.write_text(json.dumps(data, indent=2, sort_keys=True))
