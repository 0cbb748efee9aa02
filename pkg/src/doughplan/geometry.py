"""Point clouds, the volumetric shape DSL, analytic volumes, and SDF primitives.

Shapes are closed constructive trees (sphere/box/cylinder/torus combined by
union and rigid transforms) that compile to uniformly sampled point clouds
and analytic volumes. SDF primitives describe rigid tool geometry and are
shared by contact handling, placement search, and proximity losses.

ShapeProgram JSON schema (``dsl_version`` 1)::

    {"dsl_version": 1, "root": <node>}
    <node> :=
      {"type": "sphere",   "center": [x,y,z], "radius": r}
    | {"type": "box",      "center": [x,y,z], "half_extents": [hx,hy,hz]}
    | {"type": "cylinder", "center": [x,y,z], "radius": r, "height": h, "axis": "x|y|z"}
    | {"type": "torus",    "center": [x,y,z], "major_radius": R, "minor_radius": r, "axis": "x|y|z"}
    | {"type": "union",    "children": [<node>, ...]}
    | {"type": "translate","offset": [x,y,z], "child": <node>}
    | {"type": "rotate",   "axis": "x|y|z", "angle": radians, "pivot": [x,y,z], "child": <node>}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DSL_VERSION = 1

_AXES = {"x": 0, "y": 1, "z": 2}


class InvalidShapeError(ValueError):
    """Raised for degenerate or malformed shape programs."""


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise InvalidShapeError(f"non-finite 3-vector: {v!r}")
    return a


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


class PointCloud:
    """N particle positions in 3-space (meters).

    The row index is stable: index i is the correspondence key used by the
    candidate-stepping and point-to-point losses, so every transform must
    preserve point count and order.
    """

    __slots__ = ("points",)

    def __init__(self, points):
        arr = np.array(points, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(arr)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = arr

    def __len__(self) -> int:
        return self.points.shape[0]

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)})"

    def copy(self) -> "PointCloud":
        return PointCloud(self.points.copy())

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + _vec3(offset))

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)) -> "PointCloud":
        R = np.asarray(rotation, dtype=float).reshape(3, 3)
        return PointCloud(self.points @ R.T + _vec3(translation))


def as_points(cloud) -> np.ndarray:
    """Coerce a PointCloud or (N, 3) array to a float array."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    arr = np.asarray(cloud, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, min <= max componentwise."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _vec3(self.lo))
        object.__setattr__(self, "hi", _vec3(self.hi))
        if np.any(self.lo > self.hi):
            raise ValueError("Aabb requires lo <= hi componentwise")

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    def contains(self, points) -> np.ndarray:
        p = as_points(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)


def aabb(cloud) -> Aabb:
    """Tight componentwise bounding box of a nonempty cloud."""
    p = as_points(cloud)
    return Aabb(p.min(axis=0), p.max(axis=0))


def relative_volume_change(v_in: float, v_out: float) -> float:
    """|v_out - v_in| / v_in, the stagewise volume-drift measure."""
    if not v_in > 0:
        raise ValueError(f"input volume must be positive, got {v_in}")
    return abs(v_out - v_in) / v_in


# ---------------------------------------------------------------------------
# Shape DSL
# ---------------------------------------------------------------------------


class ShapeNode:
    """Base class for shape-program tree nodes."""

    __slots__ = ()


ShapeProgram = ShapeNode  # a program is just the root of a node tree


@dataclass(frozen=True)
class Sphere(ShapeNode):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0


@dataclass(frozen=True)
class Box(ShapeNode):
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class Cylinder(ShapeNode):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    height: float = 1.0
    axis: str = "y"


@dataclass(frozen=True)
class Torus(ShapeNode):
    center: tuple = (0.0, 0.0, 0.0)
    major_radius: float = 1.0
    minor_radius: float = 0.25
    axis: str = "y"


@dataclass(frozen=True)
class Union(ShapeNode):
    children: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Translate(ShapeNode):
    offset: tuple = (0.0, 0.0, 0.0)
    child: ShapeNode = None


@dataclass(frozen=True)
class Rotate(ShapeNode):
    axis: str = "y"
    angle: float = 0.0
    child: ShapeNode = None
    pivot: tuple = (0.0, 0.0, 0.0)


def _axis_index(axis: str) -> int:
    if axis not in _AXES:
        raise InvalidShapeError(f"axis must be one of 'x','y','z', got {axis!r}")
    return _AXES[axis]


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    """Rotation matrix about a coordinate axis."""
    i = _axis_index(axis)
    c, s = math.cos(angle), math.sin(angle)
    R = np.eye(3)
    j, k = (i + 1) % 3, (i + 2) % 3
    R[j, j] = c
    R[j, k] = -s
    R[k, j] = s
    R[k, k] = c
    return R


def validate_program(program: ShapeNode) -> None:
    """Raise InvalidShapeError if the program is empty or degenerate."""
    if program is None:
        raise InvalidShapeError("empty shape program")
    if isinstance(program, Sphere):
        if not program.radius > 0:
            raise InvalidShapeError("sphere radius must be positive")
        _vec3(program.center)
    elif isinstance(program, Box):
        he = _vec3(program.half_extents)
        if not np.all(he > 0):
            raise InvalidShapeError("box half-extents must be positive")
        _vec3(program.center)
    elif isinstance(program, Cylinder):
        if not (program.radius > 0 and program.height > 0):
            raise InvalidShapeError("cylinder radius and height must be positive")
        _axis_index(program.axis)
        _vec3(program.center)
    elif isinstance(program, Torus):
        if not (program.minor_radius > 0 and program.major_radius > program.minor_radius):
            raise InvalidShapeError("torus requires 0 < minor_radius < major_radius")
        _axis_index(program.axis)
        _vec3(program.center)
    elif isinstance(program, Union):
        if len(program.children) == 0:
            raise InvalidShapeError("union must have at least one child")
        for c in program.children:
            validate_program(c)
    elif isinstance(program, Translate):
        _vec3(program.offset)
        validate_program(program.child)
    elif isinstance(program, Rotate):
        _axis_index(program.axis)
        validate_program(program.child)
        _vec3(program.pivot)
    else:
        raise InvalidShapeError(f"unknown shape node {type(program).__name__}")


def _leaves(program: ShapeNode, R=None, t=None):
    """Yield (primitive, world_rotation, world_translation) for every leaf."""
    if R is None:
        R = np.eye(3)
    if t is None:
        t = np.zeros(3)
    if isinstance(program, Union):
        for c in program.children:
            yield from _leaves(c, R, t)
    elif isinstance(program, Translate):
        yield from _leaves(program.child, R, t + R @ _vec3(program.offset))
    elif isinstance(program, Rotate):
        Rn = axis_rotation(program.axis, program.angle)
        pivot = _vec3(program.pivot)
        tn = pivot - Rn @ pivot
        yield from _leaves(program.child, R @ Rn, t + R @ tn)
    else:
        yield program, R, t


def _leaf_contains(prim: ShapeNode, local: np.ndarray) -> np.ndarray:
    if isinstance(prim, Sphere):
        d = local - _vec3(prim.center)
        return np.einsum("ij,ij->i", d, d) <= prim.radius**2
    if isinstance(prim, Box):
        d = np.abs(local - _vec3(prim.center))
        return np.all(d <= _vec3(prim.half_extents), axis=1)
    if isinstance(prim, Cylinder):
        d = local - _vec3(prim.center)
        i = _axis_index(prim.axis)
        radial = np.delete(d, i, axis=1)
        return (np.einsum("ij,ij->i", radial, radial) <= prim.radius**2) & (
            np.abs(d[:, i]) <= 0.5 * prim.height
        )
    if isinstance(prim, Torus):
        d = local - _vec3(prim.center)
        i = _axis_index(prim.axis)
        radial = np.linalg.norm(np.delete(d, i, axis=1), axis=1)
        return (radial - prim.major_radius) ** 2 + d[:, i] ** 2 <= prim.minor_radius**2
    raise InvalidShapeError(f"unknown primitive {type(prim).__name__}")


def _leaf_volume(prim: ShapeNode) -> float:
    if isinstance(prim, Sphere):
        return 4.0 / 3.0 * math.pi * prim.radius**3
    if isinstance(prim, Box):
        return float(8.0 * np.prod(_vec3(prim.half_extents)))
    if isinstance(prim, Cylinder):
        return math.pi * prim.radius**2 * prim.height
    if isinstance(prim, Torus):
        return 2.0 * math.pi**2 * prim.major_radius * prim.minor_radius**2
    raise InvalidShapeError(f"unknown primitive {type(prim).__name__}")


def _leaf_local_aabb(prim: ShapeNode) -> Aabb:
    c = _vec3(getattr(prim, "center", (0, 0, 0)))
    if isinstance(prim, Sphere):
        e = np.full(3, prim.radius)
    elif isinstance(prim, Box):
        e = _vec3(prim.half_extents)
    elif isinstance(prim, Cylinder):
        i = _axis_index(prim.axis)
        e = np.full(3, prim.radius)
        e[i] = 0.5 * prim.height
    elif isinstance(prim, Torus):
        i = _axis_index(prim.axis)
        e = np.full(3, prim.major_radius + prim.minor_radius)
        e[i] = prim.minor_radius
    else:
        raise InvalidShapeError(f"unknown primitive {type(prim).__name__}")
    return Aabb(c - e, c + e)


def _leaf_world_aabb(prim: ShapeNode, R: np.ndarray, t: np.ndarray) -> Aabb:
    local = _leaf_local_aabb(prim)
    corners = np.array(
        [[x, y, z] for x in (local.lo[0], local.hi[0])
         for y in (local.lo[1], local.hi[1])
         for z in (local.lo[2], local.hi[2])]
    )
    world = corners @ R.T + t
    return Aabb(world.min(axis=0), world.max(axis=0))


def program_contains(program: ShapeNode, points) -> np.ndarray:
    """Boolean mask of points inside the program's occupied region."""
    p = as_points(points)
    inside = np.zeros(p.shape[0], dtype=bool)
    for prim, R, t in _leaves(program):
        local = (p - t) @ R  # R^T applied row-wise
        inside |= _leaf_contains(prim, local)
    return inside


def program_aabb(program: ShapeNode) -> Aabb:
    validate_program(program)
    boxes = [_leaf_world_aabb(prim, R, t) for prim, R, t in _leaves(program)]
    out = boxes[0]
    for b in boxes[1:]:
        out = out.union(b)
    return out


def sample_shape(program: ShapeNode, n: int, seed: int) -> PointCloud:
    """Sample n points uniformly by volume from the program's occupied region.

    Rejection sampling inside the union of per-leaf bounding boxes; a point
    landing in k overlapping boxes is kept with probability 1/k so the box
    union is covered uniformly before the inside test. Deterministic for a
    fixed (program, n, seed).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    validate_program(program)
    leaves = list(_leaves(program))
    boxes = [_leaf_world_aabb(prim, R, t) for prim, R, t in leaves]
    box_vols = np.array([b.volume for b in boxes])
    if not np.any(box_vols > 0):
        raise InvalidShapeError("shape program has zero-volume bounding region")
    probs = box_vols / box_vols.sum()

    rng = np.random.default_rng(seed)
    los = np.array([b.lo for b in boxes])
    his = np.array([b.hi for b in boxes])

    collected = []
    remaining = n
    for _ in range(1000):
        batch = max(2048, 4 * remaining)
        which = rng.choice(len(boxes), size=batch, p=probs)
        u = rng.random((batch, 3))
        pts = los[which] + u * (his[which] - los[which])
        # multiplicity correction for overlapping leaf boxes
        mult = np.zeros(batch)
        for b in boxes:
            mult += b.contains(pts)
        keep = rng.random(batch) < 1.0 / np.maximum(mult, 1.0)
        keep &= program_contains(program, pts)
        got = pts[keep]
        if got.shape[0]:
            collected.append(got)
            remaining -= got.shape[0]
        if remaining <= 0:
            break
    else:
        raise InvalidShapeError("rejection sampling failed: occupied region appears degenerate")
    return PointCloud(np.concatenate(collected, axis=0)[:n])


def shape_volume(program: ShapeNode, mc_samples: int = 1_000_000, seed: int = 0,
                 return_stderr: bool = False):
    """Volume of the program's occupied region in cubic meters.

    Exact analytic sum when leaf bounding boxes are pairwise disjoint;
    otherwise Monte Carlo over the global bounding box (standard error
    available via return_stderr).
    """
    validate_program(program)
    entries = list(_leaves(program))
    boxes = [_leaf_world_aabb(prim, R, t) for prim, R, t in entries]
    disjoint = all(
        not boxes[i].intersects(boxes[j])
        for i in range(len(boxes))
        for j in range(i + 1, len(boxes))
    )
    if disjoint:
        v = float(sum(_leaf_volume(prim) for prim, _, _ in entries))
        return (v, 0.0) if return_stderr else v

    bb = program_aabb(program)
    rng = np.random.default_rng(seed)
    pts = bb.lo + rng.random((mc_samples, 3)) * bb.extent
    frac = float(np.mean(program_contains(program, pts)))
    vol = frac * bb.volume
    stderr = bb.volume * math.sqrt(max(frac * (1.0 - frac), 0.0) / mc_samples)
    return (vol, stderr) if return_stderr else vol


# ---------------------------------------------------------------------------
# Shape DSL (de)serialization
# ---------------------------------------------------------------------------


def _node_to_dict(node: ShapeNode) -> dict:
    if isinstance(node, Sphere):
        return {"type": "sphere", "center": list(map(float, _vec3(node.center))),
                "radius": float(node.radius)}
    if isinstance(node, Box):
        return {"type": "box", "center": list(map(float, _vec3(node.center))),
                "half_extents": list(map(float, _vec3(node.half_extents)))}
    if isinstance(node, Cylinder):
        return {"type": "cylinder", "center": list(map(float, _vec3(node.center))),
                "radius": float(node.radius), "height": float(node.height), "axis": node.axis}
    if isinstance(node, Torus):
        return {"type": "torus", "center": list(map(float, _vec3(node.center))),
                "major_radius": float(node.major_radius),
                "minor_radius": float(node.minor_radius), "axis": node.axis}
    if isinstance(node, Union):
        return {"type": "union", "children": [_node_to_dict(c) for c in node.children]}
    if isinstance(node, Translate):
        return {"type": "translate", "offset": list(map(float, _vec3(node.offset))),
                "child": _node_to_dict(node.child)}
    if isinstance(node, Rotate):
        return {"type": "rotate", "axis": node.axis, "angle": float(node.angle),
                "pivot": list(map(float, _vec3(node.pivot))),
                "child": _node_to_dict(node.child)}
    raise InvalidShapeError(f"unknown shape node {type(node).__name__}")


def _node_from_dict(d: dict) -> ShapeNode:
    if not isinstance(d, dict) or "type" not in d:
        raise InvalidShapeError(f"shape node must be an object with a 'type' field, got {d!r}")
    kind = d["type"]
    try:
        if kind == "sphere":
            return Sphere(tuple(d["center"]), float(d["radius"]))
        if kind == "box":
            return Box(tuple(d["center"]), tuple(d["half_extents"]))
        if kind == "cylinder":
            return Cylinder(tuple(d["center"]), float(d["radius"]), float(d["height"]),
                            d.get("axis", "y"))
        if kind == "torus":
            return Torus(tuple(d["center"]), float(d["major_radius"]),
                         float(d["minor_radius"]), d.get("axis", "y"))
        if kind == "union":
            return Union(tuple(_node_from_dict(c) for c in d["children"]))
        if kind == "translate":
            return Translate(tuple(d["offset"]), _node_from_dict(d["child"]))
        if kind == "rotate":
            return Rotate(d["axis"], float(d["angle"]), _node_from_dict(d["child"]),
                          tuple(d.get("pivot", (0.0, 0.0, 0.0))))
    except (KeyError, TypeError) as e:
        raise InvalidShapeError(f"malformed {kind!r} node: {e}") from e
    raise InvalidShapeError(f"unknown shape node type {kind!r}")


def program_to_json(program: ShapeNode) -> dict:
    """Serialize a shape program to its versioned JSON document."""
    validate_program(program)
    return {"dsl_version": DSL_VERSION, "root": _node_to_dict(program)}


def program_from_json(doc) -> ShapeNode:
    """Parse and validate a shape program from a JSON document or string.

    Accepts the versioned wrapper or a bare node object.
    """
    if isinstance(doc, str):
        doc = json.loads(doc)
    if isinstance(doc, dict) and "root" in doc:
        version = doc.get("dsl_version", DSL_VERSION)
        if version != DSL_VERSION:
            raise InvalidShapeError(f"unsupported dsl_version {version}")
        doc = doc["root"]
    node = _node_from_dict(doc)
    validate_program(node)
    return node


# ---------------------------------------------------------------------------
# SDF primitives (rigid tool geometry)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdfPrimitive:
    """Analytic signed-distance primitive with a rigid pose.

    Negative inside, positive outside, zero on the surface; 1-Lipschitz.
    ``params`` packs kind-specific sizes:
      sphere:     (radius,)
      box:        (hx, hy, hz)
      capsule:    (radius, half_length)        segment along local z
      cylinder:   (radius, half_length)        axis along local y
      plate_pair: (hx, hy, hz, gap)            plates offset +-(gap/2+hx) along local x
    """

    kind: str
    params: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", _vec3(self.translation))
        sizes = self.params if self.kind != "plate_pair" else self.params[:3]
        if not all(p > 0 for p in sizes):
            raise ValueError(f"{self.kind} geometry parameters must be positive: {self.params}")
        if self.kind == "plate_pair" and self.params[3] < 0:
            raise ValueError("plate_pair gap must be nonnegative")

    def posed(self, translation=None, rotation=None, gap=None) -> "SdfPrimitive":
        """Copy with pose (and, for plate pairs, opening gap) replaced."""
        params = self.params
        if gap is not None:
            if self.kind != "plate_pair":
                raise ValueError("gap only applies to plate_pair primitives")
            params = (*self.params[:3], max(float(gap), 0.0))
        return SdfPrimitive(
            self.kind,
            params,
            self.rotation if rotation is None else rotation,
            self.translation if translation is None else translation,
        )

    def local_aabb(self) -> Aabb:
        if self.kind == "sphere":
            e = np.full(3, self.params[0])
        elif self.kind == "box":
            e = np.array(self.params)
        elif self.kind == "capsule":
            r, h = self.params
            e = np.array([r, r, h + r])
        elif self.kind == "cylinder":
            r, h = self.params
            e = np.array([r, h, r])
        elif self.kind == "plate_pair":
            hx, hy, hz, gap = self.params
            e = np.array([2 * hx + 0.5 * gap, hy, hz])
        else:
            raise ValueError(f"unknown sdf kind {self.kind!r}")
        return Aabb(-e, e)

    def half_height(self) -> float:
        """Vertical half-extent of the posed geometry (for placement offsets)."""
        local = self.local_aabb()
        corners = np.array(
            [[x, y, z] for x in (local.lo[0], local.hi[0])
             for y in (local.lo[1], local.hi[1])
             for z in (local.lo[2], local.hi[2])]
        )
        world_y = corners @ self.rotation.T
        return float(np.max(np.abs(world_y[:, 1])))


def sphere_sdf(radius: float) -> SdfPrimitive:
    return SdfPrimitive("sphere", (radius,))


def box_sdf(half_extents) -> SdfPrimitive:
    return SdfPrimitive("box", tuple(np.asarray(half_extents, dtype=float)))


def capsule_sdf(radius: float, half_length: float) -> SdfPrimitive:
    return SdfPrimitive("capsule", (radius, half_length))


def cylinder_sdf(radius: float, half_length: float) -> SdfPrimitive:
    return SdfPrimitive("cylinder", (radius, half_length))


def plate_pair_sdf(half_extents, gap: float) -> SdfPrimitive:
    he = np.asarray(half_extents, dtype=float)
    return SdfPrimitive("plate_pair", (he[0], he[1], he[2], gap))


def _box_distance(q: np.ndarray, he: np.ndarray) -> np.ndarray:
    d = np.abs(q) - he
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(np.max(d, axis=1), 0.0)
    return outside + inside


def sdf_eval(prim: SdfPrimitive, points) -> np.ndarray:
    """Signed distances from points to the posed primitive surface."""
    p = as_points(points)
    q = (p - prim.translation) @ prim.rotation  # into local frame
    k, params = prim.kind, prim.params
    if k == "sphere":
        return np.linalg.norm(q, axis=1) - params[0]
    if k == "box":
        return _box_distance(q, np.array(params))
    if k == "capsule":
        r, h = params
        qz = np.clip(q[:, 2], -h, h)
        d = q.copy()
        d[:, 2] -= qz
        return np.linalg.norm(d, axis=1) - r
    if k == "cylinder":
        r, h = params
        radial = np.hypot(q[:, 0], q[:, 2]) - r
        axial = np.abs(q[:, 1]) - h
        d = np.stack([radial, axial], axis=1)
        return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(np.max(d, axis=1), 0.0)
    if k == "plate_pair":
        hx, hy, hz, gap = params
        he = np.array([hx, hy, hz])
        off = np.array([0.5 * gap + hx, 0.0, 0.0])
        return np.minimum(_box_distance(q - off, he), _box_distance(q + off, he))
    raise ValueError(f"unknown sdf kind {k!r}")


# ---------------------------------------------------------------------------
# PLY export / import
# ---------------------------------------------------------------------------


def write_ply(path, cloud) -> None:
    """Write an ASCII PLY file with one x y z vertex per point."""
    p = as_points(cloud)
    path = Path(path)
    with path.open("w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {p.shape[0]}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for row in p:
            f.write(f"{row[0]:.9g} {row[1]:.9g} {row[2]:.9g}\n")


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY point file written by write_ply."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        tokens = line.split()
        if tokens[:2] == ["element", "vertex"]:
            n = int(tokens[2])
        if tokens and tokens[0] == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    rows = [list(map(float, lines[body_at + j].split()[:3])) for j in range(n)]
    return PointCloud(np.array(rows))
