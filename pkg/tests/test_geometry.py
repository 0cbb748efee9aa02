"""Shape DSL, sampling, volumes, SDF primitives, and PLY round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doughplan import geometry as geo
from doughplan.geometry import (
    Aabb,
    Box,
    Cylinder,
    InvalidShapeError,
    PointCloud,
    Rotate,
    Sphere,
    Torus,
    Translate,
    Union,
    aabb,
    box_sdf,
    capsule_sdf,
    cylinder_sdf,
    plate_pair_sdf,
    program_contains,
    program_from_json,
    program_to_json,
    read_ply,
    relative_volume_change,
    sample_shape,
    sdf_eval,
    shape_volume,
    sphere_sdf,
    validate_program,
    write_ply,
)

import oracles


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def test_sphere_sample_containment():
    prog = Sphere(center=(0, 0, 0), radius=1.0)
    pc = sample_shape(prog, 1000, seed=0)
    assert np.all(np.linalg.norm(pc.points, axis=1) <= 1.0 + 1e-12)


def test_box_sample_mean_near_center():
    prog = Box(center=(0.3, -0.2, 0.7), half_extents=(0.5, 0.5, 0.5))
    pc = sample_shape(prog, 10000, seed=1)
    assert np.all(np.abs(pc.points.mean(axis=0) - (0.3, -0.2, 0.7)) < 0.02)


def test_union_disjoint_boxes_even_split():
    a = Box(center=(0, 0, 0), half_extents=(0.5, 0.5, 0.5))
    b = Box(center=(3, 0, 0), half_extents=(0.5, 0.5, 0.5))
    pc = sample_shape(Union(children=(a, b)), 10000, seed=2)
    frac = np.mean(pc.points[:, 0] < 1.5)
    assert abs(frac - 0.5) < 0.03


def test_sample_determinism():
    prog = Torus(center=(0, 1, 0), major_radius=0.5, minor_radius=0.1)
    a = sample_shape(prog, 500, seed=7).points
    b = sample_shape(prog, 500, seed=7).points
    assert np.array_equal(a, b)
    c = sample_shape(prog, 500, seed=8).points
    assert not np.array_equal(a, c)


def test_translate_moves_samples_rigidly():
    prog = Sphere(center=(0, 0, 0), radius=0.5)
    base = sample_shape(prog, 300, seed=3).points
    moved = sample_shape(Translate(offset=(1, 2, 3), child=prog), 300, seed=3).points
    assert moved.shape == base.shape
    assert np.allclose(moved - base, (1, 2, 3), atol=1e-9)


def test_sample_size_and_errors():
    prog = Sphere(center=(0, 0, 0), radius=0.25)
    assert len(sample_shape(prog, 17, seed=0).points) == 17
    with pytest.raises((InvalidShapeError, ValueError)):
        sample_shape(prog, 0, seed=0)
    with pytest.raises((InvalidShapeError, ValueError)):
        sample_shape(Union(children=()), 10, seed=0)


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------


def test_box_volume_analytic():
    assert shape_volume(Box(half_extents=(0.5, 0.5, 0.5))) == pytest.approx(1.0)


def test_torus_volume_analytic():
    v = shape_volume(Torus(major_radius=1.0, minor_radius=0.25))
    assert v == pytest.approx(2 * np.pi**2 * 1.0 * 0.25**2, rel=1e-9)


def test_sphere_and_cylinder_volume():
    assert shape_volume(Sphere(radius=0.5)) == pytest.approx(4 / 3 * np.pi * 0.125)
    assert shape_volume(Cylinder(radius=0.5, height=2.0)) == pytest.approx(
        np.pi * 0.25 * 2.0)


def test_union_overlapping_spheres_matches_closed_form():
    prog = Union(children=(
        Sphere(center=(0, 0, 0), radius=1.0),
        Sphere(center=(1, 0, 0), radius=1.0),
    ))
    value, stderr = shape_volume(prog, mc_samples=200000, seed=5,
                                 return_stderr=True)
    exact = oracles.sphere_union_volume(1.0, 1.0)
    assert abs(value - exact) < 3 * stderr + 1e-12


def test_disjoint_union_volume_is_sum():
    a = Box(center=(0, 0, 0), half_extents=(0.5, 0.5, 0.5))
    b = Box(center=(5, 0, 0), half_extents=(0.25, 0.25, 0.25))
    value, stderr = shape_volume(Union(children=(a, b)), mc_samples=200000,
                                 seed=6, return_stderr=True)
    assert abs(value - (1.0 + 0.125)) < 3 * stderr + 1e-12


def test_relative_volume_change_values():
    assert relative_volume_change(1.0, 1.0) == 0.0
    v1 = shape_volume(Sphere(radius=1.0))
    v2 = shape_volume(Sphere(radius=2.0))
    assert relative_volume_change(v1, v2) == pytest.approx(7.0, rel=1e-9)
    assert relative_volume_change(1.0, 1.098) == pytest.approx(0.098)


def test_relative_volume_change_domain():
    with pytest.raises(ValueError):
        relative_volume_change(0.0, 1.0)
    with pytest.raises(ValueError):
        relative_volume_change(-1.0, 1.0)


# ---------------------------------------------------------------------------
# program validation + JSON round trip
# ---------------------------------------------------------------------------


def test_validate_rejects_nonpositive_extents():
    with pytest.raises(InvalidShapeError):
        validate_program(Sphere(radius=0.0))
    with pytest.raises(InvalidShapeError):
        validate_program(Box(half_extents=(1.0, -0.1, 1.0)))
    with pytest.raises(InvalidShapeError):
        validate_program(Torus(major_radius=0.1, minor_radius=0.0))


def test_program_json_roundtrip():
    prog = Union(children=(
        Translate(offset=(0, 1, 0), child=Sphere(radius=0.3)),
        Rotate(axis="y", angle=0.5,
               child=Box(center=(1, 0, 0), half_extents=(0.2, 0.1, 0.4))),
    ))
    doc = program_to_json(prog)
    assert doc["dsl_version"] == 1
    assert program_from_json(doc) == prog


def test_program_json_version_guard():
    doc = program_to_json(Sphere(radius=1.0))
    doc["dsl_version"] = 99
    with pytest.raises(InvalidShapeError):
        program_from_json(doc)


# ---------------------------------------------------------------------------
# aabb
# ---------------------------------------------------------------------------


def test_aabb_trivial_cases():
    one = aabb(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    assert np.array_equal(one.lo, [1, 2, 3]) and np.array_equal(one.hi, [1, 2, 3])
    two = aabb(PointCloud(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])))
    assert np.array_equal(two.lo, [0, 0, 0]) and np.array_equal(two.hi, [1, 2, 3])


@given(st.integers(min_value=0, max_value=10**6))
@settings(max_examples=30, deadline=None)
def test_aabb_contains_every_point(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(rng.integers(1, 40), 3))
    box = aabb(PointCloud(pts))
    assert np.all(pts >= box.lo - 1e-12) and np.all(pts <= box.hi + 1e-12)
    assert np.all(box.lo <= box.hi)


# ---------------------------------------------------------------------------
# SDF primitives
# ---------------------------------------------------------------------------


def test_sphere_sdf_known_values():
    prim = sphere_sdf(1.0)
    vals = sdf_eval(prim, np.array([[2.0, 0, 0], [0, 0, 0], [0, 1.0, 0]]))
    assert vals == pytest.approx([1.0, -1.0, 0.0], abs=1e-12)


def test_box_sdf_sign_matches_containment():
    prim = box_sdf((0.4, 0.3, 0.2))
    axes = [np.linspace(-0.8, 0.8, 9)] * 3
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = sdf_eval(prim, grid)
    # strict interior must be negative, strict exterior positive
    strict_in = np.all(np.abs(grid) < (0.4, 0.3, 0.2) - 1e-9, axis=1)
    strict_out = np.any(np.abs(grid) > (0.4, 0.3, 0.2) + 1e-9, axis=1)
    assert np.all(vals[strict_in] < 0)
    assert np.all(vals[strict_out] > 0)


_PRIMS = [
    sphere_sdf(0.7),
    box_sdf((0.4, 0.3, 0.2)),
    capsule_sdf(0.2, 0.5),
    cylinder_sdf(0.3, 0.4),
    plate_pair_sdf((0.05, 0.3, 0.3), gap=0.2),
]


@pytest.mark.parametrize("prim", _PRIMS, ids=lambda p: p.kind)
def test_sdf_lipschitz(prim):
    rng = np.random.default_rng(11)
    x = rng.uniform(-1.5, 1.5, (200, 3))
    y = rng.uniform(-1.5, 1.5, (200, 3))
    dv = np.abs(sdf_eval(prim, x) - sdf_eval(prim, y))
    dx = np.linalg.norm(x - y, axis=1)
    assert np.all(dv <= dx + 1e-9)


def test_sdf_pose_is_rigid():
    prim = capsule_sdf(0.2, 0.5)
    rot = geo.axis_rotation("y", 0.7)
    posed = prim.posed(translation=(1.0, 2.0, 3.0), rotation=rot)
    rng = np.random.default_rng(3)
    local = rng.uniform(-1, 1, (50, 3))
    world = local @ rot.T + (1.0, 2.0, 3.0)
    assert np.allclose(sdf_eval(posed, world), sdf_eval(prim, local), atol=1e-9)


def test_program_contains_matches_sampling():
    prog = Torus(center=(0, 0, 0), major_radius=0.5, minor_radius=0.15)
    pts = sample_shape(prog, 500, seed=9).points
    assert np.all(program_contains(prog, pts))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def test_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(37, 3))
    path = tmp_path / "cloud.ply"
    write_ply(path, pts)
    back = read_ply(path).points
    assert back.shape == pts.shape
    assert np.allclose(back, pts, atol=1e-6)


def test_point_cloud_requires_n_by_3():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0]]))
