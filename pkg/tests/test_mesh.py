import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ball
from trajreg.errors import MeshError, OpenMeshError
from trajreg.mesh import (SmoothingParams, TriMesh, box_mesh, enclosed_volume, inside_mask,
                          is_closed, laplacian_smooth, marching_cubes, read_off,
                          rescale_to_volume, surface_area, voxelize, write_off)
from trajreg.metrics import dsc
from trajreg.volume import LabelVolume

BALL_VOLUME = 4.0 / 3.0 * np.pi * 5 ** 3


def _ball_labels():
    return LabelVolume(ball((16, 16, 16), (7.5, 7.5, 7.5), 5).astype(int))


def test_empty_label_gives_empty_mesh():
    m = marching_cubes(LabelVolume(np.zeros((6, 6, 6), int)), 1)
    assert m.is_empty and len(m) == 0
    assert not voxelize(m, (6, 6, 6)).data.any()


def test_marching_cubes_ball_volume():
    m = marching_cubes(_ball_labels(), 1)
    assert is_closed(m)
    assert enclosed_volume(m) == pytest.approx(BALL_VOLUME, rel=0.15)


def test_half_space_area_with_caps():
    lab = np.zeros((16, 16, 16), int)
    lab[:, :, :8] = 1
    m = marching_cubes(LabelVolume(lab), 1)
    assert is_closed(m)
    # slab [-0.5, 15.5]^2 x [-0.5, 7.5]: two 16x16 faces plus four 16x8 sides
    assert surface_area(m) == pytest.approx(2 * 16 * 16 + 4 * 16 * 8, rel=0.10)


def test_adjacency_symmetric_and_edges_shared():
    m = marching_cubes(_ball_labels(), 1)
    a = m.adjacency
    assert (a != a.T).nnz == 0
    assert a.diagonal().sum() == 0


def _plane_patch(n=5):
    g = np.array([(i, j, 0.0) for i in range(n) for j in range(n)])
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            tris += [(a, b, c), (a, c, d)]
    return TriMesh(g, tris)


def test_smoothing_fixed_point():
    # regular triangulation with the two diagonal neighbours included: the
    # interior centroid of a symmetric neighbourhood is the vertex itself
    m = _plane_patch()
    out = laplacian_smooth(m, SmoothingParams(lam=1.0, iterations=1))
    deg = m.degree
    interior = [i for i in range(m.n_vertices)
                if 0 < m.vertices[i, 0] < 4 and 0 < m.vertices[i, 1] < 4]
    assert all(deg[i] == 6 for i in interior)
    np.testing.assert_allclose(out.vertices[interior], m.vertices[interior], atol=1e-15)


def test_smoothing_hand_example():
    verts = [(0, 0, 1), (1, 0, 0), (0, 1, 0), (-1, 0, 0), (0, -1, 0)]
    tris = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 1)]
    out = laplacian_smooth(TriMesh(verts, tris), SmoothingParams(lam=1.0, iterations=1))
    np.testing.assert_allclose(out.vertices[0], (0, 0, 0), atol=1e-15)


def test_smoothing_keeps_topology():
    m = marching_cubes(_ball_labels(), 1)
    out = laplacian_smooth(m, SmoothingParams(0.5, 7))
    assert out.n_vertices == m.n_vertices
    assert np.array_equal(out.triangles, m.triangles)
    assert (out.adjacency != m.adjacency).nnz == 0


def test_cube_surface_shrinks_every_iteration():
    # a 12-triangle cube collapses in a few steps; use the staircase surface
    # of a solid 8^3 box instead
    lab = np.zeros((12, 12, 12), int)
    lab[2:10, 2:10, 2:10] = 1
    m = marching_cubes(LabelVolume(lab), 1)
    vols = [enclosed_volume(m)]
    for _ in range(50):
        m = laplacian_smooth(m, SmoothingParams(0.5, 1))
        vols.append(enclosed_volume(m))
    assert all(b < a for a, b in zip(vols, vols[1:]))


def test_unit_cube_volume_and_scaling():
    assert enclosed_volume(box_mesh((0, 0, 0), (1, 1, 1))) == 1.0
    assert enclosed_volume(box_mesh((0, 0, 0), (3, 3, 3))) == pytest.approx(27.0, rel=1e-15)
    assert enclosed_volume(box_mesh((0, 0, 0), (1, 1, 1), spacing=(2, 1, 1))) == 2.0


def test_open_mesh_errors():
    m = TriMesh([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [(0, 1, 2)])
    assert not is_closed(m)
    with pytest.raises(OpenMeshError):
        enclosed_volume(m)
    with pytest.raises(OpenMeshError):
        voxelize(m, (4, 4, 4))


def test_mesh_validation():
    with pytest.raises(MeshError):
        TriMesh([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [(0, 1, 3)])


def test_rescale_at_target_is_identity():
    m = marching_cubes(_ball_labels(), 1)
    out = rescale_to_volume(m, enclosed_volume(m))
    np.testing.assert_allclose(out.vertices, m.vertices, atol=1e-12)


def test_rescale_cube_halves_edges():
    m = box_mesh((0, 0, 0), (2, 2, 2))
    out = rescale_to_volume(m, 1.0)
    c = m.vertices.mean(0)
    np.testing.assert_allclose(out.vertices - c, 0.5 * (m.vertices - c), atol=1e-15)
    with pytest.raises(ValueError):
        rescale_to_volume(m, 0.0)


@given(iters=st.integers(1, 40), lam=st.floats(0.05, 1.0))
def test_rescale_restores_smoothed_volume(iters, lam):
    m = marching_cubes(_ball_labels(), 1)
    target = enclosed_volume(m)
    out = rescale_to_volume(laplacian_smooth(m, SmoothingParams(lam, iters)), target)
    assert enclosed_volume(out) == pytest.approx(target, rel=1e-6)


def test_voxelize_box_exact():
    m = box_mesh((1.5, 1.5, 1.5), (9.5, 9.5, 9.5))
    got = voxelize(m, (12, 12, 12), label=3).data
    g = np.indices((12, 12, 12))
    expect = np.all((g >= 2) & (g <= 9), axis=0) * 3
    assert np.array_equal(got, expect)


def test_voxelize_ball_round_trip():
    lab = _ball_labels()
    back = voxelize(marching_cubes(lab, 1), lab)
    assert dsc(back, lab, 1) >= 0.95


@given(r=st.floats(3.0, 6.0), cx=st.floats(7.0, 9.0))
def test_round_trip_solids(r, cx):
    lab = LabelVolume(ball((18, 18, 18), (cx, 8.5, 9.0), r).astype(int))
    back = LabelVolume(inside_mask(marching_cubes(lab, 1), lab.dims).astype(int))
    assert dsc(back, lab, 1) >= 0.95


def test_off_round_trip(tmp_path):
    m = marching_cubes(_ball_labels(), 1)
    write_off(m, tmp_path / "m.off")
    back = read_off(tmp_path / "m.off")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)
    (tmp_path / "bad.off").write_text("PLY\n")
    with pytest.raises(MeshError):
        read_off(tmp_path / "bad.off")
