import numpy as np
import pytest

from headrecon import mesh
from headrecon.errors import DataIOError, SceneFormatError, ValidationError


def sphere_field(r=0.8):
    return lambda x: np.linalg.norm(np.atleast_2d(x), axis=1) - r


@pytest.fixture(scope="module")
def sphere_mesh():
    return mesh.marching_cubes(sphere_field(), [-1.2] * 3, [1.2] * 3, 48)


def test_trimesh_validates_indices():
    with pytest.raises(ValidationError):
        mesh.TriMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))


def test_marching_cubes_sphere_geometry(sphere_mesh):
    m = sphere_mesh
    assert len(m.vertices) > 1000
    radii = np.linalg.norm(m.vertices, axis=1)
    # vertices sit on the isosurface up to linear-interp error
    assert np.max(np.abs(radii - 0.8)) < 5e-3
    # closed surface: area within 2% of 4 pi r^2
    assert abs(mesh.mesh_area(m) - 4 * np.pi * 0.8**2) / (4 * np.pi * 0.8**2) < 0.02
    assert mesh.connected_component_count(m) == 1


def test_marching_cubes_two_spheres_components():
    def two(x):
        x = np.atleast_2d(x)
        a = np.linalg.norm(x - [0.6, 0, 0], axis=1) - 0.3
        b = np.linalg.norm(x + [0.6, 0, 0], axis=1) - 0.3
        return np.minimum(a, b)

    m = mesh.marching_cubes(two, [-1.5] * 3, [1.5] * 3, 40)
    assert mesh.connected_component_count(m) == 2


def test_marching_cubes_empty_level_set():
    m = mesh.marching_cubes(lambda x: np.full(len(np.atleast_2d(x)), 1.0), [-1] * 3, [1] * 3, 8)
    assert m.empty


def test_marching_cubes_validates_box():
    with pytest.raises(ValidationError):
        mesh.marching_cubes(sphere_field(), [1, 1, 1], [-1, -1, -1], 8)
    with pytest.raises(ValidationError):
        mesh.marching_cubes(sphere_field(), [-1] * 3, [1] * 3, 1)


def test_face_normals_point_outward(sphere_mesh):
    fn = mesh.face_normals(sphere_mesh)
    tri = sphere_mesh.vertices[sphere_mesh.triangles]
    centers = tri.mean(axis=1)
    out = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    # outward orientation on >99% of faces
    assert np.mean(np.sum(fn * out, axis=1) > 0) > 0.99


def test_sample_surface_on_surface_and_area_weighted(sphere_mesh):
    pc = mesh.sample_surface(sphere_mesh, 4000, seed=0)
    assert pc.points.shape == (4000, 3)
    r = np.linalg.norm(pc.points, axis=1)
    assert np.max(np.abs(r - 0.8)) < 6e-3
    # area weighting: octant counts should be near-uniform
    octant = (pc.points[:, 0] > 0).astype(int) * 4 + (pc.points[:, 1] > 0) * 2 + (pc.points[:, 2] > 0)
    counts = np.bincount(octant, minlength=8)
    assert counts.min() > 4000 / 8 * 0.8
    assert np.allclose(np.linalg.norm(pc.normals, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValidationError):
        mesh.sample_surface(mesh.TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


def test_point_triangle_distances_cases():
    tri = np.array([[[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]]])
    # above the interior -> perpendicular distance
    assert abs(mesh.point_triangle_distances(np.array([[0.2, 0.2, 0.5]]), tri)[0] - 0.5) < 1e-12
    # nearest to a vertex
    d = mesh.point_triangle_distances(np.array([[-1.0, -1.0, 0.0]]), tri)[0]
    assert abs(d - np.sqrt(2)) < 1e-12
    # nearest to an edge
    d = mesh.point_triangle_distances(np.array([[0.5, -1.0, 0.0]]), tri)[0]
    assert abs(d - 1.0) < 1e-12


def test_chamfer_matches_brute_force(sphere_mesh):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(60, 3)) * 0.5
    fast = mesh.chamfer_unidirectional(pts, sphere_mesh)
    tri = sphere_mesh.vertices[sphere_mesh.triangles]
    brute = np.mean(
        [np.min(mesh.point_triangle_distances(np.tile(p, (len(tri), 1)), tri)) for p in pts]
    )
    assert abs(fast - brute) < 1e-10


def test_chamfer_sphere_analytic(sphere_mesh):
    rng = np.random.default_rng(2)
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # points exactly on the analytic sphere: distance to mesh ~ interp error
    assert mesh.chamfer_unidirectional(0.8 * d, sphere_mesh) < 2e-3
    # points at radius 1.0: distance ~ 0.2
    assert abs(mesh.chamfer_unidirectional(1.0 * d, sphere_mesh) - 0.2) < 3e-3


def test_chamfer_pointcloud_target():
    gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    pred = mesh.PointCloud(np.array([[0.0, 0.1, 0.0], [1.0, -0.2, 0.0]]), None)
    assert abs(mesh.chamfer_unidirectional(gt, pred) - 0.15) < 1e-12
    with pytest.raises(ValidationError):
        mesh.chamfer_unidirectional(np.zeros((0, 3)), pred)


def test_obj_roundtrip(tmp_path, sphere_mesh):
    p = tmp_path / "m.obj"
    mesh.save_obj(sphere_mesh, p)
    back = mesh.load_obj(p)
    assert np.allclose(back.vertices, sphere_mesh.vertices, atol=1e-6)
    assert np.array_equal(back.triangles, sphere_mesh.triangles)


def test_load_obj_handles_slashed_faces_and_errors(tmp_path):
    p = tmp_path / "slashed.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n")
    m = mesh.load_obj(p)
    assert len(m.triangles) == 1 and m.triangles.tolist() == [[0, 1, 2]]

    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nf -1 2 3\n")
    with pytest.raises(SceneFormatError):
        mesh.load_obj(bad)

    empty = tmp_path / "empty.obj"
    empty.write_text("# nothing\n")
    with pytest.raises(SceneFormatError):
        mesh.load_obj(empty)

    with pytest.raises(DataIOError):
        mesh.load_obj(tmp_path / "missing.obj")


def test_ply_mesh_and_points_roundtrip(tmp_path, sphere_mesh):
    mp = tmp_path / "m.ply"
    mesh.save_ply_mesh(sphere_mesh, mp)
    assert mp.stat().st_size > 0

    pc = mesh.sample_surface(sphere_mesh, 100, seed=3)
    pp = tmp_path / "p.ply"
    mesh.save_ply_points(pc, pp)
    back = mesh.load_ply_points(pp)
    assert np.allclose(back.points, pc.points, atol=1e-6)
    assert np.allclose(back.normals, pc.normals, atol=1e-6)

    with pytest.raises(DataIOError):
        mesh.load_ply_points(tmp_path / "missing.ply")


def test_mesh_area_zero_for_empty():
    assert mesh.mesh_area(mesh.TriMesh(np.zeros((0, 3)), np.zeros((0, 3)))) == 0.0
