import numpy as np
import pytest

from unrig.mesh import (
    EdgeSet,
    Mesh,
    ObjParseError,
    edges,
    load_obj,
    normalize_height,
    occupancy,
    sample_queries,
    sample_surface,
    save_obj,
    surface_positions,
    winding_numbers,
)

from geo import icosahedron, icosphere, ray_parity_inside, unit_cube


def write(tmp_path, text):
    p = tmp_path / "mesh.obj"
    p.write_text(text)
    return p


class TestLoadObj:
    def test_minimal_file(self, tmp_path):
        mesh = load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
        assert len(mesh.vertices) == 3
        assert len(mesh.faces) == 1

    def test_quad_fan_triangulation(self, tmp_path):
        mesh = load_obj(
            write(tmp_path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        )
        assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_index_out_of_range(self, tmp_path):
        path = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
        with pytest.raises(ObjParseError, match="out of range"):
            load_obj(path)

    def test_slash_forms_ignored(self, tmp_path):
        mesh = load_obj(
            write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3//3\n")
        )
        assert mesh.faces.tolist() == [[0, 1, 2]]

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_obj(tmp_path / "absent.obj")

    def test_malformed_line_reports_number(self, tmp_path):
        path = write(tmp_path, "v 0 0 0\nv oops 0 0\n")
        with pytest.raises(ObjParseError, match="mesh.obj:2"):
            load_obj(path)


class TestSaveObj:
    def test_single_triangle_round_trip(self, tmp_path):
        mesh = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.5]]), np.array([[0, 1, 2]]))
        path = tmp_path / "tri.obj"
        save_obj(mesh, path)
        back = load_obj(path)
        assert back.faces.tolist() == mesh.faces.tolist()
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)

    def test_empty_mesh_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_obj(Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), tmp_path / "x.obj")

    def test_random_mesh_round_trip_error(self, tmp_path):
        rng = np.random.default_rng(0)
        verts = rng.normal(size=(1000, 3))
        faces = rng.integers(0, 1000, size=(500, 3))
        mesh = Mesh(verts, faces)
        path = tmp_path / "rand.obj"
        save_obj(mesh, path)
        back = load_obj(path)
        assert back.faces.tolist() == mesh.faces.tolist()
        assert np.abs(back.vertices - mesh.vertices).max() < 1e-6


class TestNormalizeHeight:
    def test_extent_two_gives_half_scale(self):
        mesh = Mesh(np.array([[0, 0, 0], [0, 2, 0], [1, 1, 0]]), np.array([[0, 1, 2]]))
        normed, scale = normalize_height(mesh)
        assert scale == pytest.approx(0.5)
        ys = normed.vertices[:, 1]
        assert abs((ys.max() - ys.min()) - 1.0) < 1e-9

    def test_unit_extent_identity(self):
        mesh = Mesh(np.array([[0, 0, 0], [0, 1, 0], [1, 0.5, 0]]), np.array([[0, 1, 2]]))
        normed, scale = normalize_height(mesh)
        assert scale == pytest.approx(1.0)
        assert np.abs(normed.vertices - mesh.vertices).max() < 1e-12

    def test_flat_mesh_rejected(self):
        mesh = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1]]), np.array([[0, 1, 2]]))
        with pytest.raises(ValueError):
            normalize_height(mesh)


class TestSampleSurface:
    def test_zero_samples(self):
        assert sample_surface(unit_cube(), 0, seed=1) == []

    def test_single_triangle_in_plane(self):
        mesh = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
        for sp in sample_surface(mesh, 200, seed=3):
            assert abs(sp.position[2]) < 1e-9

    def test_barycentric_reconstruction(self):
        mesh = icosphere(1)
        for sp in sample_surface(mesh, 500, seed=5):
            tri = mesh.vertices[mesh.faces[sp.face_index]]
            recon = sp.barycentric @ tri
            assert np.abs(recon - sp.position).max() < 1e-9
            assert sp.barycentric.min() >= 0
            assert abs(sp.barycentric.sum() - 1.0) < 1e-9

    def test_area_proportional_face_choice(self):
        # two triangles, areas 0.5 and 1.5 -> probabilities 1/4 and 3/4
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [4, 0, 0], [1, 1, 0]])
        faces = np.array([[0, 1, 2], [1, 3, 4]])
        mesh = Mesh(verts, faces)
        n = 40000
        samples = sample_surface(mesh, n, seed=11)
        counts = np.bincount([s.face_index for s in samples], minlength=2)
        sigma = np.sqrt(n * 0.25 * 0.75)
        assert abs(counts[0] - n * 0.25) < 3 * sigma
        assert abs(counts[1] - n * 0.75) < 3 * sigma

    def test_deterministic(self):
        mesh = unit_cube()
        a = surface_positions(sample_surface(mesh, 50, seed=9))
        b = surface_positions(sample_surface(mesh, 50, seed=9))
        assert np.array_equal(a, b)


class TestOccupancy:
    def test_cube_centroid_inside(self):
        assert occupancy(unit_cube(), np.array([[0.5, 0.5, 0.5]]))[0] == 1

    def test_far_point_outside(self):
        assert occupancy(unit_cube(), np.array([[10.0, 10.0, 10.0]]))[0] == 0

    def test_against_ray_parity_oracle(self):
        mesh = icosphere(2)
        rng = np.random.default_rng(42)
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
        pts = lo + rng.random((1000, 3)) * (hi - lo)
        # exclude points too close to the surface for either method
        radii = np.linalg.norm(pts, axis=1)
        away = np.abs(radii - 1.0) > 1e-4
        ours = occupancy(mesh, pts[away])
        oracle = ray_parity_inside(mesh, pts[away])
        agreement = (ours == oracle).mean()
        assert agreement >= 0.99

    def test_rigid_invariance(self):
        mesh = icosphere(1)
        rng = np.random.default_rng(7)
        pts = rng.normal(scale=0.8, size=(200, 3))
        radii = np.linalg.norm(pts, axis=1)
        keep = np.abs(radii - 1.0) > 1e-3
        pts = pts[keep]
        base = occupancy(mesh, pts)
        # random rotation + translation applied to mesh and points together
        angle = 1.1
        axis = np.array([0.3, 0.5, 0.8])
        axis = axis / np.linalg.norm(axis)
        kmat = np.array(
            [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
        )
        rot = np.eye(3) + np.sin(angle) * kmat + (1 - np.cos(angle)) * kmat @ kmat
        shift = np.array([2.0, -1.0, 0.5])
        moved_mesh = Mesh(mesh.vertices @ rot.T + shift, mesh.faces)
        moved = occupancy(moved_mesh, pts @ rot.T + shift)
        assert np.array_equal(base, moved)

    def test_degenerate_triangle_warns(self):
        mesh = unit_cube()
        verts = np.vstack([mesh.vertices, mesh.vertices[:1], mesh.vertices[:1]])
        faces = np.vstack([mesh.faces, [[8, 9, 0]]])
        with pytest.warns(RuntimeWarning, match="degenerate"):
            labels = occupancy(Mesh(verts, faces), np.array([[0.5, 0.5, 0.5]]))
        assert labels[0] == 1


class TestSampleQueries:
    def test_deterministic(self):
        mesh = unit_cube()
        a = sample_queries(mesh, 10, sigma=0.02, seed=5)
        b = sample_queries(mesh, 10, sigma=0.02, seed=5)
        assert all(np.array_equal(x.position, y.position) for x, y in zip(a, b))
        assert [x.occupancy for x in a] == [y.occupancy for y in b]

    def test_surface_points_follow_threshold_convention(self):
        # sigma=0 puts queries exactly on faces where the self-triangle's
        # solid angle sits on a +-2pi branch; the label is whatever the
        # documented w >= 0.5 rule says for the computed value
        mesh = unit_cube()
        samples = sample_queries(mesh, 20, sigma=0.0, seed=2)
        near_surface = samples[:10]  # first half is the surface half
        w = winding_numbers(mesh, np.stack([s.position for s in near_surface]))
        labels = np.array([s.occupancy for s in near_surface])
        assert np.array_equal(labels, (w >= 0.5).astype(int))

    def test_uniform_half_volume_fraction(self):
        # box = bounding box of an off-axis cuboid: inside fraction = volume ratio
        cube = unit_cube()
        stretched = Mesh(cube.vertices * np.array([1.0, 0.5, 1.0]), cube.faces)
        n = 20000
        samples = sample_queries(stretched, n, sigma=0.01, seed=10)
        uniform = samples[n // 2 :]
        frac = np.mean([s.occupancy for s in uniform])
        # bounding box equals the cuboid, so essentially all uniform draws land inside
        assert frac > 0.99

    def test_labels_match_occupancy(self):
        mesh = icosphere(1)
        samples = sample_queries(mesh, 64, sigma=0.1, seed=3)
        pts = np.stack([s.position for s in samples])
        assert np.array_equal(occupancy(mesh, pts), np.array([s.occupancy for s in samples]))


class TestEdges:
    def test_single_triangle(self):
        mesh = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
        assert len(edges(mesh)) == 3

    def test_shared_edge(self):
        mesh = Mesh(
            np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]),
            np.array([[0, 1, 2], [1, 3, 2]]),
        )
        assert len(edges(mesh)) == 5

    def test_icosahedron_euler(self):
        mesh = icosahedron()
        e = edges(mesh)
        assert len(e) == 30
        assert len(mesh.vertices) - len(e) + len(mesh.faces) == 2

    def test_icosphere_euler(self):
        mesh = icosphere(2)
        e = edges(mesh)
        assert len(mesh.vertices) - len(e) + len(mesh.faces) == 2
