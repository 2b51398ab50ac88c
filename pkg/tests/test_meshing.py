"""Occupancy grids, marching cubes, visibility culling, PLY round trips."""

import numpy as np
import pytest

from labelfield.field import EncodingConfig, init_params
from labelfield.keyframes import Keyframe
from labelfield.meshing import (
    LabelledMesh,
    extract_mesh,
    label_vertices,
    mesh_from_occupancy,
    query_grid,
    read_ply,
    visibility_mask,
    write_ply,
)
from labelfield.rendering import CameraIntrinsics
from labelfield.semantics import ClassRegistry, LabelTree, class_colour


def sphere_occupancy(resolution=32, radius=0.6, ramp_voxels=2.0):
    lo, hi = -1.0, 1.0
    sp = (hi - lo) / resolution
    centres = lo + (np.arange(resolution) + 0.5) * sp
    gx, gy, gz = np.meshgrid(centres, centres, centres, indexing="ij")
    d = np.sqrt(gx**2 + gy**2 + gz**2)
    occ = np.clip(0.5 + (radius - d) / (ramp_voxels * sp), 0.0, 1.0)
    origin = np.full(3, lo + 0.5 * sp)
    spacing = np.full(3, sp)
    return occ, origin, spacing


def tiny_params(seed=0):
    enc = EncodingConfig(bound_min=(-1, -1, -1), bound_max=(1, 1, 1), num_bands=2)
    return init_params(seed, 16, enc)


class TestMeshFromOccupancy:
    def test_sphere_vertices_sit_on_the_analytic_surface(self):
        occ, origin, spacing = sphere_occupancy()
        verts, faces = mesh_from_occupancy(occ, origin, spacing)
        dist = np.linalg.norm(verts, axis=1)
        # linear interpolation along ramped occupancy recovers the radius
        assert np.abs(dist - 0.6).max() < 0.005
        assert faces.min() >= 0 and faces.max() < len(verts)

    def test_binary_occupancy_stays_within_half_voxel_diagonal(self):
        occ, origin, spacing = sphere_occupancy(ramp_voxels=1e-9)
        verts, _ = mesh_from_occupancy(occ, origin, spacing)
        dist = np.linalg.norm(verts, axis=1)
        assert np.abs(dist - 0.6).max() <= 0.5 * np.linalg.norm(spacing)

    def test_closed_surface_has_sphere_topology(self):
        occ, origin, spacing = sphere_occupancy()
        verts, faces = mesh_from_occupancy(occ, origin, spacing)
        edges = {
            (min(f[a], f[b]), max(f[a], f[b]))
            for f in faces
            for a, b in ((0, 1), (1, 2), (2, 0))
        }
        assert len(verts) - len(edges) + len(faces) == 2

    def test_surface_coverage_both_directions(self):
        occ, origin, spacing = sphere_occupancy()
        verts, _ = mesh_from_occupancy(occ, origin, spacing)
        rng = np.random.default_rng(0)
        dirs = rng.normal(size=(200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        true_pts = 0.6 * dirs
        nearest = np.min(
            np.linalg.norm(true_pts[:, None] - verts[None], axis=2), axis=1
        )
        assert nearest.max() <= np.linalg.norm(spacing)

    def test_level_outside_range_raises(self):
        occ = np.full((8, 8, 8), 0.2)
        with pytest.raises(ValueError, match="iso level"):
            mesh_from_occupancy(occ, np.zeros(3), np.full(3, 0.1))


class TestQueryGrid:
    def test_grid_geometry_and_range(self):
        params = tiny_params()
        occ, origin, spacing = query_grid(params, resolution=12)
        assert occ.shape == (12, 12, 12)
        np.testing.assert_allclose(spacing, 2.0 / 12)
        np.testing.assert_allclose(origin, -1.0 + 1.0 / 12)
        assert occ.min() >= 0.0 and occ.max() <= 1.0

    def test_fresh_field_has_no_surface_to_extract(self):
        # small-gain init keeps density near softplus(0); opacity never crosses 0.5
        with pytest.raises(ValueError, match="occupancy range"):
            extract_mesh(tiny_params(), registry=ClassRegistry(), resolution=12)


class TestVisibilityMask:
    def _frame(self, depth_value=2.0):
        intr = CameraIntrinsics(width=16, height=12, fx=8.0, fy=8.0, cx=7.5, cy=5.5)
        rgb = np.zeros((12, 16, 3), dtype=np.float32)
        depth = np.full((12, 16), depth_value, dtype=np.float32)
        return Keyframe(frame_id=0, rgb=rgb, depth=depth, pose=np.eye(4), intrinsics=intr)

    def test_frustum_and_depth_gating(self):
        origin = np.array([-1.0, -1.0, 0.25])
        spacing = np.array([0.25, 0.25, 0.5])
        mask = visibility_mask([self._frame()], origin, spacing, 8, margin=0.1)
        # on-axis voxel in front of the measured surface: index (4,4,1) -> z=0.75
        assert mask[4, 4, 1]
        # behind the measured surface (z = 3.75 > 2 + margin)
        assert not mask[4, 4, 7]
        # outside the frustum: x = -1 at z = 0.25 projects far left of the image
        assert not mask[0, 4, 0]
        # behind the camera plane
        assert not mask[4, 4, 0] or origin[2] + 0 * spacing[2] > 0

    def test_missing_depth_is_unobserved(self):
        mask = visibility_mask(
            [self._frame(depth_value=0.0)],
            np.array([-1.0, -1.0, 0.25]),
            np.array([0.25, 0.25, 0.5]),
            8,
        )
        assert not mask.any()

    def test_margin_extends_past_surface(self):
        origin = np.array([-1.0, -1.0, 0.25])
        spacing = np.array([0.25, 0.25, 0.5])
        narrow = visibility_mask([self._frame()], origin, spacing, 8, margin=0.01)
        wide = visibility_mask([self._frame()], origin, spacing, 8, margin=1.0)
        # z=2.25 voxel sits 0.25 behind the surface: only the wide margin sees it
        assert not narrow[4, 4, 4]
        assert wide[4, 4, 4]
        assert wide.sum() >= narrow.sum()

    def test_masked_extraction_never_invents_geometry(self):
        # a solid sphere whose interior is marked unobserved: extraction must
        # keep the true surface and produce nothing inside, neither the shell
        # an empty fill would cut nor the walls a solid fill would add
        occ, origin, spacing = sphere_occupancy()
        centres = origin[0] + np.arange(32) * spacing[0]
        gx, gy, gz = np.meshgrid(centres, centres, centres, indexing="ij")
        d = np.sqrt(gx**2 + gy**2 + gz**2)
        mask = d > 0.45  # everything deeper than ~2 voxels inside is unknown
        verts, _ = mesh_from_occupancy(occ, origin, spacing, mask=mask)
        dist = np.linalg.norm(verts, axis=1)
        assert len(verts) > 0
        assert np.abs(dist - 0.6).max() < 0.01

    def test_fully_masked_grid_raises(self):
        occ, origin, spacing = sphere_occupancy(resolution=8)
        mask = occ > 2.0  # nothing observed
        with pytest.raises(ValueError):
            mesh_from_occupancy(occ, origin, spacing, mask=mask)


class TestLabelVertices:
    def test_fresh_flat_field_labels_class_zero(self):
        registry = ClassRegistry()
        registry.create_class("thing")
        registry.create_class("other")
        verts = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]])
        labels, colours = label_vertices(tiny_params(), verts, registry=registry)
        assert labels.shape == (2,)
        assert set(labels) <= {0, 1}
        for lab, col in zip(labels, colours):
            np.testing.assert_array_equal(col, class_colour(int(lab)))

    def test_hier_ties_stop_at_root(self):
        tree = LabelTree()
        tree.create_node("0", "left")
        verts = np.zeros((3, 3))
        params = tiny_params()
        for _, arr in params.arrays():
            arr[...] = 0.0  # exact 0.5 probabilities at every level
        labels, colours = label_vertices(params, verts, tree=tree)
        np.testing.assert_array_equal(labels, 0)
        np.testing.assert_array_equal(colours, 0)

    def test_requires_registry_or_tree(self):
        with pytest.raises(ValueError, match="registry or a tree"):
            label_vertices(tiny_params(), np.zeros((1, 3)))


class TestFiltered:
    def _mesh(self):
        return LabelledMesh(
            vertices=np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float),
            faces=np.array([[0, 1, 2], [1, 3, 2]]),
            labels=np.array([1, 1, 1, 2], dtype=np.int32),
            colours=np.zeros((4, 3), dtype=np.uint8),
        )

    def test_keeps_faces_with_all_vertices_matching(self):
        sub = self._mesh().filtered(1)
        assert len(sub.vertices) == 3
        np.testing.assert_array_equal(sub.faces, [[0, 1, 2]])
        assert set(sub.labels) == {1}

    def test_label_without_faces_keeps_vertices_only(self):
        sub = self._mesh().filtered(2)
        assert len(sub.vertices) == 1
        assert len(sub.faces) == 0

    def test_absent_label_gives_empty_mesh(self):
        sub = self._mesh().filtered(9)
        assert len(sub.vertices) == 0
        assert len(sub.faces) == 0


class TestPlyRoundTrip:
    def test_round_trip_preserves_everything(self, tmp_path):
        occ, origin, spacing = sphere_occupancy(resolution=12)
        verts, faces = mesh_from_occupancy(occ, origin, spacing)
        mesh = LabelledMesh(
            vertices=verts,
            faces=faces,
            labels=np.arange(len(verts), dtype=np.int32) % 5,
            colours=(np.arange(len(verts) * 3) % 256).reshape(-1, 3).astype(np.uint8),
        )
        path = tmp_path / "m.ply"
        write_ply(path, mesh)
        back = read_ply(path)
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_array_equal(back.faces, mesh.faces)
        np.testing.assert_array_equal(back.labels, mesh.labels)
        np.testing.assert_array_equal(back.colours, mesh.colours)

    def test_header_declares_counts(self, tmp_path):
        mesh = LabelledMesh(
            vertices=np.zeros((2, 3)),
            faces=np.zeros((0, 3), dtype=np.int64),
            labels=np.zeros(2, dtype=np.int32),
            colours=np.zeros((2, 3), dtype=np.uint8),
        )
        path = tmp_path / "tiny.ply"
        write_ply(path, mesh)
        text = path.read_text().splitlines()
        assert "element vertex 2" in text
        assert "element face 0" in text

    def test_reject_non_ply(self, tmp_path):
        path = tmp_path / "nope.ply"
        path.write_text("obj\n1 2 3\n")
        with pytest.raises(ValueError, match="PLY"):
            read_ply(path)
