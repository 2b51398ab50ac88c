"""Surface extraction: density grid -> marching cubes -> labelled PLY.

The field's density is converted to per-voxel opacity o = 1 - exp(-rho *
delta) with delta one voxel edge, and the 0.5 iso-surface of that opacity
grid is extracted. Vertex labels and colours come from querying the field
at each vertex position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .field import FieldParams, encode_position, field_forward
from .semantics import (
    ClassRegistry,
    LabelTree,
    class_colour,
    decode_hier_batch,
    flat_probs,
    path_from_heap_index,
)

DEFAULT_RESOLUTION = 64
CHUNK_POINTS = 131072


@dataclass
class LabelledMesh:
    vertices: np.ndarray  # (V, 3) world coordinates
    faces: np.ndarray  # (F, 3) vertex indices
    labels: np.ndarray  # (V,) int: class id (flat) or heap index (hier)
    colours: np.ndarray  # (V, 3) uint8

    def filtered(self, label: int) -> "LabelledMesh":
        """Sub-mesh of faces whose three vertices all carry ``label``."""
        keep_vertex = self.labels == label
        keep_face = keep_vertex[self.faces].all(axis=1)
        old_to_new = np.cumsum(keep_vertex) - 1
        return LabelledMesh(
            vertices=self.vertices[keep_vertex],
            faces=old_to_new[self.faces[keep_face]],
            labels=self.labels[keep_vertex],
            colours=self.colours[keep_vertex],
        )


def query_grid(
    params: FieldParams, resolution: int = DEFAULT_RESOLUTION, chunk: int = CHUNK_POINTS
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-centre opacity grid over the encoded scene bound.

    Returns (occupancy (R,R,R), origin (3,), spacing (3,)).
    """
    lo = np.asarray(params.encoding.bound_min)
    hi = np.asarray(params.encoding.bound_max)
    spacing = (hi - lo) / resolution
    centres = [lo[i] + (np.arange(resolution) + 0.5) * spacing[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*centres, indexing="ij")
    points = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(params.dtype)

    delta = float(np.mean(spacing))
    occ = np.empty(points.shape[0], dtype=np.float64)
    for i in range(0, points.shape[0], chunk):
        feats = encode_position(points[i : i + chunk], params.encoding)
        out = field_forward(params, feats)
        occ[i : i + chunk] = -np.expm1(-out.density.astype(np.float64) * delta)
    origin = lo + 0.5 * spacing
    return occ.reshape(resolution, resolution, resolution), origin, spacing


def label_vertices(
    params: FieldParams,
    vertices: np.ndarray,
    registry: ClassRegistry | None = None,
    tree: LabelTree | None = None,
    chunk: int = CHUNK_POINTS,
) -> tuple[np.ndarray, np.ndarray]:
    """Class ids (or tree heap indices) and colours at world positions."""
    labels = np.empty(vertices.shape[0], dtype=np.int32)
    colours = np.empty((vertices.shape[0], 3), dtype=np.uint8)
    for i in range(0, vertices.shape[0], chunk):
        feats = encode_position(vertices[i : i + chunk].astype(params.dtype), params.encoding)
        logits = field_forward(params, feats).logits
        if registry is not None:
            probs = flat_probs(logits, max(registry.num_classes, 1))
            ids = np.argmax(probs, axis=-1).astype(np.int32)
            labels[i : i + chunk] = ids
            colours[i : i + chunk] = np.array(
                [class_colour(int(c)) for c in ids], dtype=np.uint8
            )
        elif tree is not None:
            heap = decode_hier_batch(logits, tree)
            labels[i : i + chunk] = heap
            cols = np.zeros((heap.shape[0], 3), dtype=np.uint8)
            for j, h in enumerate(heap):
                if h > 0:
                    path = path_from_heap_index(int(h))
                    cols[j] = tree.colour_of(path)
            colours[i : i + chunk] = cols
        else:
            raise ValueError("need a registry or a tree to label vertices")
    return labels, colours


def visibility_mask(
    frames: list,
    origin: np.ndarray,
    spacing: np.ndarray,
    resolution: int,
    margin: float | None = None,
) -> np.ndarray:
    """Boolean grid of voxels seen by at least one keyframe.

    A voxel counts as observed when it projects into a frame in front of
    the camera and lies no more than ``margin`` behind the measured surface.
    The field is unconstrained in unobserved space (object interiors,
    occlusion shadows, outside every frustum), so meshing restricts
    extraction to this mask rather than guessing a fill value there: any
    fill invents geometry at the mask boundary, empty a shell inside every
    closed object, solid a wall around every occlusion shadow.
    """
    if margin is None:
        margin = 2.0 * float(np.mean(spacing))
    centres = [origin[i] + np.arange(resolution) * spacing[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*centres, indexing="ij")
    points = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    seen = np.zeros(points.shape[0], dtype=bool)
    for kf in frames:
        R = kf.pose[:3, :3]
        t = kf.pose[:3, 3]
        cam = (points - t) @ R  # camera-frame coordinates
        z = cam[:, 2]
        ok = z > 1e-6
        intr = kf.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.round(intr.fx * cam[:, 0] / z + intr.cx).astype(np.int64)
            v = np.round(intr.fy * cam[:, 1] / z + intr.cy).astype(np.int64)
        ok &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        idx = np.nonzero(ok)[0]
        measured = kf.depth[v[idx], u[idx]]
        vis = (measured > 0) & (z[idx] <= measured + margin)
        seen[idx[vis]] = True
        if seen.all():
            break
    return seen.reshape(resolution, resolution, resolution)


def mesh_from_occupancy(
    occ: np.ndarray,
    origin: np.ndarray,
    spacing: np.ndarray,
    level: float = 0.5,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Marching cubes on a voxel-centre occupancy grid -> (vertices, faces).

    With ``mask``, cubes touching masked-out voxels produce no surface at
    all; the occupancy there never contributes invented geometry.
    """
    known = occ if mask is None else occ[mask]
    if known.size == 0:
        raise ValueError("no observed voxels to extract a surface from")
    lo, hi = float(known.min()), float(known.max())
    if not (lo < level < hi):
        raise ValueError(
            f"iso level {level} outside the occupancy range [{lo:.3f}, {hi:.3f}]"
        )
    verts, faces, _, _ = measure.marching_cubes(
        occ, level=level, spacing=tuple(spacing), mask=mask
    )
    return verts + np.asarray(origin), faces.astype(np.int64)


def extract_mesh(
    params: FieldParams,
    registry: ClassRegistry | None = None,
    tree: LabelTree | None = None,
    resolution: int = DEFAULT_RESOLUTION,
    level: float = 0.5,
    frames: list | None = None,
) -> LabelledMesh:
    """Marching cubes over the opacity grid, vertices labelled by the field.

    Pass the keyframes as ``frames`` to restrict extraction to observed
    space; unobserved voxels then produce no geometry at all.
    """
    occ, origin, spacing = query_grid(params, resolution)
    mask = visibility_mask(frames, origin, spacing, resolution) if frames else None
    verts, faces = mesh_from_occupancy(occ, origin, spacing, level, mask=mask)
    labels, colours = label_vertices(params, verts, registry=registry, tree=tree)
    return LabelledMesh(
        vertices=verts.astype(np.float64),
        faces=faces,
        labels=labels,
        colours=colours,
    )


def write_ply(path, mesh: LabelledMesh) -> None:
    """ASCII PLY with per-vertex colour and integer label."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.vertices.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int label",
        f"element face {mesh.faces.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v, c, l in zip(mesh.vertices, mesh.colours, mesh.labels):
        lines.append(
            f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {int(c[0])} {int(c[1])} {int(c[2])} {int(l)}"
        )
    for f in mesh.faces:
        lines.append(f"3 {int(f[0])} {int(f[1])} {int(f[2])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path) -> LabelledMesh:
    """Read meshes produced by write_ply (not a general PLY parser)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if lines[0] != "ply" or "end_header" not in lines:
        raise ValueError("not an ASCII PLY file")
    n_vertex = n_face = 0
    for ln in lines:
        if ln.startswith("element vertex"):
            n_vertex = int(ln.split()[-1])
        elif ln.startswith("element face"):
            n_face = int(ln.split()[-1])
    start = lines.index("end_header") + 1
    verts = np.zeros((n_vertex, 3))
    colours = np.zeros((n_vertex, 3), dtype=np.uint8)
    labels = np.zeros(n_vertex, dtype=np.int32)
    for i in range(n_vertex):
        parts = lines[start + i].split()
        verts[i] = [float(x) for x in parts[:3]]
        colours[i] = [int(x) for x in parts[3:6]]
        labels[i] = int(parts[6])
    faces = np.zeros((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        parts = lines[start + n_vertex + i].split()
        if parts[0] != "3":
            raise ValueError("only triangle faces are supported")
        faces[i] = [int(x) for x in parts[1:4]]
    return LabelledMesh(vertices=verts, faces=faces, labels=labels, colours=colours)
