"""Analytic RGB-D scene generator with exact ground-truth labels.

World convention matches the camera frame: x right, y down (gravity is +y),
z forward, right-handed. The floor is the plane y = 0 and objects rest on
it at negative y; cameras sit above the floor (negative y) looking inward.
Views are rendered by closed-form ray casting with Lambertian shading, so
every pixel has exact depth and a class id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .keyframes import Annotation, Keyframe
from .rendering import CameraIntrinsics, pixels_to_rays

AMBIENT = 0.35
DIFFUSE = 0.65
LIGHT_DIR = np.array([0.3, 0.9, 0.2]) / np.linalg.norm([0.3, 0.9, 0.2])


@dataclass(frozen=True)
class Plane:
    """Infinite plane through ``point`` with outward ``normal``."""

    point: tuple
    normal: tuple

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        n = np.asarray(self.normal, dtype=np.float64)
        p0 = np.asarray(self.point, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - origins) @ n) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        normals = np.broadcast_to(n, dirs.shape)
        return t, normals


@dataclass(frozen=True)
class Sphere:
    centre: tuple
    radius: float

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        c = np.asarray(self.centre, dtype=np.float64)
        oc = origins - c
        b = np.sum(oc * dirs, axis=-1)
        q = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - q
        sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sqrt_disc
        t1 = -b + sqrt_disc
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where((disc > 0) & (t > 1e-9), t, np.inf)
        with np.errstate(all="ignore"):
            hits = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
            normals = (hits - c) / self.radius
        return t, normals


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi]."""

    lo: tuple
    hi: tuple

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo - origins) / dirs
            t_hi = (hi - origins) / dirs
        t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
        t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
        hit = (t_near <= t_far) & (t_far > 1e-9)
        t = np.where(hit & (t_near > 1e-9), t_near, np.inf)
        # Outward normal: the axis whose face the hit point lies on. Rays
        # that miss get a placeholder normal that the caller never selects.
        with np.errstate(all="ignore"):
            hits = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
            centre = (lo + hi) / 2
            half = (hi - lo) / 2
            rel = (hits - centre) / half
        axis = np.argmax(np.abs(rel), axis=-1)
        normals = np.zeros_like(dirs)
        flat_n = normals.reshape(-1, 3)
        flat_rel = rel.reshape(-1, 3)
        flat_axis = axis.reshape(-1)
        rows = np.arange(flat_n.shape[0])
        flat_n[rows, flat_axis] = np.sign(flat_rel[rows, flat_axis])
        return t, flat_n.reshape(dirs.shape)


@dataclass(frozen=True)
class SceneObject:
    name: str
    shape: object  # Plane, Sphere or Box
    albedo: tuple  # linear RGB in [0, 1]


@dataclass
class SyntheticScene:
    objects: list
    bound_min: tuple
    bound_max: tuple
    light_dir: np.ndarray = field(default_factory=lambda: LIGHT_DIR.copy())

    @property
    def class_names(self) -> list:
        """Unique object names in first-appearance order; the label space.

        Several objects may share a name (e.g. every enclosure plane is
        "wall") and then share a class id.
        """
        seen = []
        for obj in self.objects:
            if obj.name not in seen:
                seen.append(obj.name)
        return seen

    @property
    def object_class_ids(self) -> np.ndarray:
        names = self.class_names
        return np.array([names.index(obj.name) for obj in self.objects], dtype=np.int32)

    def as_dict(self) -> dict:
        def shape_dict(s):
            if isinstance(s, Plane):
                return {"kind": "plane", "point": list(s.point), "normal": list(s.normal)}
            if isinstance(s, Sphere):
                return {"kind": "sphere", "centre": list(s.centre), "radius": s.radius}
            return {"kind": "box", "lo": list(s.lo), "hi": list(s.hi)}

        return {
            "bound_min": list(self.bound_min),
            "bound_max": list(self.bound_max),
            "light_dir": self.light_dir.tolist(),
            "objects": [
                {"name": o.name, "albedo": list(o.albedo), "shape": shape_dict(o.shape)}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        shapes = {"plane": Plane, "sphere": Sphere, "box": Box}
        objects = []
        for o in d["objects"]:
            s = o["shape"]
            kind = s["kind"]
            if kind == "plane":
                shape = Plane(point=tuple(s["point"]), normal=tuple(s["normal"]))
            elif kind == "sphere":
                shape = Sphere(centre=tuple(s["centre"]), radius=float(s["radius"]))
            elif kind == "box":
                shape = Box(lo=tuple(s["lo"]), hi=tuple(s["hi"]))
            else:
                raise ValueError(f"unknown shape kind {kind!r}")
            objects.append(SceneObject(name=o["name"], shape=shape, albedo=tuple(o["albedo"])))
        return cls(
            objects=objects,
            bound_min=tuple(d["bound_min"]),
            bound_max=tuple(d["bound_max"]),
            light_dir=np.asarray(d["light_dir"], dtype=np.float64),
        )


@dataclass
class SyntheticView:
    rgb: np.ndarray  # (H, W, 3) float32
    depth: np.ndarray  # (H, W) float32, 0 where nothing within range
    labels: np.ndarray  # (H, W) int32, -1 where nothing within range


def look_at(eye, target) -> np.ndarray:
    """World-from-camera pose with the camera's y axis along gravity (+y)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    g = np.array([0.0, 1.0, 0.0])
    y = g - (g @ f) * f
    norm = np.linalg.norm(y)
    if norm < 1e-6:
        # Looking straight up or down: fall back to world z for "down".
        y = np.array([0.0, 0.0, 1.0]) - f[2] * f
        norm = np.linalg.norm(y)
    y = y / norm
    x = np.cross(y, f)
    pose = np.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = f
    pose[:3, 3] = eye
    return pose


def first_hit(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray, far: float):
    """Closest intersection along each ray: (t, object index, normal)."""
    best_t = np.full(origins.shape[:-1], np.inf)
    best_idx = np.full(origins.shape[:-1], -1, dtype=np.int32)
    best_n = np.zeros_like(dirs)
    for idx, obj in enumerate(scene.objects):
        t, normals = obj.shape.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, idx, best_idx)
        best_n = np.where(closer[..., None], normals, best_n)
    out_of_range = ~np.isfinite(best_t) | (best_t > far)
    best_t = np.where(out_of_range, 0.0, best_t)
    best_idx = np.where(out_of_range, -1, best_idx)
    return best_t, best_idx, best_n


def object_to_class(scene: SyntheticScene, idx: np.ndarray) -> np.ndarray:
    """Map object indices (misses stay -1) to class ids."""
    lut = np.concatenate([[-1], scene.object_class_ids])
    return lut[idx + 1]


def shade(scene: SyntheticScene, idx: np.ndarray, normals: np.ndarray) -> np.ndarray:
    albedos = np.array([obj.albedo for obj in scene.objects], dtype=np.float64)
    lambert = np.maximum(0.0, -(normals @ scene.light_dir))
    shading = AMBIENT + DIFFUSE * lambert
    base = albedos[np.maximum(idx, 0)]
    rgb = base * shading[..., None]
    rgb[idx < 0] = 0.0
    return np.clip(rgb, 0.0, 1.0)


def render_synthetic(
    scene: SyntheticScene,
    intrinsics: CameraIntrinsics,
    pose: np.ndarray,
    far: float = 6.0,
) -> SyntheticView:
    us = np.arange(intrinsics.width)
    vs = np.arange(intrinsics.height)
    uu, vv = np.meshgrid(us, vs)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=-1).astype(np.float64)
    origins, dirs = pixels_to_rays(uv, intrinsics, pose)
    t, idx, normals = first_hit(scene, origins, dirs, far)
    rgb = shade(scene, idx, normals)
    labels = object_to_class(scene, idx)
    h, w = intrinsics.height, intrinsics.width
    return SyntheticView(
        rgb=rgb.reshape(h, w, 3).astype(np.float32),
        depth=t.reshape(h, w).astype(np.float32),
        labels=labels.reshape(h, w).astype(np.int32),
    )


DEMO_FAR = 6.5


def build_demo_room() -> SyntheticScene:
    """Four classes: floor, wall (the whole enclosure), box and sphere.

    The room is closed (back wall plus ceiling, sides and a plane behind
    the cameras, all labelled "wall") so every camera ray hits a surface
    and every pixel carries valid depth.
    """
    wall_albedo = (0.55, 0.62, 0.75)
    objects = [
        SceneObject("floor", Plane(point=(0, 0, 0), normal=(0, -1, 0)), albedo=(0.75, 0.70, 0.62)),
        SceneObject("wall", Plane(point=(0, 0, 4.2), normal=(0, 0, -1)), albedo=wall_albedo),
        SceneObject("wall", Plane(point=(0, -2.2, 0), normal=(0, 1, 0)), albedo=wall_albedo),
        SceneObject("wall", Plane(point=(-3.0, 0, 0), normal=(1, 0, 0)), albedo=wall_albedo),
        SceneObject("wall", Plane(point=(3.0, 0, 0), normal=(-1, 0, 0)), albedo=wall_albedo),
        SceneObject("wall", Plane(point=(0, 0, -1.2), normal=(0, 0, 1)), albedo=wall_albedo),
        SceneObject(
            "box", Box(lo=(-1.15, -0.8, 2.0), hi=(-0.25, 0.0, 2.9)), albedo=(0.20, 0.45, 0.80)
        ),
        SceneObject("sphere", Sphere(centre=(0.75, -0.4, 2.3), radius=0.4), albedo=(0.85, 0.28, 0.22)),
    ]
    return SyntheticScene(
        objects=objects,
        bound_min=(-3.1, -2.3, -1.3),
        bound_max=(3.1, 0.1, 4.3),
    )


def build_cluttered_room() -> SyntheticScene:
    """The demo room plus five small objects, nine classes in all.

    Small objects cover a percent or two of the pixels each, so blanket
    click coverage is expensive and query placement starts to matter.
    """
    scene = build_demo_room()
    extras = [
        SceneObject(
            "ball_a", Sphere(centre=(-0.1, -0.18, 1.75), radius=0.18), albedo=(0.95, 0.75, 0.10)
        ),
        SceneObject(
            "ball_b", Sphere(centre=(1.55, -0.22, 2.9), radius=0.22), albedo=(0.20, 0.75, 0.35)
        ),
        SceneObject(
            "crate_a", Box(lo=(0.15, -0.35, 2.85), hi=(0.55, 0.0, 3.25)), albedo=(0.70, 0.30, 0.75)
        ),
        SceneObject(
            "crate_b", Box(lo=(-1.9, -0.45, 2.6), hi=(-1.45, 0.0, 3.05)), albedo=(0.90, 0.55, 0.25)
        ),
        SceneObject(
            "pillar", Box(lo=(1.05, -1.1, 3.3), hi=(1.35, 0.0, 3.6)), albedo=(0.25, 0.70, 0.75)
        ),
    ]
    return SyntheticScene(
        objects=scene.objects + extras,
        bound_min=scene.bound_min,
        bound_max=scene.bound_max,
    )


def make_arc_poses(n_frames: int, phase: float = 0.0) -> list:
    """Camera arc above the floor, all looking at the room centre.

    ``phase`` shifts the arc angles so a second call yields held-out views
    between the training ones.
    """
    target = np.array([0.0, -0.35, 2.3])
    poses = []
    angles = np.linspace(-0.62, 0.62, n_frames) + phase
    for a in angles:
        eye = np.array([2.1 * np.sin(a), -1.35, 2.3 - 2.1 * np.cos(a)])
        poses.append(look_at(eye, target))
    return poses


def default_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    # 64-degree horizontal FOV keeps the demo views on the room's front
    # surfaces, where click supervision actually lands.
    return CameraIntrinsics(
        fx=0.8 * width, fy=0.8 * width, cx=width / 2 - 0.5, cy=height / 2 - 0.5,
        width=width, height=height,
    )


def make_keyframes(
    scene: SyntheticScene,
    poses: list,
    intrinsics: CameraIntrinsics,
    far: float = 6.0,
    first_id: int = 0,
) -> tuple[list, list]:
    """Render each pose; returns (keyframes, views) with aligned indices."""
    frames, views = [], []
    for i, pose in enumerate(poses):
        view = render_synthetic(scene, intrinsics, pose, far)
        frames.append(
            Keyframe(
                frame_id=first_id + i,
                rgb=view.rgb,
                depth=view.depth,
                pose=pose,
                intrinsics=intrinsics,
            )
        )
        views.append(view)
    return frames, views


def most_interior_pixel(mask: np.ndarray) -> tuple[int, int] | None:
    """(u, v) of the pixel deepest inside the mask, or None if empty."""
    if not mask.any():
        return None
    dist = ndimage.distance_transform_edt(mask)
    v, u = np.unravel_index(int(np.argmax(dist)), mask.shape)
    return int(u), int(v)


def centroid_clicks(
    views: list, class_ids: list, round_index: int
) -> list:
    """One click per class for a scripted annotation round.

    Round r reads the ground truth of frame (2r mod n_frames) and clicks the
    most interior pixel of each class mask, mimicking a careful user who
    labels object centres on a fresh view each round.
    """
    frame_idx = (2 * round_index) % len(views)
    view = views[frame_idx]
    clicks = []
    for cid in class_ids:
        hit = most_interior_pixel(view.labels == cid)
        if hit is None:
            continue
        u, v = hit
        clicks.append(Annotation(frame_id=frame_idx, u=u, v=v, label=int(cid), source="user"))
    return clicks


def error_guided_click(
    views: list, predicted: list, labelled: set
) -> Annotation | None:
    """Click the most interior pixel of the largest mislabelled region.

    ``predicted`` holds per-frame class-id maps aligned with ``views``;
    already-labelled pixels are skipped so repeated calls spread out.
    """
    best = None
    best_count = 0
    for f_idx, (view, pred) in enumerate(zip(views, predicted)):
        wrong = (pred != view.labels) & (view.labels >= 0)
        for cid in np.unique(view.labels[view.labels >= 0]):
            mask = wrong & (view.labels == cid)
            count = int(mask.sum())
            if count > best_count:
                hit = most_interior_pixel(mask)
                if hit is None or (f_idx, hit[0], hit[1]) in labelled:
                    continue
                best_count = count
                best = Annotation(
                    frame_id=f_idx, u=hit[0], v=hit[1], label=int(cid), source="user"
                )
    return best
