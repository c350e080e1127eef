"""Procedural desk-scale dataset: parametric colored solids, an analytic
first-hit reference renderer, area-weighted surface point extraction,
and camera pose sampling.

Objects are compositions of axis-aligned boxes and ellipsoids inside the
unit cube centered at the origin. Rendering is flat albedo: the nearest
primitive hit colors the pixel, misses are white, so a view-independent
radiance decoder can fit the views exactly. Everything is a pure
function of (seed, config).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .autodecoder import ObjectRecord
from .images import load_ppm, save_ppm
from .pointcloud import NeuralPointCloud, farthest_point_sampling, load_npcd, save_npcd
from .renderer import Camera, View, load_cameras, look_at_camera, save_cameras

WHITE = np.array([1.0, 1.0, 1.0])
CLASSES = ("chair-like", "car-like")
CUBE_HALF = 0.5


@dataclass(frozen=True)
class Primitive:
    kind: str                 # "box" | "ellipsoid"
    center: np.ndarray        # (3,)
    half_extents: np.ndarray  # box half sizes or ellipsoid radii, (3,)
    color: np.ndarray         # RGB in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "half_extents",
                           np.asarray(self.half_extents, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if self.kind not in ("box", "ellipsoid"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.center.shape != (3,) or self.half_extents.shape != (3,) or self.color.shape != (3,):
            raise ValueError("primitive fields must be 3-vectors")
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("colors must lie in [0, 1]")

    def surface_area(self) -> float:
        h = self.half_extents
        if self.kind == "box":
            return float(8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]))
        # Thomsen's approximation for the ellipsoid surface area
        p = 1.6075
        a, b, c = h
        return float(4.0 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0)
                     ** (1.0 / p))

    def to_json(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(),
                "half_extents": self.half_extents.tolist(), "color": self.color.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Primitive":
        return cls(obj["kind"], obj["center"], obj["half_extents"], obj["color"])


@dataclass(frozen=True)
class ToyObject:
    object_id: str
    primitives: tuple

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("object needs at least one primitive")
        for p in self.primitives:
            if np.any(np.abs(p.center) + p.half_extents > CUBE_HALF + 1e-12):
                raise ValueError(
                    f"primitive exceeds the unit cube: center {p.center}, "
                    f"half extents {p.half_extents}"
                )

    def circumscribed_bound(self) -> float:
        """Radius of an origin-centered sphere containing the object."""
        return max(float(np.linalg.norm(p.center) + np.linalg.norm(p.half_extents))
                   for p in self.primitives)

    def to_json(self) -> dict:
        return {"object_id": self.object_id,
                "primitives": [p.to_json() for p in self.primitives]}

    @classmethod
    def from_json(cls, obj: dict) -> "ToyObject":
        return cls(obj["object_id"], [Primitive.from_json(p) for p in obj["primitives"]])


# ---------------------------------------------------------------------------
# object generators

def _chair_like(g: np.random.Generator, object_id: str) -> ToyObject:
    # thin features stay at least ~1.5 pixel footprints wide at the
    # shipped 32x32 resolution so silhouettes contain projected points
    seat_half = np.array([g.uniform(0.18, 0.26), g.uniform(0.18, 0.26), g.uniform(0.042, 0.06)])
    seat_z = g.uniform(-0.06, 0.02)
    leg_w = g.uniform(0.042, 0.055)
    back_h = g.uniform(0.14, 0.2)
    back_t = g.uniform(0.042, 0.055)
    seat_color, leg_color, back_color = g.uniform(0.1, 0.9, (3, 3))

    prims = [Primitive("box", [0.0, 0.0, seat_z], seat_half, seat_color)]
    floor_z = -0.45
    leg_top = seat_z - seat_half[2]
    leg_half_z = (leg_top - floor_z) / 2.0
    for sx in (-1, 1):
        for sy in (-1, 1):
            center = [sx * (seat_half[0] - leg_w), sy * (seat_half[1] - leg_w),
                      floor_z + leg_half_z]
            prims.append(Primitive("box", center, [leg_w, leg_w, leg_half_z], leg_color))
    back_z = seat_z + seat_half[2] + back_h
    prims.append(Primitive("box", [0.0, -(seat_half[1] - back_t), back_z],
                           [seat_half[0], back_t, back_h], back_color))
    return ToyObject(object_id, prims)


def _car_like(g: np.random.Generator, object_id: str) -> ToyObject:
    body_half = np.array([g.uniform(0.3, 0.38), g.uniform(0.13, 0.17), g.uniform(0.07, 0.1)])
    body_z = g.uniform(-0.18, -0.12)
    cabin_half = np.array([g.uniform(0.12, 0.17), body_half[1] * g.uniform(0.7, 0.85),
                           g.uniform(0.05, 0.08)])
    wheel_r = g.uniform(0.055, 0.075)
    wheel_t = g.uniform(0.042, 0.055)
    body_color, cabin_color, wheel_color = g.uniform(0.1, 0.9, (3, 3))

    prims = [Primitive("box", [0.0, 0.0, body_z], body_half, body_color)]
    cabin_z = body_z + body_half[2] + cabin_half[2]
    prims.append(Primitive("box", [-0.05, 0.0, cabin_z], cabin_half, cabin_color))
    wheel_z = body_z - body_half[2]
    for sx in (-1, 1):
        for sy in (-1, 1):
            center = [sx * body_half[0] * 0.6, sy * body_half[1], wheel_z]
            prims.append(Primitive("ellipsoid", center, [wheel_r, wheel_t, wheel_r],
                                   wheel_color))
    return ToyObject(object_id, prims)


def generate_toy_object(seed: int, class_spec: str) -> ToyObject:
    """Deterministic randomized object of the given class."""
    g = rngmod.stream(seed, "toy-object", class_spec)
    object_id = f"{class_spec}-{seed:05d}"
    if class_spec == "chair-like":
        return _chair_like(g, object_id)
    if class_spec == "car-like":
        return _car_like(g, object_id)
    raise ValueError(f"unknown class spec {class_spec!r}; choose from {CLASSES}")


# ---------------------------------------------------------------------------
# analytic rendering

def _ray_box_t(origins, dirs, lo, hi):
    """First-hit parameters by the slab method; misses are +inf."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    # rays parallel to a slab with the origin on its boundary: 0/0
    tnear = np.where(np.isnan(tnear), -np.inf, tnear)
    tfar = np.where(np.isnan(tfar), np.inf, tfar)
    enter = tnear.max(axis=-1)
    exit_ = tfar.min(axis=-1)
    hit = (enter <= exit_) & (enter >= 0)
    return np.where(hit, enter, np.inf)


def _ray_ellipsoid_t(origins, dirs, center, radii):
    """Smallest non-negative root of the scaled unit-sphere quadratic."""
    q = (origins - center) / radii
    u = dirs / radii
    a = np.sum(u * u, axis=-1)
    b = 2.0 * np.sum(q * u, axis=-1)
    c = np.sum(q * q, axis=-1) - 1.0
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore"):
        root = (-b - np.sqrt(disc)) / (2.0 * a)
    hit = (disc >= 0) & (root >= 0)
    return np.where(hit, root, np.inf)


def reference_render(obj: ToyObject, camera: Camera) -> np.ndarray:
    """Flat-albedo first-hit image (H, W, 3); misses are white."""
    from .renderer import generate_rays

    origins, dirs = generate_rays(camera)
    best_t = np.full(origins.shape[0], np.inf)
    color = np.tile(WHITE, (origins.shape[0], 1))
    for prim in obj.primitives:
        if prim.kind == "box":
            t = _ray_box_t(origins, dirs, prim.center - prim.half_extents,
                           prim.center + prim.half_extents)
        else:
            t = _ray_ellipsoid_t(origins, dirs, prim.center, prim.half_extents)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        color[closer] = prim.color
    return color.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# surface sampling

def _sample_box_surface(g: np.random.Generator, prim: Primitive, n: int) -> np.ndarray:
    h = prim.half_extents
    face_areas = 4.0 * np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2],
                                 h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    faces = g.choice(6, size=n, p=face_areas / face_areas.sum())
    pts = g.uniform(-1.0, 1.0, (n, 3)) * h
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * h[axis]
    return pts + prim.center


def _sample_ellipsoid_surface(g: np.random.Generator, prim: Primitive, n: int) -> np.ndarray:
    """Area-uniform samples by rejection: directions are drawn uniformly
    on the sphere and accepted proportionally to the local area
    distortion of the scaling map."""
    r = prim.half_extents
    weights_max = float(max(r[1] * r[2], r[0] * r[2], r[0] * r[1]))
    out = np.empty((0, 3))
    while out.shape[0] < n:
        block = max(2 * (n - out.shape[0]), 64)
        u = g.standard_normal((block, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        distortion = np.sqrt((r[1] * r[2] * u[:, 0]) ** 2
                             + (r[0] * r[2] * u[:, 1]) ** 2
                             + (r[0] * r[1] * u[:, 2]) ** 2)
        keep = g.uniform(0, weights_max, block) < distortion
        out = np.concatenate([out, u[keep] * r], axis=0)
    return out[:n] + prim.center


def sample_surface_points(obj: ToyObject, n: int, g: np.random.Generator) -> np.ndarray:
    """n points on the object surface, area-weighted across primitives."""
    areas = np.array([p.surface_area() for p in obj.primitives])
    assignment = g.choice(len(obj.primitives), size=n, p=areas / areas.sum())
    counts = np.bincount(assignment, minlength=len(obj.primitives))
    chunks = []
    for prim, count in zip(obj.primitives, counts):
        if count == 0:
            continue
        if prim.kind == "box":
            chunks.append(_sample_box_surface(g, prim, int(count)))
        else:
            chunks.append(_sample_ellipsoid_surface(g, prim, int(count)))
    return np.concatenate(chunks, axis=0)


def surface_residual(obj: ToyObject, points: np.ndarray) -> np.ndarray:
    """Per-point distance-like membership residual: zero iff the point
    lies on some primitive surface (boxes: exact distance; ellipsoids:
    implicit-function residual)."""
    points = np.asarray(points, dtype=np.float64)
    best = np.full(points.shape[0], np.inf)
    for prim in obj.primitives:
        q = points - prim.center
        if prim.kind == "box":
            outside = np.abs(q) - prim.half_extents
            res = np.abs(np.linalg.norm(np.maximum(outside, 0.0), axis=1)
                         + np.minimum(outside.max(axis=1), 0.0))
        else:
            res = np.abs(np.linalg.norm(q / prim.half_extents, axis=1) - 1.0)
        best = np.minimum(best, res)
    return best


def extract_points(obj: ToyObject, n_dense: int, m: int, seed: int) -> np.ndarray:
    """Dense area-weighted surface sampling followed by farthest point
    subsampling to m points."""
    if m > n_dense:
        raise ValueError(f"cannot subsample {m} points from {n_dense}")
    g = rngmod.stream(seed, "extract-points", obj.object_id)
    dense = sample_surface_points(obj, n_dense, g)
    picked = farthest_point_sampling(dense, m)
    return dense[picked]


# ---------------------------------------------------------------------------
# camera poses

def near_far(radius: float, bound: float) -> tuple:
    """Near/far planes from the camera distance and the object's
    circumscribed bound, padded by 0.1 and rounded outward to 0.1."""
    # the 1e-9 nudge keeps exact-decimal inputs on the grid despite
    # binary float noise (2.0 - 0.3 - 0.1 = 1.5999...)
    near = np.floor((radius - bound - 0.1) * 10.0 + 1e-9) / 10.0
    far = np.ceil((radius + bound + 0.1) * 10.0 - 1e-9) / 10.0
    return max(float(near), 0.1), float(far)


def _fitting_focal(image_size: int, radius: float, bound: float) -> float:
    # tangent rays to the bounding sphere land at 85% of the half frame,
    # so every surface point projects inside the image from any direction
    return 0.85 * (image_size / 2.0) * np.sqrt(radius**2 - bound**2) / bound


def train_camera_poses(n: int, radius: float, bound: float, image_size: int,
                       seed: int) -> list:
    """n cameras at uniformly random directions on the sphere of the given
    radius, all looking at the origin."""
    if radius <= bound:
        raise ValueError(f"camera radius {radius} must exceed object bound {bound}")
    g = rngmod.stream(seed, "train-poses")
    near, far = near_far(radius, bound)
    focal = _fitting_focal(image_size, radius, bound)
    cams = []
    while len(cams) < n:
        v = g.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm < 1e-6:
            continue
        cams.append(look_at_camera(radius * v / norm, focal, image_size, image_size,
                                   near, far))
    return cams


def sample_camera_poses(n: int, radius: float, bound: float, image_size: int,
                        seed: int = None, mode: str = "train") -> list:
    """Origin-facing poses at the given radius: randomized sphere
    directions ("train", needs a seed) or a deterministic hemisphere
    spiral ("test")."""
    if mode == "train":
        if seed is None:
            raise ValueError("train pose sampling needs a seed")
        return train_camera_poses(n, radius, bound, image_size, seed)
    if mode == "test":
        return spiral_camera_poses(n, radius, bound, image_size)
    raise ValueError(f"unknown pose mode {mode!r}")


def spiral_camera_poses(n: int, radius: float, bound: float, image_size: int) -> list:
    """Deterministic spiral over the upper hemisphere (golden-angle
    azimuth, elevations between 0.2 and 0.8 of the pole height)."""
    if radius <= bound:
        raise ValueError(f"camera radius {radius} must exceed object bound {bound}")
    near, far = near_far(radius, bound)
    focal = _fitting_focal(image_size, radius, bound)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for k in range(n):
        z = 0.2 + 0.6 * (k + 0.5) / n
        rho = np.sqrt(1.0 - z * z)
        phi = k * golden
        direction = np.array([rho * np.cos(phi), rho * np.sin(phi), z])
        cams.append(look_at_camera(radius * direction, focal, image_size, image_size,
                                   near, far))
    return cams


# ---------------------------------------------------------------------------
# dataset build / load

MANIFEST_NAME = "manifest.json"


def build_dataset(out_dir, n_objects: int, views_per_object: int, m_points: int,
                  image_size: int, seed: int, test_views_per_object: int = 0,
                  classes=CLASSES, n_dense: int = 4096, radius: float = 1.3) -> dict:
    """Generate objects, poses, reference views, and point clouds, and
    write the on-disk layout:

        objects/<id>/points.npcd
        objects/<id>/views/<k>.ppm
        objects/<id>/cameras.json
        manifest.json

    Returns object records holding the training views plus the manifest.
    The result is a pure function of the arguments.
    """
    if min(n_objects, views_per_object, m_points, image_size) < 1:
        raise ValueError("dataset counts must be positive")
    out_dir = os.fspath(out_dir)
    records = []
    manifest = {
        "format": "toy-dataset-v1",
        "seed": seed,
        "config": {
            "n_objects": n_objects, "views_per_object": views_per_object,
            "test_views_per_object": test_views_per_object, "m_points": m_points,
            "image_size": image_size, "n_dense": n_dense, "radius": radius,
            "classes": list(classes),
        },
        "object_ids": [],
        "object_classes": {},
        "object_seeds": {},
        "view_splits": {
            "train": list(range(views_per_object)),
            "test": list(range(views_per_object,
                               views_per_object + test_views_per_object)),
        },
        "splits": {"train": [], "test": []},
    }
    for i in range(n_objects):
        class_spec = classes[i % len(classes)]
        object_seed = int(rngmod.stream(seed, "dataset-object-seed", i).integers(2**31))
        obj = generate_toy_object(object_seed, class_spec)
        object_id = f"{class_spec}-{i:03d}"
        obj = ToyObject(object_id, obj.primitives)

        bound = obj.circumscribed_bound()
        cams = train_camera_poses(views_per_object, radius, bound, image_size,
                                  seed=object_seed)
        cams += spiral_camera_poses(test_views_per_object, radius, bound, image_size)
        positions = extract_points(obj, n_dense, m_points, seed=object_seed)

        obj_dir = os.path.join(out_dir, "objects", object_id)
        views_dir = os.path.join(obj_dir, "views")
        os.makedirs(views_dir, exist_ok=True)
        cloud_path = os.path.join(obj_dir, "points.npcd")
        save_npcd(NeuralPointCloud(positions, np.zeros((m_points, 1))), cloud_path)
        save_cameras(cams, os.path.join(obj_dir, "cameras.json"))
        with open(os.path.join(obj_dir, "object.json"), "w") as f:
            json.dump(obj.to_json(), f, indent=2, sort_keys=True)
        for k, cam in enumerate(cams):
            save_ppm(reference_render(obj, cam), os.path.join(views_dir, f"{k:03d}.ppm"))

        # records are reloaded from the files just written, so the return
        # value is bitwise identical to a later load_dataset call
        train_views = [View(cam, load_ppm(os.path.join(views_dir, f"{k:03d}.ppm")))
                       for k, cam in enumerate(cams[:views_per_object])]
        records.append(ObjectRecord(object_id, load_npcd(cloud_path), train_views))
        manifest["object_ids"].append(object_id)
        manifest["object_classes"][object_id] = class_spec
        manifest["object_seeds"][object_id] = object_seed
        manifest["splits"]["train"].append(object_id)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return records, manifest


def load_manifest(root) -> dict:
    with open(os.path.join(os.fspath(root), MANIFEST_NAME)) as f:
        return json.load(f)


def load_toy_object(root, object_id: str) -> ToyObject:
    obj_dir = os.path.join(os.fspath(root), "objects", object_id)
    with open(os.path.join(obj_dir, "object.json")) as f:
        return ToyObject.from_json(json.load(f))


def load_dataset(root, view_split: str = "train"):
    """Rebuild object records from the on-disk layout.

    view_split selects which stored views each record carries: "train",
    "test", or "all".
    """
    root = os.fspath(root)
    manifest = load_manifest(root)
    if view_split == "all":
        indices = manifest["view_splits"]["train"] + manifest["view_splits"]["test"]
    else:
        indices = manifest["view_splits"][view_split]
    records = []
    for object_id in manifest["object_ids"]:
        obj_dir = os.path.join(root, "objects", object_id)
        cloud = load_npcd(os.path.join(obj_dir, "points.npcd"))
        cams = load_cameras(os.path.join(obj_dir, "cameras.json"))
        views = [View(cams[k], load_ppm(os.path.join(obj_dir, "views", f"{k:03d}.ppm")))
                 for k in indices]
        records.append(ObjectRecord(object_id, cloud, views))
    return records, manifest
