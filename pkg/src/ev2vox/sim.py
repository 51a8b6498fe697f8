"""Synthetic data generation: orbit camera, raycast renderer, event synthesis.

The world is desk scale: scene geometry lives inside the unit-diameter
region around the origin and the camera orbits it from a few meters out,
descending from z = +2 to z = -2 while the orbit radius swells from 4 to
6 and back. Rendering is a plain Lambertian raycaster over axis-aligned
analytic primitives (or a normalized triangle mesh) against a white
background; the fixed directional lights all lie in the x-z plane so a
scene mirrored in that plane photographs as the mirrored image.

Event synthesis follows the usual contrast-threshold model: per pixel,
log intensity is tracked against a reference level that advances by the
threshold C each time an event fires, with event timestamps linearly
interpolated inside each inter-frame interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import voxel
from .errors import (
    ConfigError,
    ContrastNonPositive,
    FrameDimMismatch,
    InvalidSceneSpec,
    TimeOutOfRange,
)
from .events import EventStream, from_arrays

DEFAULT_CONTRAST = 0.2
LOG_EPS = 1e-3

# direction (unit), weight -- all with zero y-component, see module docstring
_LIGHTS = (
    (np.array([0.0, 0.0, 1.0]), 0.45),
    (np.array([0.0, 0.0, -1.0]), 0.45),
    (np.array([1.0, 0.0, 0.5]) / np.linalg.norm([1.0, 0.0, 0.5]), 0.35),
)


@dataclass(frozen=True)
class TrajectoryConfig:
    duration: float = 0.5
    fps: float = 240.0
    z_start: float = 2.0
    z_end: float = -2.0
    r_min: float = 4.0
    r_max: float = 6.0
    revolutions: float = 1.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        if self.r_min > self.r_max:
            raise ConfigError(f"r_min {self.r_min} exceeds r_max {self.r_max}")
        if self.z_start == 0:
            raise ConfigError("z_start of 0 leaves the radius profile undefined")


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length: float = 80.0  # mm
    sensor_width: float = 36.0  # mm
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.focal_length <= 0 or self.sensor_width <= 0:
            raise ConfigError("focal length and sensor width must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"resolution {self.width}x{self.height} is not positive")

    @property
    def f_pix(self) -> float:
        return self.focal_length / self.sensor_width * self.width


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: float = 0.9


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    albedo: float = 0.9


@dataclass(frozen=True)
class Cylinder:
    """Axis-aligned cylinder: ``axis`` is 0, 1, or 2 (x, y, z)."""

    center: tuple[float, float, float]
    axis: int
    radius: float
    half_height: float
    albedo: float = 0.9


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    mesh: voxel.TriMesh | None = None
    mesh_albedo: float = 0.9


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray


def look_at_pose(position) -> Pose:
    """Orthonormal frame at ``position`` looking at the origin, up derived
    from world z."""
    position = np.asarray(position, dtype=np.float64)
    forward = -position / np.linalg.norm(position)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ConfigError("camera position on the z-axis has no stable look-at frame")
    right = right / norm
    up = np.cross(right, forward)
    return Pose(position, forward, right, up)


def camera_pose(cfg: TrajectoryConfig, t: float) -> Pose:
    """Orbit position at time t with a look-at-origin orientation.

    z falls linearly from z_start to z_end; the radius grows from r_min
    to r_max as |z| shrinks to zero and returns; the azimuth sweeps
    2*pi*revolutions over the full duration.
    """
    if not (0.0 <= t <= cfg.duration):
        raise TimeOutOfRange(f"t={t} outside [0, {cfg.duration}]")
    frac = t / cfg.duration
    z = cfg.z_start + (cfg.z_end - cfg.z_start) * frac
    r = cfg.r_min + (cfg.r_max - cfg.r_min) * (1.0 - abs(z) / abs(cfg.z_start))
    theta = 2.0 * math.pi * cfg.revolutions * frac
    return look_at_pose([r * math.cos(theta), r * math.sin(theta), z])


def _sphere_hits(o, d, center, radius):
    """Smallest positive ray parameter per ray, inf where missed."""
    oc = o - center
    b = d @ oc
    # d is unit length, so the quadratic's leading coefficient is 1
    c = oc @ oc - radius * radius
    disc = b * b - c
    t = np.full(d.shape[0], np.inf)
    ok = disc >= 0
    root = np.sqrt(disc[ok])
    t0 = -b[ok] - root
    t1 = -b[ok] + root
    best = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t[ok] = best
    return t


def _triangle_hits(o, d, vertices, triangles, chunk=512):
    """Nearest triangle intersection per ray (Moller-Trumbore), plus the
    index of the winning triangle; inf / -1 where missed."""
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    eps = 1e-12
    rows = np.arange(n)
    for lo in range(0, len(triangles), chunk):
        tri = triangles[lo:lo + chunk]
        a = vertices[tri[:, 0]]
        e1 = vertices[tri[:, 1]] - a
        e2 = vertices[tri[:, 2]] - a
        # the ray origin is shared, so s and q depend on the triangle only
        s = o[None, :] - a
        q = np.cross(s, e1)
        p = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("rtk,tk->rt", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            u = np.einsum("rtk,tk->rt", p, s) * inv
            v = (d @ q.T) * inv
            t = np.einsum("tk,tk->t", q, e2)[None, :] * inv
        good = (
            (np.abs(det) > eps)
            & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
            & (t > 1e-9)
        )
        t = np.where(good, t, np.inf)
        idx = np.argmin(t, axis=1)
        tmin = t[rows, idx]
        closer = tmin < best_t
        best_t[closer] = tmin[closer]
        best_tri[closer] = lo + idx[closer]
    return best_t, best_tri


def _box_hits(o, d, center, half):
    lo = np.asarray(center) - np.asarray(half)
    hi = np.asarray(center) + np.asarray(half)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    near = np.nanmax(np.minimum(t1, t2), axis=1)
    far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (near <= far) & (far > 1e-9)
    t = np.where(hit, np.where(near > 1e-9, near, far), np.inf)
    axis = np.argmax(np.minimum(t1, t2), axis=1)
    return t, axis


def _cylinder_hits(o, d, cyl: Cylinder):
    a_ax = cyl.axis
    plane = [i for i in range(3) if i != a_ax]
    op = o[plane] - np.asarray(cyl.center)[plane]
    dp = d[:, plane]
    a = np.einsum("ij,ij->i", dp, dp)
    b = dp @ op
    c = op @ op - cyl.radius ** 2
    t = np.full(d.shape[0], np.inf)
    normal_kind = np.zeros(d.shape[0], dtype=np.int8)  # 0 side, +-1 caps

    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        ok = (disc >= 0) & (a > 0)
        root = np.sqrt(np.where(ok, disc, 0.0))
        for sign in (-1.0, 1.0):
            ts = (-b + sign * root) / a
            z_at = o[a_ax] + ts * d[:, a_ax]
            good = ok & (ts > 1e-9) & (np.abs(z_at - cyl.center[a_ax]) <= cyl.half_height) & (ts < t)
            t = np.where(good, ts, t)

        # caps
        for cap_sign in (-1.0, 1.0):
            plane_z = cyl.center[a_ax] + cap_sign * cyl.half_height
            ts = (plane_z - o[a_ax]) / d[:, a_ax]
            p = o[None, :] + ts[:, None] * d
            r2 = np.zeros(d.shape[0])
            for i in plane:
                r2 += (p[:, i] - cyl.center[i]) ** 2
            good = (ts > 1e-9) & (r2 <= cyl.radius ** 2) & (ts < t)
            t = np.where(good, ts, t)
            normal_kind = np.where(good, np.int8(cap_sign), normal_kind)

    return t, normal_kind


def render_frame(scene: Scene, pose: Pose, cam: CameraIntrinsics, lights=_LIGHTS) -> np.ndarray:
    """Raycast one frame: nearest-hit Lambertian shading, white background.

    Returns an (H, W) float64 image in [0, 1]; row 0 is the top of the
    image and column 0 the left edge as seen by the camera.
    """
    h, w = cam.height, cam.width
    us = (np.arange(w) + 0.5 - w / 2.0) / cam.f_pix
    vs = (h / 2.0 - np.arange(h) - 0.5) / cam.f_pix
    d = (
        pose.forward[None, None, :]
        + us[None, :, None] * pose.right[None, None, :]
        + vs[:, None, None] * pose.up[None, None, :]
    ).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = pose.position.astype(np.float64)

    best_t = np.full(d.shape[0], np.inf)
    best_albedo = np.zeros(d.shape[0])
    best_normal = np.zeros((d.shape[0], 3))

    def consider(t, normals, albedo):
        closer = t < best_t
        best_t[closer] = t[closer]
        best_albedo[closer] = albedo
        best_normal[closer] = normals[closer]

    if scene.mesh is not None:
        # meshes are stored in unit-cube coordinates (as the voxelizer
        # wants them); the world picture is that cube centered on the origin
        verts = scene.mesh.vertices - 0.5
        tris = scene.mesh.triangles
        t, tri_idx = _triangle_hits(o, d, verts, tris)
        face_n = np.cross(
            verts[tris[:, 1]] - verts[tris[:, 0]],
            verts[tris[:, 2]] - verts[tris[:, 0]],
        )
        lens = np.linalg.norm(face_n, axis=1, keepdims=True)
        face_n = face_n / np.where(lens > 0, lens, 1.0)
        normals = np.zeros((d.shape[0], 3))
        hit = tri_idx >= 0
        normals[hit] = face_n[tri_idx[hit]]
        # two-sided shading: orient each normal against the viewing ray
        flip = np.einsum("ij,ij->i", normals, d) > 0
        normals[flip] *= -1.0
        consider(t, normals, scene.mesh_albedo)

    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            t = _sphere_hits(o, d, np.asarray(prim.center), prim.radius)
            tt = np.where(np.isfinite(t), t, 0.0)
            pts = o[None, :] + tt[:, None] * d
            normals = (pts - np.asarray(prim.center)) / prim.radius
            consider(t, normals, prim.albedo)
        elif isinstance(prim, Box):
            t, axis = _box_hits(o, d, prim.center, prim.half_extents)
            pts = o[None, :] + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            normals = np.zeros_like(pts)
            rows = np.arange(d.shape[0])
            signs = np.sign(pts[rows, axis] - np.asarray(prim.center)[axis])
            normals[rows, axis] = np.where(signs == 0, 1.0, signs)
            consider(t, normals, prim.albedo)
        elif isinstance(prim, Cylinder):
            t, kind = _cylinder_hits(o, d, prim)
            pts = o[None, :] + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            normals = np.zeros_like(pts)
            side = kind == 0
            plane = [i for i in range(3) if i != prim.axis]
            for i in plane:
                normals[side, i] = (pts[side, i] - prim.center[i]) / prim.radius
            normals[~side, prim.axis] = kind[~side]
            consider(t, normals, prim.albedo)
        else:
            raise InvalidSceneSpec(f"unknown primitive {type(prim).__name__}")

    img = np.ones(d.shape[0])
    hit = np.isfinite(best_t)
    if np.any(hit):
        shade = np.zeros(hit.sum())
        n = best_normal[hit]
        for direction, weight in lights:
            shade += weight * np.maximum(0.0, n @ np.asarray(direction))
        img[hit] = np.clip(best_albedo[hit] * shade, 0.0, 1.0)
    return img.reshape(h, w)


def video_to_events(
    frames: np.ndarray,
    fps: float,
    contrast: float = DEFAULT_CONTRAST,
    eps_log: float = LOG_EPS,
) -> EventStream:
    """Contrast-threshold event synthesis from an intensity video.

    Each pixel keeps a reference log intensity that advances by
    ``contrast`` per event. Within an inter-frame interval the log
    intensity moves linearly, so the k-th crossing happens at the
    interval fraction that lands exactly on reference + k*contrast.
    Events from all pixels are merged in time order with ties broken by
    row-major pixel index, and the stream duration is frame_count/fps.
    """
    if contrast <= 0:
        raise ContrastNonPositive(f"contrast threshold must be positive, got {contrast}")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise FrameDimMismatch(f"expected (frames, H, W), got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise FrameDimMismatch(f"need at least 2 frames, got {frames.shape[0]}")
    n, h, w = frames.shape
    duration = n / fps
    dt = 1.0 / fps

    log_frames = np.log(frames + eps_log)
    ref = log_frames[0].reshape(-1).copy()
    npix = h * w
    pix = np.arange(npix)

    ts_parts, pix_parts, pol_parts = [], [], []
    for i in range(n - 1):
        la = log_frames[i].reshape(-1)
        lb = log_frames[i + 1].reshape(-1)
        delta = lb - la
        up = delta > 0
        down = delta < 0
        k = np.zeros(npix, dtype=np.int64)
        k[up] = np.floor((lb[up] - ref[up]) / contrast).astype(np.int64)
        k[down] = np.floor((ref[down] - lb[down]) / contrast).astype(np.int64)
        np.maximum(k, 0, out=k)
        total = int(k.sum())
        if total == 0:
            continue

        fire = k > 0
        counts = k[fire]
        starts = np.cumsum(counts) - counts
        order = np.arange(total) - np.repeat(starts, counts) + 1  # 1..k per pixel
        rep_pix = np.repeat(pix[fire], counts)
        sign = np.where(delta[fire] > 0, 1.0, -1.0)
        rep_sign = np.repeat(sign, counts)
        levels = np.repeat(ref[fire], counts) + rep_sign * order * contrast
        frac = (levels - np.repeat(la[fire], counts)) / np.repeat(delta[fire], counts)
        ts_parts.append(i * dt + frac * dt)
        pix_parts.append(rep_pix)
        pol_parts.append(rep_sign.astype(np.int8))

        ref[fire] += np.where(delta[fire] > 0, 1.0, -1.0) * counts * contrast

    if not ts_parts:
        empty = np.array([])
        return from_arrays(empty, empty, empty, empty.astype(np.int8), w, h, duration)

    t_all = np.concatenate(ts_parts)
    pix_all = np.concatenate(pix_parts)
    p_all = np.concatenate(pol_parts)
    idx = np.lexsort((pix_all, t_all))
    return from_arrays(
        t_all[idx],
        (pix_all[idx] % w).astype(np.uint16),
        (pix_all[idx] // w).astype(np.uint16),
        p_all[idx],
        w,
        h,
        duration,
    )


def occupancy_label(scene: Scene, resolution: int) -> voxel.VoxelGrid:
    """Scene occupancy on an R-cube over the unit cube around the origin.

    Primitive scenes use exact inside tests at cell centers; mesh scenes
    go through the surface voxelizer with interior fill.
    """
    if scene.mesh is not None:
        return voxel.voxelize(scene.mesh, resolution, fill_interior=True)
    r = resolution
    axes = (np.arange(r) + 0.5) / r - 0.5
    xs, ys, zs = np.meshgrid(axes, axes, axes, indexing="ij")
    occ = np.zeros((r, r, r), dtype=bool)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            cx, cy, cz = prim.center
            occ |= (xs - cx) ** 2 + (ys - cy) ** 2 + (zs - cz) ** 2 <= prim.radius ** 2
        elif isinstance(prim, Box):
            cx, cy, cz = prim.center
            hx, hy, hz = prim.half_extents
            occ |= (
                (np.abs(xs - cx) <= hx)
                & (np.abs(ys - cy) <= hy)
                & (np.abs(zs - cz) <= hz)
            )
        elif isinstance(prim, Cylinder):
            grids = (xs, ys, zs)
            along = np.abs(grids[prim.axis] - prim.center[prim.axis]) <= prim.half_height
            r2 = np.zeros_like(xs)
            for i in range(3):
                if i != prim.axis:
                    r2 = r2 + (grids[i] - prim.center[i]) ** 2
            occ |= along & (r2 <= prim.radius ** 2)
        else:
            raise InvalidSceneSpec(f"unknown primitive {type(prim).__name__}")
    return voxel.VoxelGrid(r, occ)


def generate_sample(
    scene: Scene,
    traj: TrajectoryConfig | None = None,
    cam: CameraIntrinsics | None = None,
    contrast: float = DEFAULT_CONTRAST,
    resolution: int = 32,
) -> tuple[EventStream, voxel.VoxelGrid]:
    """Render the orbit video, synthesize events, and build the voxel label."""
    traj = traj if traj is not None else TrajectoryConfig()
    cam = cam if cam is not None else CameraIntrinsics()
    n_frames = int(traj.duration * traj.fps)
    video = np.empty((n_frames, cam.height, cam.width))
    for i in range(n_frames):
        pose = camera_pose(traj, i / traj.fps)
        video[i] = render_frame(scene, pose, cam)
    stream = video_to_events(video, traj.fps, contrast=contrast)
    label = occupancy_label(scene, resolution)
    return stream, label


def scene_to_dict(scene: Scene) -> dict:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            prims.append(
                {"kind": "sphere", "center": list(p.center), "radius": p.radius,
                 "albedo": p.albedo}
            )
        elif isinstance(p, Box):
            prims.append(
                {"kind": "box", "center": list(p.center),
                 "half_extents": list(p.half_extents), "albedo": p.albedo}
            )
        elif isinstance(p, Cylinder):
            prims.append(
                {"kind": "cylinder", "center": list(p.center), "axis": p.axis,
                 "radius": p.radius, "half_height": p.half_height, "albedo": p.albedo}
            )
        else:
            raise InvalidSceneSpec(f"unknown primitive {type(p).__name__}")
    return {"primitives": prims}


def scene_from_dict(spec: dict) -> Scene:
    """Build a Scene from its JSON form; raises InvalidSceneSpec on nonsense."""
    if not isinstance(spec, dict):
        raise InvalidSceneSpec(f"scene spec must be an object, got {type(spec).__name__}")
    prims = []
    entries = spec.get("primitives", [])
    if not isinstance(entries, list):
        raise InvalidSceneSpec("'primitives' must be a list")
    for i, entry in enumerate(entries):
        try:
            kind = entry["kind"]
            albedo = float(entry.get("albedo", 0.9))
            center = tuple(float(v) for v in entry["center"])
            if kind == "sphere":
                prim = Sphere(center, float(entry["radius"]), albedo)
                if prim.radius <= 0:
                    raise InvalidSceneSpec(f"primitive {i}: radius must be positive")
            elif kind == "box":
                half = tuple(float(v) for v in entry["half_extents"])
                prim = Box(center, half, albedo)
                if any(e <= 0 for e in prim.half_extents):
                    raise InvalidSceneSpec(f"primitive {i}: half_extents must be positive")
            elif kind == "cylinder":
                prim = Cylinder(
                    center, int(entry["axis"]),
                    float(entry["radius"]), float(entry["half_height"]), albedo,
                )
                if prim.axis not in (0, 1, 2):
                    raise InvalidSceneSpec(f"primitive {i}: axis must be 0, 1, or 2")
                if prim.radius <= 0 or prim.half_height <= 0:
                    raise InvalidSceneSpec(f"primitive {i}: dimensions must be positive")
            else:
                raise InvalidSceneSpec(f"primitive {i}: unknown kind {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSceneSpec(f"primitive {i}: {exc}") from exc
        if len(prim.center) != 3:
            raise InvalidSceneSpec(f"primitive {i}: center must have 3 components")
        prims.append(prim)
    return Scene(primitives=prims)
