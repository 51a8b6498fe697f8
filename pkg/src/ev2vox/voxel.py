"""Voxel occupancy grids, mesh ingestion, voxelization, and metrics.

Grids live on the unit cube [0,1]^3: cell (i,j,k) of a resolution-R grid
spans [i/R, (i+1)/R) x [j/R, (j+1)/R) x [k/R, (k+1)/R) with the first
index along x. Meshes are normalized into the same cube before
voxelization. Metrics follow the occupancy conventions used throughout
the package: strict thresholds, and empty-vs-empty comparisons count as
perfect agreement.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    DegenerateExtent,
    EmptyMesh,
    FormatError,
    IndexOutOfRange,
    IoFailure,
    MalformedLine,
    NonPositiveDistance,
    ResolutionMismatch,
    ResolutionZero,
    ThresholdOutOfRange,
)

VOX1_MAGIC = b"E2VVOX1\x00"


@dataclass
class VoxelGrid:
    """Binary occupancy over the unit cube, occupancy[x, y, z] in {0, 1}."""

    resolution: int
    occupancy: np.ndarray

    def __post_init__(self):
        if self.resolution <= 0:
            raise ResolutionZero(f"grid resolution must be positive, got {self.resolution}")
        expected = (self.resolution,) * 3
        if self.occupancy.shape != expected:
            raise ResolutionMismatch(
                f"occupancy shape {self.occupancy.shape} does not match R={self.resolution}"
            )
        self.occupancy = self.occupancy.astype(bool)

    @classmethod
    def empty(cls, resolution: int) -> "VoxelGrid":
        return cls(resolution, np.zeros((resolution,) * 3, dtype=bool))

    def count(self) -> int:
        return int(self.occupancy.sum())


@dataclass
class ProbGrid:
    """Per-cell occupancy probabilities in [0, 1], values[x, y, z]."""

    resolution: int
    values: np.ndarray

    def __post_init__(self):
        expected = (self.resolution,) * 3
        if self.values.shape != expected:
            raise ResolutionMismatch(
                f"value shape {self.values.shape} does not match R={self.resolution}"
            )


@dataclass
class TriMesh:
    """Triangle mesh: vertices (V, 3) and triangles (F, 3) vertex indices."""

    vertices: np.ndarray
    triangles: np.ndarray


@dataclass
class PointSet:
    """Points inside the unit cube, shape (P, 3)."""

    points: np.ndarray


def parse_obj(text: str) -> TriMesh:
    """Parse Wavefront OBJ text into a triangle mesh.

    Handles `v` and `f` lines; faces with more than three corners are fan
    triangulated, negative indices resolve against the vertex count at the
    point of use, and texture/normal references after `/` are dropped.
    Everything else (vt, vn, materials, groups, comments) is ignored.
    """
    vertices: list[tuple[float, float, float]] = []
    triangles: list[tuple[int, int, int]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        keyword = parts[0]
        if keyword == "v":
            if len(parts) < 4:
                raise MalformedLine(f"line {lineno}: vertex needs 3 coordinates: {raw!r}")
            try:
                vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise MalformedLine(f"line {lineno}: non-numeric vertex: {raw!r}") from exc
        elif keyword == "f":
            if len(parts) < 4:
                raise MalformedLine(f"line {lineno}: face needs at least 3 indices: {raw!r}")
            corners = []
            for token in parts[1:]:
                head = token.split("/", 1)[0]
                try:
                    idx = int(head)
                except ValueError as exc:
                    raise MalformedLine(f"line {lineno}: bad face index {token!r}") from exc
                if idx == 0:
                    raise IndexOutOfRange(f"line {lineno}: OBJ indices are 1-based")
                corners.append(len(vertices) + idx if idx < 0 else idx - 1)
            for a, b in zip(corners[1:-1], corners[2:]):
                tri = (corners[0], a, b)
                if len(set(tri)) == 3:
                    triangles.append(tri)

    if not triangles:
        raise EmptyMesh("OBJ contains no (non-degenerate) faces")
    tri_arr = np.asarray(triangles, dtype=np.int64)
    if tri_arr.min() < 0 or tri_arr.max() >= len(vertices):
        bad = tri_arr[(tri_arr < 0) | (tri_arr >= len(vertices))][0]
        raise IndexOutOfRange(
            f"face references vertex {bad + 1} but only {len(vertices)} exist"
        )
    return TriMesh(np.asarray(vertices, dtype=np.float64), tri_arr)


def normalize_mesh(mesh: TriMesh) -> TriMesh:
    """Uniformly scale and translate so the bounding box is centered in the
    unit cube with its longest extent exactly 1."""
    if mesh.vertices.size == 0 or mesh.triangles.size == 0:
        raise EmptyMesh("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    longest = float((hi - lo).max())
    if longest <= 0.0:
        raise DegenerateExtent("mesh bounding box has zero extent on every axis")
    center = (lo + hi) / 2.0
    verts = (mesh.vertices - center) / longest + 0.5
    return TriMesh(verts, mesh.triangles.copy())


def _sample_triangles(vertices: np.ndarray, triangles: np.ndarray, spacing: float) -> np.ndarray:
    """Dense point samples covering every triangle at the given spacing.

    Each triangle is sampled on a barycentric lattice fine enough that
    neighboring samples are at most ``spacing`` apart along both edge
    directions, so no cell the triangle passes through is missed at the
    matching grid pitch.
    """
    chunks = []
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    nb = np.ceil(np.linalg.norm(b - a, axis=1) / spacing).astype(int)
    nc = np.ceil(np.linalg.norm(c - a, axis=1) / spacing).astype(int)
    steps = np.maximum(np.maximum(nb, nc), 1)
    for t in range(len(triangles)):
        n = int(steps[t])
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = (i + j) <= n
        u = (i[keep] / n)[:, None]
        v = (j[keep] / n)[:, None]
        chunks.append(a[t] + u * (b[t] - a[t]) + v * (c[t] - a[t]))
    return np.concatenate(chunks, axis=0)


def _surface_cells(mesh: TriMesh, resolution: int) -> np.ndarray:
    spacing = math.sqrt(3.0) / (4.0 * resolution)
    pts = _sample_triangles(mesh.vertices, mesh.triangles, spacing)
    idx = np.clip(np.floor(pts * resolution).astype(np.int64), 0, resolution - 1)
    occ = np.zeros((resolution,) * 3, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def _fill_exterior(surface: np.ndarray) -> np.ndarray:
    """Mark as occupied everything not reachable from the grid boundary
    through empty cells (6-connectivity)."""
    empty = ~surface
    structure = ndimage.generate_binary_structure(3, 1)
    labels, _ = ndimage.label(empty, structure=structure)
    boundary_labels = np.unique(
        np.concatenate(
            [
                labels[0].ravel(), labels[-1].ravel(),
                labels[:, 0].ravel(), labels[:, -1].ravel(),
                labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
            ]
        )
    )
    exterior = np.isin(labels, boundary_labels[boundary_labels != 0])
    return ~exterior


def voxelize(
    mesh: TriMesh,
    resolution: int,
    fill_interior: bool = True,
    supersample: int = 5,
) -> VoxelGrid:
    """Convert a normalized mesh into a binary occupancy grid.

    Surface cells are found by sampling every triangle at sub-cell density
    (at least 4 samples per cell diagonal). With ``fill_interior`` the
    exterior is flood filled from the grid boundary and the complement is
    kept. Marking, filling, and complementing happen on a finer lattice
    (``supersample`` subdivisions per cell, odd so cell centers are fine
    cell centers) and each output cell takes the value of the fine cell
    containing its center; working at the output resolution directly would
    count every surface-touching cell as occupied and inflate thin or
    curved solids by well over the tolerance the tests demand.

    Without ``fill_interior`` the result is the raw surface marking at the
    output resolution.
    """
    if resolution <= 0:
        raise ResolutionZero(f"voxelize needs a positive resolution, got {resolution}")
    if mesh.triangles.size == 0:
        raise EmptyMesh("cannot voxelize a mesh with no triangles")

    if not fill_interior:
        return VoxelGrid(resolution, _surface_cells(mesh, resolution))

    if supersample < 1 or supersample % 2 == 0:
        raise ResolutionZero(f"supersample must be a positive odd integer, got {supersample}")
    fine_r = resolution * supersample
    fine = _fill_exterior(_surface_cells(mesh, fine_r))
    half = supersample // 2
    coarse = fine[half::supersample, half::supersample, half::supersample]
    return VoxelGrid(resolution, coarse.copy())


def binarize(grid: ProbGrid, threshold: float) -> VoxelGrid:
    """Occupied where probability strictly exceeds the threshold."""
    if not (0.0 < threshold < 1.0):
        raise ThresholdOutOfRange(f"threshold must lie in (0, 1), got {threshold}")
    return VoxelGrid(grid.resolution, grid.values > threshold)


def iou(pred: ProbGrid | VoxelGrid, gt: VoxelGrid, threshold: float = 0.3) -> float:
    """Intersection over union of thresholded prediction and ground truth.

    Both grids empty counts as perfect agreement (1.0).
    """
    if pred.resolution != gt.resolution:
        raise ResolutionMismatch(
            f"prediction R={pred.resolution} vs ground truth R={gt.resolution}"
        )
    pred_occ = pred.occupancy if isinstance(pred, VoxelGrid) else binarize(pred, threshold).occupancy
    inter = np.logical_and(pred_occ, gt.occupancy).sum()
    union = np.logical_or(pred_occ, gt.occupancy).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


def voxel_to_points(grid: VoxelGrid) -> PointSet:
    """One point per occupied cell, at the cell center."""
    idx = np.argwhere(grid.occupancy)
    return PointSet((idx + 0.5) / grid.resolution)


def fscore(rec: PointSet, gt: PointSet, distance: float = 0.20) -> float:
    """Harmonic mean of precision and recall at a distance tolerance.

    Precision is the fraction of reconstructed points strictly within
    ``distance`` of some ground-truth point; recall is the symmetric
    fraction. Both sets empty gives 1.0, exactly one empty gives 0.0.
    """
    if not (distance > 0.0):
        raise NonPositiveDistance(f"distance tolerance must be positive, got {distance}")
    nr, ng = len(rec.points), len(gt.points)
    if nr == 0 and ng == 0:
        return 1.0
    if nr == 0 or ng == 0:
        return 0.0
    d_rec, _ = cKDTree(gt.points).query(rec.points)
    d_gt, _ = cKDTree(rec.points).query(gt.points)
    precision = float(np.mean(d_rec < distance))
    recall = float(np.mean(d_gt < distance))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def write_vox1(grid: VoxelGrid, path: str | os.PathLike) -> None:
    """Serialize a grid to VOX1: magic, u16 R, R^3 bits packed little-endian
    with x varying fastest."""
    if grid.resolution > 0xFFFF:
        raise FormatError("VOX1 stores the resolution as u16")
    bits = grid.occupancy.ravel(order="F").astype(np.uint8)
    packed = np.packbits(bits, bitorder="little")
    try:
        with open(path, "wb") as fh:
            fh.write(VOX1_MAGIC)
            fh.write(np.uint16(grid.resolution).tobytes())
            fh.write(packed.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write voxel file {path}: {exc}") from exc


def read_vox1(path: str | os.PathLike) -> VoxelGrid:
    """Read a VOX1 file, rejecting bad magic, truncation, or trailing bytes."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read voxel file {path}: {exc}") from exc
    if len(blob) < len(VOX1_MAGIC) + 2:
        raise FormatError(f"{path}: truncated VOX1 header")
    if blob[: len(VOX1_MAGIC)] != VOX1_MAGIC:
        raise FormatError(f"{path}: bad magic, not a VOX1 file")
    r = int(np.frombuffer(blob, "<u2", count=1, offset=len(VOX1_MAGIC))[0])
    if r == 0:
        raise FormatError(f"{path}: resolution 0")
    payload = blob[len(VOX1_MAGIC) + 2 :]
    expected = (r**3 + 7) // 8
    if len(payload) != expected:
        raise FormatError(
            f"{path}: expected {expected} occupancy bytes for R={r}, found {len(payload)}"
        )
    bits = np.unpackbits(
        np.frombuffer(payload, dtype=np.uint8), count=r**3, bitorder="little"
    )
    occ = bits.reshape((r, r, r), order="F").astype(bool)
    return VoxelGrid(r, occ)


def unit_cube_mesh() -> TriMesh:
    """The unit cube [0,1]^3 as 12 triangles."""
    corners = np.array(
        [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
    )
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # x = 0, x = 1
        (0, 4, 5, 1), (2, 3, 7, 6),  # y = 0, y = 1
        (0, 2, 6, 4), (1, 5, 7, 3),  # z = 0, z = 1
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return TriMesh(corners, np.asarray(tris, dtype=np.int64))


def uv_sphere_mesh(
    center=(0.5, 0.5, 0.5), diameter: float = 1.0, n_lat: int = 48, n_lon: int = 96
) -> TriMesh:
    """A latitude/longitude tessellated sphere."""
    radius = diameter / 2.0
    cx, cy, cz = center
    verts = [(cx, cy, cz + radius)]
    for i in range(1, n_lat):
        phi = math.pi * i / n_lat
        for j in range(n_lon):
            theta = 2.0 * math.pi * j / n_lon
            verts.append(
                (
                    cx + radius * math.sin(phi) * math.cos(theta),
                    cy + radius * math.sin(phi) * math.sin(theta),
                    cz + radius * math.cos(phi),
                )
            )
    verts.append((cx, cy, cz - radius))
    top, bottom = 0, len(verts) - 1

    def ring(i: int, j: int) -> int:
        return 1 + (i - 1) * n_lon + (j % n_lon)

    tris = []
    for j in range(n_lon):
        tris.append((top, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c, d))
            tris.append((a, d, b))
    for j in range(n_lon):
        tris.append((bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64))
