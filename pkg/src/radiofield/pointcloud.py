"""LiDAR point-cloud ingestion, voxelization, and per-ray depth queries.

Clouds are loaded in the world frame, translated so the base station sits
at the origin, then binned into an integer count tensor with the floor
rule ``index = floor((p - mins) / resolution)``. Rays start at the origin;
the first sample landing in a nonzero-count voxel defines the obstacle
depth target for that ray.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import container
from .errors import InvalidStateError, OutOfBoundsError, ParseError

FRAME_WORLD = "world"
FRAME_BS = "bs-centered"


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (K, 3) meters
    frame: str = FRAME_WORLD

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class VoxelSpec:
    """Axis-aligned voxel lattice: lower corner, per-axis resolution, counts."""

    mins: np.ndarray  # (3,)
    resolutions: np.ndarray  # (3,)
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "mins", np.asarray(self.mins, dtype=np.float64))
        object.__setattr__(self, "resolutions", np.asarray(self.resolutions, dtype=np.float64))
        if np.any(self.resolutions <= 0):
            raise ValueError("voxel resolutions must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError("voxel dims must be >= 1 per axis")

    @property
    def maxs(self) -> np.ndarray:
        return self.mins + np.asarray(self.dims) * self.resolutions


def fit_voxel_spec(points: np.ndarray, resolution: float = 0.25, pad: float = 0.0) -> VoxelSpec:
    """Smallest lattice of cubic voxels covering ``points`` (plus padding)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("cannot fit a voxel spec to an empty cloud")
    mins = pts.min(axis=0) - pad
    maxs = pts.max(axis=0) + pad
    dims = np.maximum(np.ceil((maxs - mins) / resolution), 1).astype(int)
    return VoxelSpec(mins, np.full(3, float(resolution)), tuple(int(d) for d in dims))


@dataclass(frozen=True)
class DensityGrid:
    """Voxel point counts; immutable after construction."""

    spec: VoxelSpec
    rho: np.ndarray = field(repr=False)  # (X, Y, Z) int64

    @property
    def total(self) -> int:
        return int(self.rho.sum())


def load_point_cloud(source, fmt: str) -> PointCloud:
    """Parse ``xyz-csv`` or ``ascii-ply`` data from bytes, str, or a stream."""
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    if fmt == "xyz-csv":
        return _parse_xyz_csv(text)
    if fmt == "ascii-ply":
        return _parse_ascii_ply(text)
    raise ValueError(f"unknown point cloud format {fmt!r}")


def _parse_row(parts, line_no):
    if len(parts) < 3:
        raise ParseError(f"expected 3 coordinates, got {len(parts)}", line=line_no)
    try:
        coords = [float(p) for p in parts[:3]]
    except ValueError as exc:
        raise ParseError(str(exc), line=line_no) from None
    if not all(np.isfinite(coords)):
        raise ParseError(f"non-finite coordinate in {parts[:3]}", line=line_no)
    return coords


def _parse_xyz_csv(text: str) -> PointCloud:
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        rows.append(_parse_row(stripped.split(","), line_no))
    pts = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return PointCloud(pts, FRAME_WORLD)


def _parse_ascii_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)
    n_vertices = None
    body_start = None
    for i, line in enumerate(lines[1:], start=2):
        tokens = line.strip().split()
        if tokens[:2] == ["element", "vertex"]:
            n_vertices = int(tokens[2])
        elif tokens[:1] == ["format"] and "ascii" not in tokens:
            raise ParseError("only ascii PLY is supported", line=i)
        elif tokens == ["end_header"]:
            body_start = i
            break
    if body_start is None or n_vertices is None:
        raise ParseError("truncated PLY header")
    rows = []
    for offset in range(n_vertices):
        line_no = body_start + 1 + offset
        if line_no > len(lines) or not lines[line_no - 1].strip():
            raise ParseError(
                f"truncated PLY body: expected {n_vertices} vertices, got {offset}",
                line=line_no,
            )
        rows.append(_parse_row(lines[line_no - 1].split(), line_no))
    pts = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return PointCloud(pts, FRAME_WORLD)


def translate_to_bs(cloud: PointCloud, p_bs) -> PointCloud:
    """Shift all points by -p_bs and tag the cloud as bs-centered."""
    if cloud.frame != FRAME_WORLD:
        raise InvalidStateError("cloud is already bs-centered")
    p_bs = np.asarray(p_bs, dtype=np.float64)
    return replace(cloud, points=cloud.points - p_bs, frame=FRAME_BS)


def voxel_indices(spec: VoxelSpec, points: np.ndarray) -> np.ndarray:
    """Floor-rule indices; exact upper-face points clamp to the last voxel."""
    rel = (np.asarray(points, dtype=np.float64) - spec.mins) / spec.resolutions
    idx = np.floor(rel).astype(np.int64)
    dims = np.asarray(spec.dims)
    # points exactly on the top face would index one past the end
    on_top = (idx == dims) & (rel == dims)
    idx[on_top] -= 1
    return idx


def voxelize(cloud: PointCloud, spec: VoxelSpec) -> DensityGrid:
    """Bin each point into exactly one voxel; total count is preserved."""
    if cloud.frame != FRAME_BS:
        raise InvalidStateError("voxelize expects a bs-centered cloud")
    idx = voxel_indices(spec, cloud.points)
    dims = np.asarray(spec.dims)
    bad = np.any((idx < 0) | (idx >= dims), axis=1)
    if np.any(bad):
        offenders = np.nonzero(bad)[0]
        raise OutOfBoundsError(
            f"{offenders.size} points outside the voxel bounding box "
            f"(first offenders: {offenders[:8].tolist()})",
            indices=offenders.tolist(),
        )
    rho = np.zeros(spec.dims, dtype=np.int64)
    np.add.at(rho, (idx[:, 0], idx[:, 1], idx[:, 2]), 1)
    return DensityGrid(spec, rho)


def density_lookup(grid: DensityGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counts at query points plus an in-domain mask; outside queries read 0."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = voxel_indices(grid.spec, pts)
    dims = np.asarray(grid.spec.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    values = np.zeros(pts.shape[0], dtype=np.float64)
    if np.any(inside):
        sel = idx[inside]
        values[inside] = grid.rho[sel[:, 0], sel[:, 1], sel[:, 2]]
    return values, inside


def density_at(grid: DensityGrid, p) -> float:
    """Piecewise-constant count lookup; 0 beyond the box (free space)."""
    values, _ = density_lookup(grid, np.asarray(p, dtype=np.float64)[None, :])
    return float(values[0])


def first_obstacle_depth(grid: DensityGrid, direction, sample_ts) -> float | None:
    """Smallest sample distance whose voxel holds any points, else None."""
    ts = np.asarray(sample_ts, dtype=np.float64)
    if ts.size == 0:
        raise ValueError("sample_ts must be non-empty")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("sample_ts must be strictly increasing")
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be unit norm")
    values, _ = density_lookup(grid, ts[:, None] * d[None, :])
    hits = np.nonzero(values > 0)[0]
    return float(ts[hits[0]]) if hits.size else None


def first_obstacle_depths(grid: DensityGrid, directions: np.ndarray, sample_ts) -> np.ndarray:
    """Vectorized :func:`first_obstacle_depth`; NaN marks rays with no hit."""
    ts = np.asarray(sample_ts, dtype=np.float64)
    if ts.size == 0:
        raise ValueError("sample_ts must be non-empty")
    dirs = np.asarray(directions, dtype=np.float64)
    pts = ts[None, :, None] * dirs[:, None, :]  # (R, T, 3)
    values, _ = density_lookup(grid, pts.reshape(-1, 3))
    occupied = values.reshape(dirs.shape[0], ts.size) > 0
    has_hit = occupied.any(axis=1)
    first = np.argmax(occupied, axis=1)
    depths = np.full(dirs.shape[0], np.nan)
    depths[has_hit] = ts[first[has_hit]]
    return depths


def first_obstacle_depth_dda(grid: DensityGrid, direction) -> float | None:
    """Exact voxel traversal (diagnostic only): distance to the entry face of
    the first occupied voxel along the ray from the origin."""
    d = np.asarray(direction, dtype=np.float64)
    spec = grid.spec
    lo, hi = spec.mins, spec.maxs
    # clip the ray to the box
    with np.errstate(divide="ignore"):
        inv = np.where(d != 0, 1.0 / d, np.inf)
    t0 = np.where(d != 0, (lo - 0.0) * inv, -np.inf)
    t1 = np.where(d != 0, (hi - 0.0) * inv, np.inf)
    t_enter = max(np.minimum(t0, t1).max(), 0.0)
    t_exit = np.maximum(t0, t1).min()
    if t_exit <= t_enter:
        return None
    eps = 1e-12 * max(1.0, t_exit)
    t = t_enter + eps
    idx = voxel_indices(spec, (t * d)[None, :])[0]
    dims = np.asarray(spec.dims)
    idx = np.clip(idx, 0, dims - 1)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0, spec.resolutions / np.abs(d), np.inf)
        next_bound = spec.mins + (idx + (step > 0)) * spec.resolutions
        t_max = np.where(d != 0, next_bound * inv, np.inf)
    while True:
        if grid.rho[idx[0], idx[1], idx[2]] > 0:
            return float(t)
        axis = int(np.argmin(t_max))
        t = t_max[axis]
        if t >= t_exit:
            return None
        idx[axis] += step[axis]
        if idx[axis] < 0 or idx[axis] >= dims[axis]:
            return None
        t_max[axis] += t_delta[axis]


# ---------------------------------------------------------------------------
# serialization

def density_to_bytes(grid: DensityGrid) -> bytes:
    buf = io.BytesIO()
    container.write_header(buf, container.KIND_DENSITY)
    for v in grid.spec.mins:
        container.write_f64(buf, float(v))
    for v in grid.spec.resolutions:
        container.write_f64(buf, float(v))
    for v in grid.spec.dims:
        container.write_u32(buf, int(v))
    container.write_array(buf, grid.rho.astype(np.uint32))
    return buf.getvalue()


def density_from_bytes(data: bytes) -> DensityGrid:
    buf = io.BytesIO(data)
    container.read_header(buf, container.KIND_DENSITY)
    mins = np.array([container.read_f64(buf) for _ in range(3)])
    res = np.array([container.read_f64(buf) for _ in range(3)])
    dims = tuple(container.read_u32(buf) for _ in range(3))
    rho = container.read_array(buf).astype(np.int64)
    if rho.shape != dims:
        raise ParseError(f"density dims {rho.shape} != header {dims}")
    return DensityGrid(VoxelSpec(mins, res, dims), rho)
