"""Synthetic desk-scale scenes and datasets.

A scene is a rectangular room with axis-aligned box obstacles, a base
station near one corner, and scattered receiver grids. Ground-truth
angular power spectra follow a deterministic geometric model: a
line-of-sight path with inverse-square gain plus first-order specular
reflections off box faces (mirror construction), every path checked for
occlusion against all boxes. Surface-sampled point clouds, expected beam
powers under base and rotated measurement matrices, an explored split,
and per-ray obstacle depth targets complete a dataset.

The array boresight is mounted toward the room center; the fixed rotation
``mount`` maps array-frame ray directions to world directions, and
everything downstream (voxel grid, renderer, depth targets) works in
bs-centered world coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .arrays import AngularGrid, MeasurementMatrix, build_angular_grid
from .errors import GenerationError
from .pointcloud import (
    DensityGrid,
    PointCloud,
    VoxelSpec,
    first_obstacle_depths,
    translate_to_bs,
    voxelize,
)

JITTER_STD = 0.01  # surface sampling noise, meters


@dataclass(frozen=True)
class Box:
    mins: np.ndarray
    maxs: np.ndarray
    reflectivity: float

    def contains(self, p, margin=0.0) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.mins - margin) and np.all(p <= self.maxs + margin))


@dataclass(frozen=True)
class SceneConfig:
    extent: tuple[float, float, float] = (20.0, 20.0, 5.0)
    n_boxes: int = 6
    n_grids: int = 500
    seed: int = 0
    bs_position: tuple[float, float, float] = (0.4, 0.4, 3.0)
    box_footprint: tuple[float, float] = (1.0, 4.0)
    box_height: tuple[float, float] = (1.0, 3.5)
    reflectivity: tuple[float, float] = (0.3, 0.9)
    grid_height: tuple[float, float] = (0.5, 2.0)
    margin: float = 0.3
    max_tilt_deg: float = 87.0  # keep grid directions inside the hemisphere
    retry_cap: int = 2000


@dataclass(frozen=True)
class Scene:
    extent: np.ndarray
    bs_position: np.ndarray
    boxes: list[Box]
    grid_positions: np.ndarray
    seed: int
    mount: np.ndarray  # (3, 3): array frame -> world frame

    @property
    def n_grids(self) -> int:
        return self.grid_positions.shape[0]

    def world_directions(self, angular: AngularGrid) -> np.ndarray:
        return angular.directions @ self.mount.T

    def bounding_radius(self) -> float:
        corners = np.array(
            [[x, y, z] for x in (0, self.extent[0])
             for y in (0, self.extent[1]) for z in (0, self.extent[2])]
        )
        return float(np.max(np.linalg.norm(corners - self.bs_position, axis=1)))


def mount_matrix(bs_position, target) -> np.ndarray:
    """Rotation whose third column (array boresight) points at ``target``."""
    b = np.asarray(target, dtype=np.float64) - np.asarray(bs_position, dtype=np.float64)
    b = b / np.linalg.norm(b)
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(up, b)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    u1 = np.cross(up, b)
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(b, u1)
    return np.column_stack([u1, u2, b])


def generate_scene(config: SceneConfig) -> Scene:
    """Seeded placement of non-overlapping boxes and visible receiver grids."""
    rng = np.random.default_rng(config.seed)
    extent = np.asarray(config.extent, dtype=np.float64)
    bs = np.asarray(config.bs_position, dtype=np.float64)
    mount = mount_matrix(bs, extent / 2.0)
    cos_limit = np.cos(np.deg2rad(config.max_tilt_deg))
    boresight = mount[:, 2]

    boxes: list[Box] = []
    for _ in range(config.n_boxes):
        for attempt in range(config.retry_cap):
            size = np.array([
                rng.uniform(*config.box_footprint),
                rng.uniform(*config.box_footprint),
                rng.uniform(*config.box_height),
            ])
            hi_xy = extent[:2] - config.margin - size[:2]
            if np.any(hi_xy <= config.margin):
                continue
            lo_xy = rng.uniform(config.margin, hi_xy)
            mins = np.array([lo_xy[0], lo_xy[1], 0.0])
            maxs = mins + size
            if np.any(maxs > extent - 1e-9):
                continue
            candidate = Box(mins, maxs, float(rng.uniform(*config.reflectivity)))
            if candidate.contains(bs, margin=0.5):
                continue
            if any(_boxes_overlap(candidate, other) for other in boxes):
                continue
            boxes.append(candidate)
            break
        else:
            raise GenerationError(
                f"could not place box {len(boxes) + 1} within {config.retry_cap} tries"
            )

    grids = np.empty((config.n_grids, 3))
    for i in range(config.n_grids):
        for attempt in range(config.retry_cap):
            p = np.array([
                rng.uniform(config.margin, extent[0] - config.margin),
                rng.uniform(config.margin, extent[1] - config.margin),
                rng.uniform(*config.grid_height),
            ])
            if any(box.contains(p, margin=0.1) for box in boxes):
                continue
            v = p - bs
            dist = np.linalg.norm(v)
            if dist < 1.0:
                continue
            if np.dot(v / dist, boresight) < cos_limit:
                continue  # would fall outside the modeled hemisphere
            grids[i] = p
            break
        else:
            raise GenerationError(f"could not place grid {i} within {config.retry_cap} tries")

    return Scene(extent, bs, boxes, grids, config.seed, mount)


def _boxes_overlap(a: Box, b: Box) -> bool:
    return bool(np.all(a.mins < b.maxs) and np.all(b.mins < a.maxs))


# ---------------------------------------------------------------------------
# point cloud

def scene_point_cloud(scene: Scene, points_per_m2: float, seed: int | None = None) -> PointCloud:
    """Sample room walls and box surfaces at the given areal density with
    1 cm Gaussian jitter, clamped into the room."""
    if points_per_m2 <= 0:
        raise ValueError("points_per_m2 must be positive")
    rng = np.random.default_rng(scene.seed + 1 if seed is None else seed)
    chunks = []
    for mins, maxs in _room_and_box_faces(scene):
        span = maxs - mins
        axes = [k for k in range(3) if span[k] > 0]
        area = span[axes[0]] * span[axes[1]] if len(axes) == 2 else 0.0
        count = rng.poisson(area * points_per_m2)
        if count == 0:
            continue
        pts = np.tile(mins, (count, 1))
        for k in axes:
            pts[:, k] = rng.uniform(mins[k], maxs[k], count)
        pts += rng.normal(0.0, JITTER_STD, pts.shape)
        chunks.append(pts)
    points = np.vstack(chunks) if chunks else np.empty((0, 3))
    points = np.clip(points, 0.0, scene.extent)
    return PointCloud(points, frame="world")


def _room_and_box_faces(scene: Scene):
    ext = scene.extent
    faces = []
    for axis in range(3):
        for value in (0.0, ext[axis]):
            mins = np.zeros(3)
            maxs = ext.copy()
            mins[axis] = maxs[axis] = value
            faces.append((mins, maxs))
    for box in scene.boxes:
        for axis in range(3):
            for value in (box.mins[axis], box.maxs[axis]):
                mins = box.mins.copy()
                maxs = box.maxs.copy()
                mins[axis] = maxs[axis] = value
                faces.append((mins, maxs))
    return faces


# ---------------------------------------------------------------------------
# geometric ground truth

def segment_occluded(p0, p1, boxes, eps: float = 1e-9) -> bool:
    """True when the open segment p0 -> p1 passes through any box interior."""
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    for box in boxes:
        t0, t1 = 0.0, 1.0
        hit = True
        for axis in range(3):
            if d[axis] == 0.0:
                if not (box.mins[axis] < p0[axis] < box.maxs[axis]):
                    hit = False
                    break
                continue
            a = (box.mins[axis] - p0[axis]) / d[axis]
            b = (box.maxs[axis] - p0[axis]) / d[axis]
            lo, hi = (a, b) if a < b else (b, a)
            t0, t1 = max(t0, lo), min(t1, hi)
            if t0 >= t1:
                hit = False
                break
        if hit and t1 > eps and t0 < 1.0 - eps:
            return True
    return False


def _angle_cell(scene: Scene, angular: AngularGrid, world_dir: np.ndarray) -> int | None:
    """Nearest (tilt, azimuth) cell of a world direction; None if it falls
    behind the hemisphere or past the last tilt row."""
    a = scene.mount.T @ world_dir
    theta = np.degrees(np.arccos(np.clip(a[2], -1.0, 1.0)))
    i = int(np.rint(theta / angular.tilt_step_deg))
    if i >= angular.n_tilt:
        return None
    phi = np.degrees(np.arctan2(a[1], a[0])) % 360.0
    j = int(np.rint(phi / angular.azimuth_step_deg)) % angular.n_azimuth
    return int(angular.flat_index(i, j))


def ground_truth_aps(scene: Scene, grid_position, angular: AngularGrid) -> np.ndarray:
    """LoS plus single-bounce specular APS for one receiver location."""
    g = np.asarray(grid_position, dtype=np.float64)
    x = np.zeros(angular.n_angles)
    for direction, gain in iter_paths(scene, g):
        cell = _angle_cell(scene, angular, direction)
        if cell is not None:
            x[cell] += gain
    return x


def iter_paths(scene: Scene, g: np.ndarray):
    """Yield (world departure direction, gain) for every surviving path."""
    bs = scene.bs_position
    v = g - bs
    dist = np.linalg.norm(v)
    if dist > 0 and not segment_occluded(bs, g, scene.boxes):
        yield v / dist, 1.0 / dist**2
    for box in scene.boxes:
        for axis in range(3):
            for value, outward in ((box.mins[axis], -1.0), (box.maxs[axis], 1.0)):
                side_bs = (bs[axis] - value) * outward
                side_g = (g[axis] - value) * outward
                if side_bs <= 1e-9 or side_g <= 1e-9:
                    continue  # both endpoints must face the reflecting side
                mirror = g.copy()
                mirror[axis] = 2.0 * value - g[axis]
                w = mirror - bs
                denom = w[axis]
                if abs(denom) < 1e-12:
                    continue
                t_hit = (value - bs[axis]) / denom
                if not 0.0 < t_hit < 1.0:
                    continue
                q = bs + t_hit * w
                others = [k for k in range(3) if k != axis]
                if not all(box.mins[k] - 1e-9 <= q[k] <= box.maxs[k] + 1e-9 for k in others):
                    continue
                if segment_occluded(bs, q, scene.boxes) or segment_occluded(q, g, scene.boxes):
                    continue
                path_len = np.linalg.norm(w)
                yield w / path_len, box.reflectivity / path_len**2


# ---------------------------------------------------------------------------
# dataset

@dataclass
class Dataset:
    scene: Scene
    angular: AngularGrid
    aps: np.ndarray  # (L, N)
    rsrp: np.ndarray  # (L, M)
    rsrp_rot: np.ndarray  # (L, M)
    explored: np.ndarray  # sorted grid ids
    unexplored: np.ndarray
    cloud: PointCloud  # world frame
    density: DensityGrid  # bs-centered
    depth_ts: np.ndarray
    depth_targets: np.ndarray  # (N,), NaN where no obstacle is hit
    matrices: dict = field(default_factory=dict)  # tag -> MeasurementMatrix

    @property
    def directions_world(self) -> np.ndarray:
        return self.scene.world_directions(self.angular)

    @property
    def grid_positions_bs(self) -> np.ndarray:
        return self.scene.grid_positions - self.scene.bs_position

    @property
    def depth_mask(self) -> np.ndarray:
        return ~np.isnan(self.depth_targets)


def build_dataset(
    scene: Scene,
    angular: AngularGrid,
    phi: MeasurementMatrix,
    phi_rot: MeasurementMatrix,
    split_fraction: float = 0.8,
    seed: int = 0,
    points_per_m2: float = 40.0,
    voxel_resolution: float = 0.25,
    n_depth_samples: int = 128,
) -> Dataset:
    """Ground-truth spectra, beam powers under both matrices, a seeded
    explored/unexplored split, and depth targets on the render sample grid."""
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must be in (0, 1)")
    n_grids = scene.n_grids
    aps = np.stack([ground_truth_aps(scene, p, angular) for p in scene.grid_positions])
    rsrp = aps @ phi.phi.T
    rsrp_rot = aps @ phi_rot.phi.T

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_grids)
    n_explored = int(round(split_fraction * n_grids))
    explored = np.sort(perm[:n_explored])
    unexplored = np.sort(perm[n_explored:])

    cloud = scene_point_cloud(scene, points_per_m2)
    bs_cloud = translate_to_bs(cloud, scene.bs_position)
    spec = VoxelSpec(
        -scene.bs_position,
        np.full(3, voxel_resolution),
        tuple(int(d) for d in np.ceil(scene.extent / voxel_resolution)),
    )
    density = voxelize(bs_cloud, spec)

    t_max = scene.bounding_radius()
    depth_ts = np.linspace(0.0, t_max, n_depth_samples)
    depth_targets = first_obstacle_depths(density, scene.world_directions(angular), depth_ts)

    return Dataset(
        scene, angular, aps, rsrp, rsrp_rot, explored, unexplored,
        cloud, density, depth_ts, depth_targets,
        matrices={"base": phi, "rotated": phi_rot},
    )


# ---------------------------------------------------------------------------
# directory layout

def save_dataset(dataset: Dataset, out_dir) -> list[str]:
    """Write the documented directory layout; returns relative file names."""
    from pathlib import Path

    from . import container
    from .arrays import measurement_to_bytes
    from .pointcloud import density_to_bytes

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = dataset.scene
    scene_doc = {
        "extent": scene.extent.tolist(),
        "bs_position": scene.bs_position.tolist(),
        "seed": scene.seed,
        "mount": scene.mount.tolist(),
        "boxes": [
            {"mins": b.mins.tolist(), "maxs": b.maxs.tolist(), "reflectivity": b.reflectivity}
            for b in scene.boxes
        ],
        "grid_positions": scene.grid_positions.tolist(),
        "angular": {"n_tilt": dataset.angular.n_tilt, "n_azimuth": dataset.angular.n_azimuth},
    }
    files = {}
    files["scene.json"] = json.dumps(scene_doc, sort_keys=True, indent=1).encode()
    files["points.xyz"] = "\n".join(
        ",".join(repr(float(c)) for c in row) for row in dataset.cloud.points
    ).encode() + b"\n"
    files["aps.bin"] = container.array_to_bytes(dataset.aps)
    files["rsrp.bin"] = container.array_to_bytes(dataset.rsrp)
    files["rsrp_rot.bin"] = container.array_to_bytes(dataset.rsrp_rot)
    files["phi.bin"] = measurement_to_bytes(dataset.matrices["base"])
    files["phi_rot.bin"] = measurement_to_bytes(dataset.matrices["rotated"])
    files["density.bin"] = density_to_bytes(dataset.density)
    files["depth_ts.bin"] = container.array_to_bytes(dataset.depth_ts)
    files["depth_targets.bin"] = container.array_to_bytes(dataset.depth_targets)
    split_lines = ["grid_id,region"]
    region = {int(i): "explored" for i in dataset.explored}
    region.update({int(i): "unexplored" for i in dataset.unexplored})
    for i in sorted(region):
        split_lines.append(f"{i},{region[i]}")
    files["split.csv"] = ("\n".join(split_lines) + "\n").encode()
    for name, data in files.items():
        (out / name).write_bytes(data)
    return sorted(files)


def load_dataset(in_dir) -> Dataset:
    from pathlib import Path

    from . import container
    from .arrays import measurement_from_bytes
    from .pointcloud import density_from_bytes, load_point_cloud

    src = Path(in_dir)
    doc = json.loads((src / "scene.json").read_text())
    scene = Scene(
        np.array(doc["extent"]),
        np.array(doc["bs_position"]),
        [Box(np.array(b["mins"]), np.array(b["maxs"]), b["reflectivity"]) for b in doc["boxes"]],
        np.array(doc["grid_positions"]),
        doc["seed"],
        np.array(doc["mount"]),
    )
    angular = build_angular_grid(doc["angular"]["n_tilt"], doc["angular"]["n_azimuth"])
    split_rows = (src / "split.csv").read_text().strip().splitlines()[1:]
    explored = np.array(sorted(int(r.split(",")[0]) for r in split_rows if r.endswith("explored") and not r.endswith("unexplored")))
    unexplored = np.array(sorted(int(r.split(",")[0]) for r in split_rows if r.endswith("unexplored")))
    return Dataset(
        scene,
        angular,
        container.load_array(src / "aps.bin"),
        container.load_array(src / "rsrp.bin"),
        container.load_array(src / "rsrp_rot.bin"),
        explored,
        unexplored,
        load_point_cloud((src / "points.xyz").read_bytes(), "xyz-csv"),
        density_from_bytes((src / "density.bin").read_bytes()),
        container.load_array(src / "depth_ts.bin"),
        container.load_array(src / "depth_targets.bin"),
        matrices={
            "base": measurement_from_bytes((src / "phi.bin").read_bytes()),
            "rotated": measurement_from_bytes((src / "phi_rot.bin").read_bytes()),
        },
    )
