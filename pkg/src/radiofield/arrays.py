"""Planar-array forward model: angular grid, steering vectors, beam codebooks,
measurement matrices, and expected beam powers.

The front hemisphere is discretized into ``n_tilt * n_azimuth`` departure
angles; a measurement matrix maps the angular power spectrum (APS) of a
location grid to the expected per-beam received power through
``phi[m, n] = |w_m^H s(theta_n, phi_n)|^2``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ParseError


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform planar array: ``n_x * n_y`` elements, spacings in wavelengths."""

    n_x: int = 4
    n_y: int = 4
    d_x: float = 0.5
    d_y: float = 0.5
    wavelength: float = 1.0
    tx_power: float = 1.0

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError("antenna counts must be >= 1")
        if self.d_x <= 0 or self.d_y <= 0 or self.wavelength <= 0:
            raise ValueError("spacings and wavelength must be positive")

    @property
    def n_elements(self) -> int:
        return self.n_x * self.n_y


@dataclass(frozen=True)
class AngularGrid:
    """Uniform (tilt, azimuth) discretization of the front hemisphere.

    Tilt spans [0, 90) degrees, azimuth [0, 360), both cell-left sampled.
    Index ordering is row-major tilt-then-azimuth: ``n = i * n_azimuth + j``.
    This ordering is the indexing contract for every APS vector.
    """

    n_tilt: int
    n_azimuth: int
    tilt_step_deg: float
    azimuth_step_deg: float
    angles: np.ndarray = field(repr=False)  # (N, 2) radians
    directions: np.ndarray = field(repr=False)  # (N, 3) unit vectors

    @property
    def n_angles(self) -> int:
        return self.n_tilt * self.n_azimuth

    def flat_index(self, i_tilt, i_azimuth):
        return np.asarray(i_tilt) * self.n_azimuth + np.asarray(i_azimuth)


def build_angular_grid(n_tilt: int, n_azimuth: int) -> AngularGrid:
    """Build the hemisphere grid; default (18, 90) gives 5/4 degree steps."""
    if n_tilt < 1 or n_azimuth < 1:
        raise ValueError("angle counts must be >= 1")
    tilt_step = 90.0 / n_tilt
    azimuth_step = 360.0 / n_azimuth
    tilts = np.deg2rad(np.arange(n_tilt) * tilt_step)
    azimuths = np.deg2rad(np.arange(n_azimuth) * azimuth_step)
    tt, aa = np.meshgrid(tilts, azimuths, indexing="ij")
    angles = np.column_stack([tt.ravel(), aa.ravel()])
    directions = directions_from_angles(angles[:, 0], angles[:, 1])
    return AngularGrid(n_tilt, n_azimuth, tilt_step, azimuth_step, angles, directions)


def directions_from_angles(theta, phi) -> np.ndarray:
    """Unit vectors [cos(phi) sin(theta), sin(phi) sin(theta), cos(theta)]."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    return np.stack(
        [np.cos(phi) * np.sin(theta), np.sin(phi) * np.sin(theta), np.cos(theta)],
        axis=-1,
    )


def angles_from_direction(direction) -> tuple[float, float]:
    """Inverse of :func:`directions_from_angles`; azimuth wrapped to [0, 2pi)."""
    d = np.asarray(direction, dtype=np.float64)
    theta = float(np.arccos(np.clip(d[..., 2], -1.0, 1.0)))
    phi = float(np.arctan2(d[..., 1], d[..., 0])) % (2.0 * np.pi)
    return theta, phi


def steering_vector(cfg: ArrayConfig, theta: float, phi: float) -> np.ndarray:
    """UPA steering vector s = s_x kron s_y, all entries unit modulus.

    Spacings are in wavelengths, so the per-element phases are
    ``-2 pi k d_x cos(theta) sin(phi)`` along x and ``-2 pi k d_y sin(theta)``
    along y.
    """
    kx = np.arange(cfg.n_x)
    ky = np.arange(cfg.n_y)
    s_x = np.exp(-2j * np.pi * cfg.d_x * np.cos(theta) * np.sin(phi) * kx)
    s_y = np.exp(-2j * np.pi * cfg.d_y * np.sin(theta) * ky)
    return np.kron(s_x, s_y)


def steering_matrix(cfg: ArrayConfig, grid: AngularGrid) -> np.ndarray:
    """All steering vectors of a grid as columns, shape (n_elements, N)."""
    theta = grid.angles[:, 0]
    phi = grid.angles[:, 1]
    kx = np.arange(cfg.n_x)
    ky = np.arange(cfg.n_y)
    s_x = np.exp(-2j * np.pi * cfg.d_x * np.outer(kx, np.cos(theta) * np.sin(phi)))
    s_y = np.exp(-2j * np.pi * cfg.d_y * np.outer(ky, np.sin(theta)))
    # kron along the element axis: s[i * n_y + k, n] = s_x[i, n] * s_y[k, n]
    return (s_x[:, None, :] * s_y[None, :, :]).reshape(cfg.n_elements, grid.n_angles)


@dataclass(frozen=True)
class Codebook:
    """Beam codebook; columns are complex weight vectors of length n_elements."""

    beams: np.ndarray  # (n_elements, M)
    kind: str = "custom"

    @property
    def n_beams(self) -> int:
        return self.beams.shape[1]


def dft_codebook(cfg: ArrayConfig, n_beams: int) -> Codebook:
    """Subset of the 2D DFT beam matrix.

    The full DFT book enumerates spatial frequency pairs (k_x, k_y) in
    row-major order; ``n_beams`` columns are taken at even index spacing
    starting from 0, so the subset spans the beamspace uniformly.
    """
    n_t = cfg.n_elements
    if not 1 <= n_beams <= n_t:
        raise ValueError(f"need 1 <= n_beams <= {n_t}")
    ix = np.arange(cfg.n_x)
    iy = np.arange(cfg.n_y)
    fx = np.exp(-2j * np.pi * np.outer(ix, ix) / cfg.n_x)
    fy = np.exp(-2j * np.pi * np.outer(iy, iy) / cfg.n_y)
    full = np.kron(fx, fy) / np.sqrt(n_t)  # column k_x * n_y + k_y
    cols = [(i * n_t) // n_beams for i in range(n_beams)]
    return Codebook(np.ascontiguousarray(full[:, cols]), kind="dft-subset")


@dataclass(frozen=True)
class MeasurementMatrix:
    """Nonnegative M x N map from APS to expected beam powers.

    ``rotation`` records the integer (tilt, azimuth) circular shift applied
    to the angular column indexing, if any.
    """

    phi: np.ndarray
    rotation: tuple[int, int] | None = None

    @property
    def n_beams(self) -> int:
        return self.phi.shape[0]

    @property
    def n_angles(self) -> int:
        return self.phi.shape[1]


def build_measurement_matrix(cfg: ArrayConfig, grid: AngularGrid, cb: Codebook) -> MeasurementMatrix:
    """phi[m, n] = tx_power * |w_m^H s_n|^2, dense and entry-wise >= 0."""
    if cb.beams.shape[0] != cfg.n_elements:
        raise ValueError(
            f"codebook rows {cb.beams.shape[0]} != array elements {cfg.n_elements}"
        )
    smat = steering_matrix(cfg, grid)
    proj = cb.beams.conj().T @ smat
    return MeasurementMatrix(cfg.tx_power * np.abs(proj) ** 2)


def rotate_measurement_matrix(
    mm: MeasurementMatrix, grid: AngularGrid, d_theta_deg: float, d_phi_deg: float
) -> MeasurementMatrix:
    """Remap column n to the column of the angle (theta_n + d_theta,
    phi_n + d_phi), circularly in both angular indices.

    The shifts must be integer multiples of the grid steps.
    """
    if mm.n_angles != grid.n_angles:
        raise ValueError("matrix/grid angle counts differ")
    s_t = _steps(d_theta_deg, grid.tilt_step_deg, "tilt")
    s_a = _steps(d_phi_deg, grid.azimuth_step_deg, "azimuth")
    cube = mm.phi.reshape(mm.n_beams, grid.n_tilt, grid.n_azimuth)
    rotated = np.roll(cube, shift=(-s_t, -s_a), axis=(1, 2))
    return MeasurementMatrix(
        np.ascontiguousarray(rotated.reshape(mm.n_beams, grid.n_angles)),
        rotation=(s_t, s_a),
    )


def _steps(delta_deg: float, step_deg: float, axis: str) -> int:
    steps = delta_deg / step_deg
    rounded = int(np.rint(steps))
    if abs(steps - rounded) > 1e-9:
        raise ValueError(
            f"{axis} shift {delta_deg} deg is not a multiple of the {step_deg} deg step"
        )
    return rounded


@dataclass(frozen=True)
class RSRPRecord:
    """Expected per-beam received power for one location grid."""

    grid_id: int
    y: np.ndarray
    matrix_tag: str = "base"


def expected_rsrp(mm: MeasurementMatrix, x: np.ndarray, grid_id: int = 0, matrix_tag: str = "base") -> RSRPRecord:
    """y = phi @ x for a nonnegative APS x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mm.n_angles,):
        raise ValueError(f"APS length {x.shape} != {mm.n_angles}")
    if np.any(x < 0):
        raise ValueError("APS entries must be nonnegative")
    return RSRPRecord(grid_id, mm.phi @ x, matrix_tag)


# ---------------------------------------------------------------------------
# serialization

def measurement_to_bytes(mm: MeasurementMatrix) -> bytes:
    buf = io.BytesIO()
    container.write_header(buf, container.KIND_MEASUREMENT)
    has_rot = mm.rotation is not None
    container.write_u8(buf, int(has_rot))
    container.write_i32(buf, mm.rotation[0] if has_rot else 0)
    container.write_i32(buf, mm.rotation[1] if has_rot else 0)
    container.write_array(buf, mm.phi)
    return buf.getvalue()


def measurement_from_bytes(data: bytes) -> MeasurementMatrix:
    buf = io.BytesIO(data)
    container.read_header(buf, container.KIND_MEASUREMENT)
    has_rot = container.read_u8(buf)
    s_t = container.read_i32(buf)
    s_a = container.read_i32(buf)
    phi = container.read_array(buf)
    if phi.ndim != 2:
        raise ParseError("measurement payload must be 2-D")
    return MeasurementMatrix(phi, rotation=(s_t, s_a) if has_rot else None)


def rsrp_to_bytes(rec: RSRPRecord) -> bytes:
    buf = io.BytesIO()
    container.write_header(buf, container.KIND_RSRP)
    container.write_u32(buf, rec.grid_id)
    tag = rec.matrix_tag.encode("ascii")
    container.write_u8(buf, len(tag))
    buf.write(tag)
    container.write_array(buf, np.asarray(rec.y, dtype=np.float64))
    return buf.getvalue()


def rsrp_from_bytes(data: bytes) -> RSRPRecord:
    buf = io.BytesIO(data)
    container.read_header(buf, container.KIND_RSRP)
    grid_id = container.read_u32(buf)
    tag_len = container.read_u8(buf)
    tag = buf.read(tag_len).decode("ascii")
    y = container.read_array(buf)
    return RSRPRecord(grid_id, y, tag)


def measurement_to_csv(mm: MeasurementMatrix) -> str:
    lines = [",".join(repr(float(v)) for v in row) for row in mm.phi]
    return "\n".join(lines) + "\n"
