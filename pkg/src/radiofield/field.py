"""Dual-branch neural field over rays from the base station.

The attenuation branch maps (encoded voxel position, encoded point-count
feature) through a residual MLP to a nonnegative interaction density
``sigma`` (softplus head) plus a feature vector. The radiance branch maps
(encoded voxel position, encoded target-grid position, attenuation
feature) through a plain MLP to real spherical-harmonics amplitude
coefficients ``tau`` and a phase; the emitted complex signal along a unit
direction ``mu`` is ``sh(tau, mu) * exp(1j * phase)``.

All parameters live in one flat float64 vector with a fixed layout, and
reverse-mode gradients are computed in that layout by hand; a finite
difference oracle in the tests pins them down.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from . import container
from .errors import ParseError

SIGMA_BIAS_INIT = -4.0  # keeps rays mostly transparent at initialization


# ---------------------------------------------------------------------------
# positional encoding

@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal encoding with frequencies base**1 .. base**order."""

    order: int
    base: float = float(np.pi)


def positional_encode(x, cfg: EncodingConfig) -> np.ndarray:
    """Per input scalar emit [sin(f_v x), cos(f_v x)] for f_v = base**v.

    Scalars are laid out input-major, frequencies minor, sin before cos, so
    a (B, k) input becomes (B, 2 * order * k).
    """
    if not np.all(np.isfinite(x)):
        raise ValueError("positional encoding requires finite inputs")
    return _encode(np.asarray(x, dtype=np.float64), cfg.order, cfg.base)


def _encode(x: np.ndarray, order: int, base: float = float(np.pi)) -> np.ndarray:
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    freqs = base ** np.arange(1, order + 1)
    ang = x2[:, :, None] * freqs[None, None, :]  # (B, k, V)
    out = np.empty(x2.shape + (2 * order,))
    out[:, :, 0::2] = np.sin(ang)
    out[:, :, 1::2] = np.cos(ang)
    out = out.reshape(x2.shape[0], -1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# real spherical harmonics (community normalization, degrees 0..4)

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = [1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396]
_C3 = [-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435]
_C4 = [2.5033429417967046, -1.7701307697799304, 0.9461746957575601,
       -0.6690465435572892, 0.10578554691520431, -0.6690465435572892,
       0.47308734787878004, -1.7701307697799304, 0.6258357354491761]


def sh_basis(directions: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the (degree + 1)**2 real SH basis functions at unit vectors."""
    if not 0 <= degree <= 4:
        raise ValueError("supported SH degrees are 0..4")
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = d.shape[0]
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = _C0
    if degree >= 1:
        x, y, z = d[:, 0], d[:, 1], d[:, 2]
        out[:, 1] = -_C1 * y
        out[:, 2] = _C1 * z
        out[:, 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[:, 4] = _C2[0] * xy
        out[:, 5] = _C2[1] * yz
        out[:, 6] = _C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = _C2[3] * xz
        out[:, 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = _C3[0] * y * (3 * xx - yy)
        out[:, 10] = _C3[1] * xy * z
        out[:, 11] = _C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = _C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = _C3[5] * z * (xx - yy)
        out[:, 15] = _C3[6] * x * (xx - 3 * yy)
    if degree >= 4:
        out[:, 16] = _C4[0] * xy * (xx - yy)
        out[:, 17] = _C4[1] * yz * (3 * xx - yy)
        out[:, 18] = _C4[2] * xy * (7 * zz - 1)
        out[:, 19] = _C4[3] * yz * (7 * zz - 3)
        out[:, 20] = _C4[4] * (zz * (35 * zz - 30) + 3)
        out[:, 21] = _C4[5] * xz * (7 * zz - 3)
        out[:, 22] = _C4[6] * (xx - yy) * (7 * zz - 1)
        out[:, 23] = _C4[7] * xz * (xx - 3 * yy)
        out[:, 24] = _C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy))
    return out


def sh_eval(coeffs, direction, degree: int):
    """Sum of coeffs times the SH basis at a unit direction."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n_expected = (degree + 1) ** 2
    if coeffs.shape[-1] != n_expected:
        raise ValueError(f"expected {n_expected} coefficients, got {coeffs.shape[-1]}")
    basis = sh_basis(direction, degree)
    if coeffs.ndim == 1:
        return float(basis[0] @ coeffs)
    return np.einsum("bi,bi->b", basis, coeffs)


# ---------------------------------------------------------------------------
# architecture and parameter layout

@dataclass(frozen=True)
class FieldArch:
    """Layer sizes and encoding orders; fully determines the flat layout."""

    enc_order_pos: int = 10
    enc_order_density: int = 4
    width: int = 128
    n_atten_layers: int = 4
    n_rad_layers: int = 3
    skip_layer: int = 3  # attenuation layer that re-reads the encoded input
    sh_degree: int = 2

    @property
    def pos_dim(self) -> int:
        return 6 * self.enc_order_pos

    @property
    def density_dim(self) -> int:
        return 2 * self.enc_order_density

    @property
    def atten_in(self) -> int:
        return self.pos_dim + self.density_dim

    @property
    def rad_in(self) -> int:
        return 2 * self.pos_dim + self.width

    @property
    def n_sh(self) -> int:
        return (self.sh_degree + 1) ** 2


def param_layout(arch: FieldArch) -> list[tuple[str, tuple[int, ...], int, int]]:
    """Deterministic (name, shape, start, end) for every parameter block."""
    entries = []
    offset = 0

    def add(name, shape):
        nonlocal offset
        size = int(np.prod(shape))
        entries.append((name, shape, offset, offset + size))
        offset += size

    w = arch.width
    for i in range(1, arch.n_atten_layers + 1):
        fan_in = arch.atten_in if i == 1 else w
        if i == arch.skip_layer and i > 1:
            fan_in += arch.atten_in
        add(f"a{i}.W", (w, fan_in))
        add(f"a{i}.b", (w,))
    add("sigma.W", (1, w))
    add("sigma.b", (1,))
    for i in range(1, arch.n_rad_layers + 1):
        fan_in = arch.rad_in if i == 1 else w
        add(f"r{i}.W", (w, fan_in))
        add(f"r{i}.b", (w,))
    add("sh.W", (arch.n_sh, w))
    add("sh.b", (arch.n_sh,))
    add("phase.W", (1, w))
    add("phase.b", (1,))
    return entries


def n_params(arch: FieldArch) -> int:
    return param_layout(arch)[-1][3]


class FieldParams:
    """Flat parameter vector plus named views into it.

    The views share memory with ``theta``: in-place optimizer updates on the
    flat vector are visible through every layer matrix.
    """

    def __init__(self, arch: FieldArch, theta: np.ndarray, seed: int = 0):
        expected = n_params(arch)
        if theta.shape != (expected,):
            raise ValueError(f"theta must have shape ({expected},), got {theta.shape}")
        self.arch = arch
        self.seed = int(seed)
        self.theta = theta
        self.views = make_views(arch, theta)

    @property
    def size(self) -> int:
        return self.theta.size

    def copy(self) -> "FieldParams":
        return FieldParams(self.arch, self.theta.copy(), self.seed)


def make_views(arch: FieldArch, flat: np.ndarray) -> dict[str, np.ndarray]:
    return {
        name: flat[start:end].reshape(shape)
        for name, shape, start, end in param_layout(arch)
    }


def flatten_views(arch: FieldArch, views: dict[str, np.ndarray]) -> np.ndarray:
    flat = np.empty(n_params(arch))
    for name, shape, start, end in param_layout(arch):
        flat[start:end] = np.asarray(views[name]).reshape(-1)
    return flat


def init_params(arch: FieldArch, seed: int, sigma_bias: float = SIGMA_BIAS_INIT,
                head_scale: float = 1.0) -> FieldParams:
    """He-style uniform fan-in init; biases zero except the sigma head.

    ``sigma_bias`` sets the initial interaction density softly via softplus;
    ``head_scale`` shrinks the output heads so the rendered spectrum starts
    near zero instead of order one (useful on small training budgets).
    """
    rng = np.random.default_rng(seed)
    theta = np.zeros(n_params(arch))
    views = make_views(arch, theta)
    for name, shape, _, _ in param_layout(arch):
        if name.endswith(".W"):
            limit = np.sqrt(6.0 / shape[1])
            views[name][...] = rng.uniform(-limit, limit, size=shape)
            if name in ("sh.W", "phase.W"):
                views[name] *= head_scale
    views["sigma.b"][...] = sigma_bias
    return FieldParams(arch, theta, seed)


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class FieldOutput:
    sigma: np.ndarray
    signal: np.ndarray
    sh_coeffs: np.ndarray
    phase: np.ndarray


@dataclass
class AttenCache:
    enc_in: np.ndarray
    pre: list  # pre-activation z_i per layer
    hidden: list  # post-residual h_i per layer
    z_sigma: np.ndarray
    sigma: np.ndarray
    feat: np.ndarray


@dataclass
class RadCache:
    enc_pos: np.ndarray
    enc_grid: np.ndarray  # (B, pos_dim) or a single broadcast row (1, pos_dim)
    feat: np.ndarray
    pre: list
    hidden: list
    tau: np.ndarray
    phase: np.ndarray
    basis: np.ndarray
    amp: np.ndarray
    signal: np.ndarray = dc_field(default=None)


def _softplus(z):
    return np.logaddexp(0.0, z)


def atten_forward(params: FieldParams, enc_pos: np.ndarray, enc_density: np.ndarray) -> AttenCache:
    """Residual MLP branch: sigma (via softplus) and the feature vector."""
    arch, v = params.arch, params.views
    e = np.concatenate([enc_pos, enc_density], axis=1)
    pre, hidden = [], []
    h = None
    for i in range(1, arch.n_atten_layers + 1):
        inp = e if i == 1 else (np.concatenate([h, e], axis=1) if i == arch.skip_layer else h)
        z = inp @ v[f"a{i}.W"].T + v[f"a{i}.b"]
        a = np.maximum(z, 0.0)
        h = a if i == 1 else a + h
        pre.append(z)
        hidden.append(h)
    z_sigma = (h @ v["sigma.W"].T + v["sigma.b"])[:, 0]
    return AttenCache(e, pre, hidden, z_sigma, _softplus(z_sigma), h)


def atten_backward(params: FieldParams, cache: AttenCache, d_sigma: np.ndarray,
                   d_feat: np.ndarray | None, grad_views: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients for upstream (d sigma, d feature)."""
    arch, v = params.arch, params.views
    dz_sigma = d_sigma * expit(cache.z_sigma)
    grad_views["sigma.W"] += dz_sigma[None, :] @ cache.hidden[-1]
    grad_views["sigma.b"] += dz_sigma.sum(keepdims=True)
    dh = dz_sigma[:, None] * v["sigma.W"][0][None, :]
    if d_feat is not None:
        dh = dh + d_feat
    for i in range(arch.n_atten_layers, 0, -1):
        dz = dh * (cache.pre[i - 1] > 0)
        if i == 1:
            inp = cache.enc_in
        elif i == arch.skip_layer:
            inp = np.concatenate([cache.hidden[i - 2], cache.enc_in], axis=1)
        else:
            inp = cache.hidden[i - 2]
        grad_views[f"a{i}.W"] += dz.T @ inp
        grad_views[f"a{i}.b"] += dz.sum(axis=0)
        if i > 1:
            dinp = dz @ v[f"a{i}.W"]
            dh = dinp[:, : arch.width] + dh  # residual passthrough
    # gradients w.r.t. the encodings are not needed (inputs are data)


def _rad_w1_slices(arch: FieldArch):
    p = arch.pos_dim
    return slice(0, p), slice(p, 2 * p), slice(2 * p, 2 * p + arch.width)


def rad_first_layer_base(params: FieldParams, enc_pos: np.ndarray, feat: np.ndarray) -> np.ndarray:
    """Grid-independent part of the radiance first layer, reusable across
    many target grids that share the same samples."""
    arch, v = params.arch, params.views
    s_pos, _, s_feat = _rad_w1_slices(arch)
    w1 = v["r1.W"]
    return enc_pos @ w1[:, s_pos].T + feat @ w1[:, s_feat].T + v["r1.b"]


def rad_forward(params: FieldParams, enc_pos: np.ndarray, enc_grid: np.ndarray,
                feat: np.ndarray, mu: np.ndarray | None = None,
                mu_basis: np.ndarray | None = None,
                z1_base: np.ndarray | None = None) -> RadCache:
    """Plain MLP branch: SH amplitude coefficients, phase, complex signal.

    The first layer is applied factor-wise so a single broadcast grid
    encoding row (1, pos_dim) avoids a full-width matmul per sample.
    """
    arch, v = params.arch, params.views
    s_pos, s_grid, s_feat = _rad_w1_slices(arch)
    w1 = v["r1.W"]
    if z1_base is None:
        z1_base = enc_pos @ w1[:, s_pos].T + feat @ w1[:, s_feat].T + v["r1.b"]
    z = z1_base + enc_grid @ w1[:, s_grid].T
    pre, hidden = [z], [np.maximum(z, 0.0)]
    h = hidden[0]
    for i in range(2, arch.n_rad_layers + 1):
        z = h @ v[f"r{i}.W"].T + v[f"r{i}.b"]
        h = np.maximum(z, 0.0)
        pre.append(z)
        hidden.append(h)
    tau = h @ v["sh.W"].T + v["sh.b"]
    phase = (h @ v["phase.W"].T + v["phase.b"])[:, 0]
    basis = mu_basis if mu_basis is not None else sh_basis(mu, arch.sh_degree)
    amp = np.einsum("bi,bi->b", basis, tau)
    cache = RadCache(enc_pos, enc_grid, feat, pre, hidden, tau, phase, basis, amp)
    cache.signal = amp * np.exp(1j * phase)
    return cache


def rad_backward(params: FieldParams, cache: RadCache, d_re: np.ndarray, d_im: np.ndarray,
                 grad_views: dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate gradients for upstream (d Re S, d Im S); returns d feature."""
    arch, v = params.arch, params.views
    cos_p, sin_p = np.cos(cache.phase), np.sin(cache.phase)
    d_amp = d_re * cos_p + d_im * sin_p
    d_phase = cache.amp * (d_im * cos_p - d_re * sin_p)
    d_tau = d_amp[:, None] * cache.basis
    grad_views["sh.W"] += d_tau.T @ cache.hidden[-1]
    grad_views["sh.b"] += d_tau.sum(axis=0)
    grad_views["phase.W"] += d_phase[None, :] @ cache.hidden[-1]
    grad_views["phase.b"] += d_phase.sum(keepdims=True)
    dh = d_tau @ v["sh.W"] + d_phase[:, None] * v["phase.W"][0][None, :]
    for i in range(arch.n_rad_layers, 1, -1):
        dz = dh * (cache.pre[i - 1] > 0)
        grad_views[f"r{i}.W"] += dz.T @ cache.hidden[i - 2]
        grad_views[f"r{i}.b"] += dz.sum(axis=0)
        dh = dz @ v[f"r{i}.W"]
    dz = dh * (cache.pre[0] > 0)
    s_pos, s_grid, s_feat = _rad_w1_slices(arch)
    w1_grad = grad_views["r1.W"]
    w1_grad[:, s_pos] += dz.T @ cache.enc_pos
    if cache.enc_grid.shape[0] == 1:
        w1_grad[:, s_grid] += np.outer(dz.sum(axis=0), cache.enc_grid[0])
    else:
        w1_grad[:, s_grid] += dz.T @ cache.enc_grid
    w1_grad[:, s_feat] += dz.T @ cache.feat
    grad_views["r1.b"] += dz.sum(axis=0)
    return dz @ params.views["r1.W"][:, s_feat]


def _check_directions(direction: np.ndarray) -> np.ndarray:
    mu = np.atleast_2d(np.asarray(direction, dtype=np.float64))
    norms = np.linalg.norm(mu, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("directions must be unit vectors")
    return mu


def encode_inputs(arch: FieldArch, p_voxel, density_feat, p_grid):
    p_voxel = np.atleast_2d(np.asarray(p_voxel, dtype=np.float64))
    p_grid = np.atleast_2d(np.asarray(p_grid, dtype=np.float64))
    feat = np.atleast_1d(np.asarray(density_feat, dtype=np.float64))
    if p_grid.shape[0] == 1 and p_voxel.shape[0] > 1:
        p_grid = np.broadcast_to(p_grid, p_voxel.shape)
    enc_pos = _encode(p_voxel, arch.enc_order_pos)
    enc_rho = _encode(feat[:, None], arch.enc_order_density)
    enc_grid = _encode(p_grid, arch.enc_order_pos)
    return enc_pos, enc_rho, enc_grid


def forward(params: FieldParams, p_voxel, density_feat, p_grid, direction) -> FieldOutput:
    """Evaluate the field; positions must already be normalized to [-1, 1]."""
    mu = _check_directions(direction)
    enc_pos, enc_rho, enc_grid = encode_inputs(params.arch, p_voxel, density_feat, p_grid)
    ac = atten_forward(params, enc_pos, enc_rho)
    rc = rad_forward(params, enc_pos, enc_grid, ac.feat, mu)
    return FieldOutput(ac.sigma, rc.signal, rc.tau, rc.phase)


def backward(params: FieldParams, p_voxel, density_feat, p_grid, direction,
             d_sigma, d_signal_re, d_signal_im) -> np.ndarray:
    """Exact reverse-mode gradient of (sigma, Re S, Im S) with the given
    upstream weights, as a flat vector in parameter-layout order."""
    mu = _check_directions(direction)
    enc_pos, enc_rho, enc_grid = encode_inputs(params.arch, p_voxel, density_feat, p_grid)
    batch = enc_pos.shape[0]
    d_sigma = np.broadcast_to(np.asarray(d_sigma, dtype=np.float64), (batch,))
    d_re = np.broadcast_to(np.asarray(d_signal_re, dtype=np.float64), (batch,))
    d_im = np.broadcast_to(np.asarray(d_signal_im, dtype=np.float64), (batch,))
    ac = atten_forward(params, enc_pos, enc_rho)
    rc = rad_forward(params, enc_pos, enc_grid, ac.feat, mu)
    grad = np.zeros(params.size)
    grad_views = make_views(params.arch, grad)
    d_feat = rad_backward(params, rc, d_re, d_im, grad_views)
    atten_backward(params, ac, d_sigma, d_feat, grad_views)
    return grad


# ---------------------------------------------------------------------------
# checkpoints

def params_to_bytes(params: FieldParams, optimizer_state: dict | None = None) -> bytes:
    buf = io.BytesIO()
    container.write_header(buf, container.KIND_CHECKPOINT)
    a = params.arch
    for value in (a.enc_order_pos, a.enc_order_density, a.width,
                  a.n_atten_layers, a.n_rad_layers, a.skip_layer, a.sh_degree):
        container.write_u32(buf, value)
    container.write_u64(buf, params.seed)
    container.write_u64(buf, params.size)
    container.write_array(buf, params.theta)
    has_opt = optimizer_state is not None
    container.write_u8(buf, int(has_opt))
    if has_opt:
        container.write_u64(buf, optimizer_state["step"])
        container.write_array(buf, optimizer_state["m"])
        container.write_array(buf, optimizer_state["v"])
    return buf.getvalue()


def params_from_bytes(data: bytes, expect_arch: FieldArch | None = None):
    buf = io.BytesIO(data)
    container.read_header(buf, container.KIND_CHECKPOINT)
    fields = [container.read_u32(buf) for _ in range(7)]
    arch = FieldArch(*fields)
    seed = container.read_u64(buf)
    size = container.read_u64(buf)
    if expect_arch is not None and arch != expect_arch:
        raise ParseError(f"checkpoint architecture {arch} != requested {expect_arch}")
    theta = container.read_array(buf)
    if theta.shape != (size,) or size != n_params(arch):
        raise ParseError("checkpoint parameter count does not match its header")
    params = FieldParams(arch, theta, seed)
    optimizer_state = None
    if container.read_u8(buf):
        optimizer_state = {
            "step": container.read_u64(buf),
            "m": container.read_array(buf),
            "v": container.read_array(buf),
        }
    return params, optimizer_state


def save_params(path, params: FieldParams, optimizer_state: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params, optimizer_state))


def load_params(path, expect_arch: FieldArch | None = None):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read(), expect_arch)
