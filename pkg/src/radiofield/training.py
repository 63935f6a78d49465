"""Self-supervised training of the field on beam powers plus depth targets.

Each step renders a seeded batch of explored grids over a seeded ray
subset with fresh stratified sampling, forms

    radio:    sum_l ||y_l - phi x_l||^2 + lambda1 ||x_l||_1
    env:      lambda2 * sum_n (z_n - zhat_n)^2     (rays with a valid target)

and applies one adaptive-moment update to the flat parameter vector.
When rays are subsampled, the subset terms are scaled by N / |subset| so
they estimate the full-ray objective. Steps are pure functions of
(seed, step index), which makes runs bitwise reproducible and checkpoint
resumes exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arrays import MeasurementMatrix, RSRPRecord
from .errors import TrainingDivergedError
from .field import FieldArch, FieldParams, init_params, params_from_bytes, params_to_bytes
from .pointcloud import DensityGrid
from .render import RenderConfig, make_sampling, render_backward, render_grids


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1e-4
    lambda2: float = 0.1
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    batch_grids: int = 4
    steps: int = 1000
    seed: int = 0
    sm_mode: bool = False  # radio-only ablation: depth supervision off
    n_sub_rays: int = 256  # 0 renders every ray each step
    train_knots: int = 65
    sample_mode: str = "start"
    checkpoint_every: int = 0
    rsrp_scale: float = 1.0  # beam powers are fit at y * rsrp_scale
    sigma_bias: float = -4.0
    head_scale: float = 1.0
    arch: FieldArch = field(default_factory=FieldArch)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.rsrp_scale <= 0:
            raise ValueError("rsrp_scale must be positive")

    @property
    def effective_lambda2(self) -> float:
        return 0.0 if self.sm_mode else self.lambda2

    def lr_at(self, step: int) -> float:
        frac = step / max(self.steps - 1, 1)
        return self.learning_rate * (self.lr_final / self.learning_rate) ** frac


def auto_rsrp_scale(train_set: "TrainingSet") -> float:
    """Scale that brings the mean explored beam power to 1, so the rendered
    spectrum starts within a few octaves of its target magnitude."""
    values = np.concatenate([rec.y for rec in train_set.records])
    mean = float(values.mean())
    return 1.0 / mean if mean > 0 else 1.0


@dataclass
class LossBreakdown:
    radio_fit: float
    sparsity: float
    env: float
    total: float


@dataclass
class TrainingSet:
    """Explored beam-power records plus the shared environment context."""

    records: list[RSRPRecord]
    grid_positions: dict[int, np.ndarray]  # grid id -> bs-centered position
    matrices: dict[str, MeasurementMatrix]
    density: DensityGrid | None
    directions: np.ndarray  # (N, 3) world-frame ray directions
    depth_targets: np.ndarray  # (N,), NaN marks rays with no obstacle
    t_max: float

    def __post_init__(self):
        for rec in self.records:
            if rec.grid_id not in self.grid_positions:
                raise ValueError(f"record {rec.grid_id} has no grid position")
            if rec.matrix_tag not in self.matrices:
                raise ValueError(f"matrix tag {rec.matrix_tag!r} is not stored")
        if self.depth_targets.shape[0] != self.directions.shape[0]:
            raise ValueError("depth targets and directions disagree on ray count")

    @classmethod
    def from_dataset(cls, dataset) -> "TrainingSet":
        records = [
            RSRPRecord(int(l), dataset.rsrp[l], "base") for l in dataset.explored
        ]
        positions = {
            int(l): dataset.grid_positions_bs[l] for l in range(dataset.scene.n_grids)
        }
        return cls(
            records,
            positions,
            {"base": dataset.matrices["base"]},
            dataset.density,
            dataset.directions_world,
            dataset.depth_targets,
            dataset.scene.bounding_radius(),
        )


def radio_loss(phi: MeasurementMatrix, y: np.ndarray, x_hat: np.ndarray, lambda1: float):
    """Squared beam-power misfit plus the L1 sparsity term.

    Returns (value, gradient w.r.t. x_hat); since the rendered spectrum is
    nonnegative by construction, the L1 gradient is exactly lambda1.
    """
    mat = phi.phi
    resid = y - mat @ x_hat
    value = float(resid @ resid) + lambda1 * float(np.sum(x_hat))
    grad = -2.0 * (mat.T @ resid) + lambda1
    return value, grad


def env_loss(z: np.ndarray, z_hat: np.ndarray, mask: np.ndarray):
    """Masked squared depth error; rays without a target contribute nothing."""
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ValueError("depth arrays must share a shape")
    diff = np.where(mask, z_hat - z, 0.0)
    return float(diff @ diff), 2.0 * diff


class Adam:
    """Adaptive moment estimation on a flat parameter vector."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        theta -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_state(cls, state: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> "Adam":
        adam = cls(state["m"].size, beta1, beta2, eps)
        adam.m = state["m"].copy()
        adam.v = state["v"].copy()
        adam.step = int(state["step"])
        return adam


def _step_rng(seed: int, step_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step_index]))


def train_step(
    params: FieldParams,
    adam: Adam,
    train_set: TrainingSet,
    cfg: TrainConfig,
    step_index: int,
    render_cfg: RenderConfig | None = None,
) -> LossBreakdown:
    """One optimizer update; deterministic given (cfg.seed, step_index)."""
    render_cfg = render_cfg or RenderConfig(
        sample_mode=cfg.sample_mode, scene_scale=train_set.t_max
    )
    rng = _step_rng(cfg.seed, step_index)
    n_records = len(train_set.records)
    batch_ids = rng.choice(n_records, size=min(cfg.batch_grids, n_records), replace=False)
    n_rays = train_set.directions.shape[0]
    if cfg.n_sub_rays and cfg.n_sub_rays < n_rays:
        ray_idx = np.sort(rng.choice(n_rays, size=cfg.n_sub_rays, replace=False))
    else:
        ray_idx = np.arange(n_rays)
    scale = n_rays / ray_idx.size
    sampling = make_sampling(
        train_set.t_max, cfg.train_knots, mode="stratified",
        seed=int(rng.integers(np.iinfo(np.int64).max)),
    )

    records = [train_set.records[i] for i in batch_ids]
    p_grids = np.stack([train_set.grid_positions[r.grid_id] for r in records])
    dirs = train_set.directions[ray_idx]
    aps, gains, depths, cache = render_grids(
        params, train_set.density, dirs, p_grids, sampling, render_cfg, retain=True
    )

    radio_fit = 0.0
    sparsity = 0.0
    d_aps = np.empty_like(aps)
    for b, rec in enumerate(records):
        phi_cols = train_set.matrices[rec.matrix_tag].phi[:, ray_idx]
        resid = cfg.rsrp_scale * rec.y - scale * (phi_cols @ aps[b])
        radio_fit += float(resid @ resid)
        sparsity += cfg.lambda1 * scale * float(np.sum(aps[b]))
        d_aps[b] = scale * (-2.0 * (phi_cols.T @ resid) + cfg.lambda1)

    lam2 = cfg.effective_lambda2
    z_sub = train_set.depth_targets[ray_idx]
    mask = ~np.isnan(z_sub)
    env_raw, env_grad = env_loss(np.where(mask, z_sub, 0.0), depths, mask)
    env = lam2 * scale * env_raw
    d_depths = lam2 * scale * env_grad

    total = radio_fit + sparsity + env
    if not np.isfinite(total):
        raise TrainingDivergedError(step_index)
    grad = render_backward(params, cache, d_aps, d_depths)
    adam.update(params.theta, grad, cfg.lr_at(step_index))
    return LossBreakdown(radio_fit, sparsity, env, total)


def fit(
    train_set: TrainingSet,
    cfg: TrainConfig,
    params: FieldParams | None = None,
    adam: Adam | None = None,
    start_step: int = 0,
    checkpoint_dir=None,
    render_cfg: RenderConfig | None = None,
):
    """Run train_step for cfg.steps, optionally checkpointing; returns the
    final parameters and the per-step loss history."""
    if params is None:
        params = init_params(cfg.arch, cfg.seed, sigma_bias=cfg.sigma_bias,
                             head_scale=cfg.head_scale)
    if adam is None:
        adam = Adam(params.size)
    history = []
    for step in range(start_step, cfg.steps):
        history.append(train_step(params, adam, train_set, cfg, step, render_cfg))
        if checkpoint_dir is not None and cfg.checkpoint_every:
            if (step + 1) % cfg.checkpoint_every == 0:
                _write_checkpoint(checkpoint_dir, step + 1, params, adam)
    return params, history


def _write_checkpoint(checkpoint_dir, step: int, params: FieldParams, adam: Adam) -> None:
    from pathlib import Path

    path = Path(checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / f"step_{step:06d}.ckpt").write_bytes(params_to_bytes(params, adam.state()))


def load_checkpoint(path, expect_arch: FieldArch | None = None):
    """Returns (params, adam, next_step) from a training checkpoint."""
    with open(path, "rb") as fh:
        params, state = params_from_bytes(fh.read(), expect_arch)
    if state is None:
        return params, Adam(params.size), 0
    return params, Adam.from_state(state), int(state["step"])


def history_to_csv(history: list[LossBreakdown]) -> str:
    lines = ["step,radio_fit,sparsity,env,total"]
    for i, h in enumerate(history):
        lines.append(f"{i},{h.radio_fit!r},{h.sparsity!r},{h.env!r},{h.total!r}")
    return "\n".join(lines) + "\n"
