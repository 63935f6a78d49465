"""End-to-end evaluation: render spectra for every grid, score sub-tasks,
and run the sparse-recovery baseline."""

from __future__ import annotations

import numpy as np

from .field import FieldParams
from .metrics import Metrics, NoiseConfig, evaluate_subtasks, inject_noise
from .omp import OmpConfig, wnomp_solve
from .render import RenderConfig, make_sampling, render_grids
from .scene import Dataset


def render_all_spectra(
    params: FieldParams,
    dataset: Dataset,
    n_knots: int,
    sample_mode: str = "start",
    grid_ids=None,
    aps_scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-sampling render of the APS for the requested grids.

    Returns ``(x_hat (L, N), depths (N,))``; rows of grids not requested
    are zero. One attenuation pass is shared by all grids. ``aps_scale``
    undoes a training-time beam-power normalization (pass
    ``1 / rsrp_scale``).
    """
    t_max = dataset.scene.bounding_radius()
    sampling = make_sampling(t_max, n_knots)
    cfg = RenderConfig(sample_mode=sample_mode, scene_scale=t_max)
    ids = np.arange(dataset.scene.n_grids) if grid_ids is None else np.asarray(grid_ids)
    p_grids = dataset.grid_positions_bs[ids]
    aps, _, depths, _ = render_grids(
        params, dataset.density, dataset.directions_world, p_grids, sampling, cfg
    )
    x_hat = np.zeros((dataset.scene.n_grids, dataset.angular.n_angles))
    x_hat[ids] = aps_scale * aps
    return x_hat, depths


def model_metrics(
    x_hat: np.ndarray,
    dataset: Dataset,
    noise: NoiseConfig | None = None,
) -> Metrics:
    """Score rendered spectra; with ``noise``, both measurement matrices and
    both beam-power tables are perturbed first (robustness protocol)."""
    if noise is None:
        return evaluate_subtasks(x_hat, dataset)
    noisy = inject_noise(dataset, noise)
    return evaluate_subtasks(
        x_hat, dataset,
        phi=noisy.matrices["base"], phi_rot=noisy.matrices["rotated"],
        rsrp=noisy.rsrp, rsrp_rot=noisy.rsrp_rot,
    )


def wnomp_spectra(
    dataset: Dataset,
    max_atoms: int = 8,
    residual_tol: float = 1e-12,
    rsrp: np.ndarray | None = None,
    phi=None,
    norm_weights: bool = True,
) -> dict[int, np.ndarray]:
    """Per-grid sparse recovery on the explored region from base-matrix
    beam powers; column-norm weighting makes the correlations scale-free."""
    phi = phi or dataset.matrices["base"]
    rsrp = dataset.rsrp if rsrp is None else rsrp
    weights = None
    if norm_weights:
        norms = np.linalg.norm(phi.phi, axis=0)
        weights = np.where(norms > 0, 1.0 / np.maximum(norms, 1e-300), 0.0)
    cfg = OmpConfig(max_atoms=max_atoms, residual_tol=residual_tol, weights=weights)
    out = {}
    for i in dataset.explored:
        out[int(i)] = wnomp_solve(phi, rsrp[i], cfg).coef
    return out


def wnomp_metrics(
    dataset: Dataset,
    max_atoms: int = 8,
    noise: NoiseConfig | None = None,
) -> Metrics:
    """Baseline scores; only sub-task 1 is attemptable from explored data.

    Under noise the baseline both solves and is scored against the
    perturbed data, mirroring a deployment with an imperfect matrix.
    """
    data = dataset if noise is None else inject_noise(dataset, noise)
    x_hat = wnomp_spectra(data, max_atoms=max_atoms)
    return evaluate_subtasks(
        x_hat, dataset, applicable=(1,),
        phi=data.matrices["base"], phi_rot=data.matrices["rotated"],
        rsrp=data.rsrp, rsrp_rot=data.rsrp_rot,
    )
