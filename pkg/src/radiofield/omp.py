"""Weighted nonnegative orthogonal matching pursuit.

Greedy sparse recovery of a nonnegative APS from ``y ~ phi @ x``: pick the
unselected atom with the largest (optionally weighted) positive
correlation against the residual, re-fit all selected coefficients by
nonnegative least squares, repeat until the atom budget, the residual
tolerance, or a nonpositive best correlation stops the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .errors import NumericalFailureError


@dataclass(frozen=True)
class OmpConfig:
    max_atoms: int
    residual_tol: float = 0.0
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.max_atoms < 1:
            raise ValueError("max_atoms must be >= 1")
        if self.residual_tol < 0:
            raise ValueError("residual_tol must be >= 0")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            object.__setattr__(self, "weights", w)


@dataclass
class OmpResult:
    coef: np.ndarray
    support: list[int] = field(default_factory=list)
    residual_norms: list[float] = field(default_factory=list)
    degenerate: bool = False


def nnls_on_support(phi_sub: np.ndarray, y: np.ndarray, kkt_tol: float = 1e-9) -> np.ndarray:
    """min ||y - phi_sub c||_2 with c >= 0 (active-set iteration).

    The KKT conditions of the returned point are verified: the gradient of
    the squared residual must vanish on the positive coordinates and be
    nonnegative elsewhere, to ``kkt_tol`` relative scale.
    """
    phi_sub = np.asarray(phi_sub, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(phi_sub)):
        raise ValueError("phi_sub must be finite")
    try:
        coef, _ = scipy.optimize.nnls(phi_sub, y)
    except RuntimeError as exc:
        raise NumericalFailureError(f"nonnegative least squares failed: {exc}") from exc
    grad = phi_sub.T @ (phi_sub @ coef - y)
    scale = max(1.0, float(np.abs(phi_sub.T @ y).max(initial=0.0)))
    kkt = max(
        float(np.abs(grad[coef > 0]).max(initial=0.0)),
        float(np.maximum(-grad, 0.0).max(initial=0.0)),
    )
    if kkt > kkt_tol * scale:
        raise NumericalFailureError(f"NNLS KKT residual {kkt:.3e} above tolerance")
    return coef


def wnomp_solve(phi, y: np.ndarray, cfg: OmpConfig) -> OmpResult:
    """Greedy nonnegative sparse recovery; returns coefficients, the
    selection order, and per-iteration residual norms."""
    mat = np.asarray(getattr(phi, "phi", phi), dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = mat.shape
    if y.shape != (m,):
        raise ValueError(f"y must have shape ({m},)")
    weights = cfg.weights if cfg.weights is not None else np.ones(n)
    if weights.shape != (n,):
        raise ValueError(f"weights must have shape ({n},)")

    coef = np.zeros(n)
    result = OmpResult(coef)
    residual = y.copy()
    result.residual_norms.append(float(np.linalg.norm(residual)))
    if not np.any(mat):
        result.degenerate = True
        return result

    selected: list[int] = []
    fit = np.zeros(0)
    while len(selected) < cfg.max_atoms and result.residual_norms[-1] > cfg.residual_tol:
        corr = weights * (mat.T @ residual)
        if selected:
            corr[selected] = -np.inf
        best = int(np.argmax(corr))
        if corr[best] <= 0:
            break
        selected.append(best)
        fit = nnls_on_support(mat[:, selected], y)
        residual = y - mat[:, selected] @ fit
        result.residual_norms.append(float(np.linalg.norm(residual)))
    coef[selected] = fit
    result.support = selected
    return result


def stack_systems(mats, ys) -> tuple[np.ndarray, np.ndarray]:
    """Fuse multiple measurement rounds into one taller system."""
    stacked_phi = np.vstack([np.asarray(getattr(m, "phi", m), dtype=np.float64) for m in mats])
    stacked_y = np.concatenate([np.asarray(v, dtype=np.float64) for v in ys])
    return stacked_phi, stacked_y
