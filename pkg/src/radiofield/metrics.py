"""Sub-task evaluation metrics and noise injection.

Sub-task 1 scores rotated beam-power predictions on explored grids,
sub-tasks 2 and 3 score base and rotated predictions on unexplored grids.
The dB error floors both arguments at ``EPS_RSRP`` so exactly blocked
grids compare as equal rather than div-by-zero. The noise model is
multiplicative log-normal in the dB domain: each nonzero entry is scaled
by ``10 ** (eps / 10)`` with ``eps ~ Normal(0, level_db^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .arrays import MeasurementMatrix

EPS_RSRP = 1e-12


@dataclass(frozen=True)
class NoiseConfig:
    level_db: float = 3.0
    targets: tuple[str, ...] = ("phi", "rsrp")
    seed: int = 0

    def __post_init__(self):
        if self.level_db < 0:
            raise ValueError("noise level must be nonnegative")
        unknown = set(self.targets) - {"phi", "rsrp"}
        if unknown:
            raise ValueError(f"unknown noise targets {sorted(unknown)}")


@dataclass(frozen=True)
class SubtaskResult:
    mae_db: float
    mse_aps: float


@dataclass(frozen=True)
class Metrics:
    """Per-sub-task results; None marks a sub-task a method cannot attempt."""

    subtask1: SubtaskResult | None
    subtask2: SubtaskResult | None
    subtask3: SubtaskResult | None

    def as_dict(self) -> dict:
        out = {}
        for name in ("subtask1", "subtask2", "subtask3"):
            r = getattr(self, name)
            out[name] = None if r is None else {"mae_db": r.mae_db, "mse_aps": r.mse_aps}
        return out


def mae_db(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean |10 log10 y - 10 log10 yhat|, per beam then per grid."""
    y_true = np.atleast_2d(np.asarray(y_true, dtype=np.float64))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=np.float64))
    if y_true.shape != y_pred.shape:
        raise ValueError("shape mismatch between targets and predictions")
    a = 10.0 * np.log10(np.maximum(y_true, EPS_RSRP))
    b = 10.0 * np.log10(np.maximum(y_pred, EPS_RSRP))
    return float(np.mean(np.abs(a - b), axis=1).mean())


def mse_aps(x_true: np.ndarray, x_pred: np.ndarray) -> float:
    """Mean squared spectrum error, averaged over angles then grids."""
    x_true = np.atleast_2d(np.asarray(x_true, dtype=np.float64))
    x_pred = np.atleast_2d(np.asarray(x_pred, dtype=np.float64))
    if x_true.shape != x_pred.shape:
        raise ValueError("shape mismatch between targets and predictions")
    return float(np.mean(np.sum((x_true - x_pred) ** 2, axis=1) / x_true.shape[1]))


def evaluate_subtasks(
    x_hat,
    dataset,
    phi: MeasurementMatrix | None = None,
    phi_rot: MeasurementMatrix | None = None,
    applicable=(1, 2, 3),
    rsrp=None,
    rsrp_rot=None,
) -> Metrics:
    """Score an estimated spectrum table against a dataset.

    ``x_hat`` maps grid id to an estimated APS (dict, or an (L, N) array).
    ``phi`` / ``phi_rot`` and the target tables default to the dataset's own;
    passing perturbed copies realizes the robustness protocol.
    """
    phi = phi or dataset.matrices["base"]
    phi_rot = phi_rot or dataset.matrices["rotated"]
    rsrp = dataset.rsrp if rsrp is None else rsrp
    rsrp_rot = dataset.rsrp_rot if rsrp_rot is None else rsrp_rot

    def gather(ids):
        missing = [int(i) for i in ids if not _has_grid(x_hat, int(i))]
        if missing:
            raise ValueError(f"missing spectrum estimates for grids {missing[:10]}")
        return np.stack([np.asarray(x_hat[int(i)], dtype=np.float64) for i in ids])

    results = {}
    specs = {
        1: (dataset.explored, phi_rot, rsrp_rot),
        2: (dataset.unexplored, phi, rsrp),
        3: (dataset.unexplored, phi_rot, rsrp_rot),
    }
    for task, (ids, matrix, table) in specs.items():
        if task not in applicable:
            results[task] = None
            continue
        x = gather(ids)
        y_pred = x @ matrix.phi.T
        y_true = table[ids]
        results[task] = SubtaskResult(
            mae_db(y_true, y_pred), mse_aps(dataset.aps[ids], x)
        )
    return Metrics(results[1], results[2], results[3])


def _has_grid(x_hat, i: int) -> bool:
    if isinstance(x_hat, dict):
        return i in x_hat
    return 0 <= i < len(x_hat)


# ---------------------------------------------------------------------------
# noise injection

def perturb_nonzero(values: np.ndarray, level_db: float, rng: np.random.Generator) -> np.ndarray:
    """Scale nonzero entries by 10**(eps/10), eps ~ N(0, level_db^2)."""
    out = np.array(values, dtype=np.float64, copy=True)
    nz = out != 0.0
    eps = rng.normal(0.0, level_db, size=int(nz.sum()))
    out[nz] = out[nz] * 10.0 ** (eps / 10.0)
    return out


def inject_noise(obj, cfg: NoiseConfig):
    """Perturbed copy of a MeasurementMatrix, an array, or a Dataset."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD0]))
    if isinstance(obj, MeasurementMatrix):
        return replace(obj, phi=perturb_nonzero(obj.phi, cfg.level_db, rng))
    if isinstance(obj, np.ndarray):
        return perturb_nonzero(obj, cfg.level_db, rng)
    # dataset-like: perturb the requested targets in a fixed order
    matrices = dict(obj.matrices)
    rsrp = obj.rsrp
    rsrp_rot = obj.rsrp_rot
    if "phi" in cfg.targets:
        matrices = {
            tag: replace(mm, phi=perturb_nonzero(mm.phi, cfg.level_db, rng))
            for tag, mm in sorted(matrices.items())
        }
    if "rsrp" in cfg.targets:
        rsrp = perturb_nonzero(rsrp, cfg.level_db, rng)
        rsrp_rot = perturb_nonzero(rsrp_rot, cfg.level_db, rng)
    return replace(obj, rsrp=rsrp, rsrp_rot=rsrp_rot, matrices=matrices)


# ---------------------------------------------------------------------------
# report assembly

SUBTASK_COLUMNS = ("subtask1", "subtask2", "subtask3")


def report_rows(method_metrics: dict[str, Metrics]) -> list[list[str]]:
    rows = [["method",
             "subtask1_mae_db", "subtask1_mse",
             "subtask2_mae_db", "subtask2_mse",
             "subtask3_mae_db", "subtask3_mse"]]
    for method in sorted(method_metrics):
        metrics = method_metrics[method]
        row = [method]
        for name in SUBTASK_COLUMNS:
            r = getattr(metrics, name)
            if r is None:
                row.extend(["--", "--"])
            else:
                row.extend([f"{r.mae_db:.4f}", f"{r.mse_aps:.6g}"])
        rows.append(row)
    return rows


def report_csv(method_metrics: dict[str, Metrics]) -> str:
    return "\n".join(",".join(row) for row in report_rows(method_metrics)) + "\n"


def report_text(method_metrics: dict[str, Metrics], header: str = "") -> str:
    rows = report_rows(method_metrics)
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = [header] if header else []
    for r in rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines) + "\n"
