"""Command-line pipeline: gen, train, eval, robustness, baseline, report.

Every subcommand writes its artifacts under a single output directory and
maintains a ``manifest.json`` mapping each artifact to its SHA-256. All
stages are seeded and deterministic: identical invocations produce
byte-identical artifacts. The environment variable ``RADIOFIELD_THREADS``
caps the BLAS thread pool (it must be set before Python starts numpy, so
it is applied here at import time).
"""

import os

if "RADIOFIELD_THREADS" in os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["RADIOFIELD_THREADS"])

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .arrays import (  # noqa: E402
    ArrayConfig,
    build_angular_grid,
    build_measurement_matrix,
    dft_codebook,
    rotate_measurement_matrix,
)
from .errors import GenerationError, TrainingDivergedError  # noqa: E402
from .evaluate import (  # noqa: E402
    model_metrics,
    render_all_spectra,
    wnomp_metrics,
    wnomp_spectra,
)
from .field import FieldArch, load_params, save_params  # noqa: E402
from .metrics import Metrics, NoiseConfig, SubtaskResult, report_csv, report_text  # noqa: E402
from .render import RenderOutput, render_output_to_bytes  # noqa: E402
from .scene import SceneConfig, build_dataset, generate_scene, load_dataset, save_dataset  # noqa: E402
from .training import (  # noqa: E402
    TrainConfig,
    TrainingSet,
    auto_rsrp_scale,
    fit,
    history_to_csv,
)

# Desk-scale profile: sized so one model trains in minutes on a laptop core.
DESK_ARCH = FieldArch(enc_order_pos=4, enc_order_density=4, width=48,
                      n_atten_layers=4, n_rad_layers=3, skip_layer=3, sh_degree=2)
DESK_TRAIN = dict(lambda1=1e-3, lambda2=0.03, learning_rate=3e-3, lr_final=5e-4,
                  batch_grids=2, steps=1200, n_sub_rays=0, train_knots=17,
                  head_scale=0.05, sigma_bias=-4.0)
DESK_EVAL_KNOTS = 33
DESK_BASELINE_ATOMS = 5


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GenerationError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radiofield",
        description="Radio radiance field pipeline over synthetic desk scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grids", type=int, default=500)
    p.add_argument("--boxes", type=int, default=6)
    p.add_argument("--extent", default="20,20,5")
    p.add_argument("--points-per-m2", type=float, default=40.0)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--n-tilt", type=int, default=18)
    p.add_argument("--n-azimuth", type=int, default=90)
    p.add_argument("--beams", type=int, default=8)
    p.add_argument("--depth-samples", type=int, default=256)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the field on a dataset")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda1", type=float, default=DESK_TRAIN["lambda1"])
    p.add_argument("--lambda2", type=float, default=DESK_TRAIN["lambda2"])
    p.add_argument("--sm", action="store_true",
                   help="radio-only ablation (depth supervision off)")
    p.add_argument("--steps", type=int, default=DESK_TRAIN["steps"])
    p.add_argument("--subset", type=int, default=DESK_TRAIN["n_sub_rays"],
                   help="rays per step (0 = all)")
    p.add_argument("--batch-grids", type=int, default=DESK_TRAIN["batch_grids"])
    p.add_argument("--train-knots", type=int, default=DESK_TRAIN["train_knots"])
    p.add_argument("--width", type=int, default=DESK_ARCH.width)
    p.add_argument("--enc-order", type=int, default=DESK_ARCH.enc_order_pos)
    p.add_argument("--learning-rate", type=float, default=DESK_TRAIN["learning_rate"])
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="accepted for symmetry; every run is deterministic")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="render spectra and score the sub-tasks")
    p.add_argument("--data", required=True)
    p.add_argument("--run", help="training run directory holding model.ckpt")
    p.add_argument("--checkpoint", help="explicit checkpoint path override")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-knots", type=int, default=DESK_EVAL_KNOTS)
    p.add_argument("--noise-db", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--method", default="multimodal")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="eval under dB-domain noise on phi and rsrp")
    p.add_argument("--data", required=True)
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-knots", type=int, default=DESK_EVAL_KNOTS)
    p.add_argument("--noise-db", type=float, default=3.0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--method", default="multimodal")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("baseline", help="sparse-recovery baseline on sub-task 1")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-atoms", type=int, default=DESK_BASELINE_ATOMS)
    p.add_argument("--noise-db", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="assemble a method comparison table")
    p.add_argument("--runs", required=True,
                   help="comma-separated eval/baseline output directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


# ---------------------------------------------------------------------------
# helpers

def _write_artifacts(out_dir: Path, files: dict[str, bytes]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        path = out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    manifest_path = out_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text()).get("files", {})
    for name in files:
        digest = hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
        manifest[name] = digest
    manifest_path.write_text(
        json.dumps({"files": dict(sorted(manifest.items()))}, indent=1, sort_keys=True)
        + "\n"
    )


def _metrics_doc(method: str, metrics: Metrics, extra: dict | None = None) -> bytes:
    doc = {"method": method, "metrics": metrics.as_dict()}
    if extra:
        doc.update(extra)
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()


def _metrics_from_doc(doc: dict) -> Metrics:
    vals = []
    for name in ("subtask1", "subtask2", "subtask3"):
        entry = doc["metrics"][name]
        vals.append(None if entry is None else SubtaskResult(entry["mae_db"], entry["mse_aps"]))
    return Metrics(*vals)


def _summary_line(method: str, metrics: Metrics) -> str:
    parts = [method]
    for i, name in enumerate(("subtask1", "subtask2", "subtask3"), start=1):
        r = getattr(metrics, name)
        parts.append(f"st{i} mae {r.mae_db:.4f} dB" if r else f"st{i} --")
    return " | ".join(parts)


def run_config_text(cfg: TrainConfig, extra: dict | None = None) -> str:
    doc = asdict(cfg)
    arch = doc.pop("arch")
    doc.update({f"arch.{k}": v for k, v in arch.items()})
    doc.update(extra or {})
    return "".join(f"{k}={doc[k]!r}\n" for k in sorted(doc))


def parse_run_config(text: str) -> tuple[TrainConfig, dict]:
    import ast

    values = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = ast.literal_eval(raw.strip())
    arch = FieldArch(**{k[5:]: v for k, v in values.items() if k.startswith("arch.")})
    known = {f for f in TrainConfig.__dataclass_fields__ if f != "arch"}
    cfg = TrainConfig(arch=arch, **{k: v for k, v in values.items() if k in known})
    extra = {k: v for k, v in values.items()
             if not k.startswith("arch.") and k not in known}
    return cfg, extra


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    extent = tuple(float(v) for v in args.extent.split(","))
    if len(extent) != 3:
        raise ValueError("--extent expects three comma-separated numbers")
    scene = generate_scene(SceneConfig(extent=extent, n_boxes=args.boxes,
                                       n_grids=args.grids, seed=args.seed,
                                       box_height=(0.8, 2.2)))
    angular = build_angular_grid(args.n_tilt, args.n_azimuth)
    acfg = ArrayConfig(4, 4)
    mm = build_measurement_matrix(acfg, angular, dft_codebook(acfg, args.beams))
    mm_rot = rotate_measurement_matrix(mm, angular, angular.tilt_step_deg,
                                       angular.azimuth_step_deg)
    dataset = build_dataset(scene, angular, mm, mm_rot, split_fraction=args.split,
                            seed=args.seed, points_per_m2=args.points_per_m2,
                            n_depth_samples=args.depth_samples)
    out = Path(args.out)
    names = save_dataset(dataset, out)
    _write_artifacts(out, {})  # seed the manifest
    _write_artifacts(out, {name: (out / name).read_bytes() for name in names})
    print(f"gen: {dataset.scene.n_grids} grids, {dataset.cloud.size} points, "
          f"{len(dataset.explored)} explored -> {out}")
    return 0


def _train_config(args, train_set: TrainingSet) -> TrainConfig:
    arch = replace(DESK_ARCH, width=args.width, enc_order_pos=args.enc_order)
    base = dict(DESK_TRAIN)
    base.update(
        lambda1=args.lambda1, lambda2=args.lambda2, steps=args.steps,
        n_sub_rays=args.subset, batch_grids=args.batch_grids,
        train_knots=args.train_knots, learning_rate=args.learning_rate,
        seed=args.seed, sm_mode=args.sm, checkpoint_every=args.checkpoint_every,
    )
    return TrainConfig(arch=arch, rsrp_scale=auto_rsrp_scale(train_set), **base)


def cmd_train(args) -> int:
    if args.print_config:
        cfg = TrainConfig(arch=DESK_ARCH, **DESK_TRAIN)
        print(run_config_text(cfg, {"eval_knots": DESK_EVAL_KNOTS}), end="")
        return 0
    if not args.data or not args.out:
        raise ValueError("train requires --data and --out")
    dataset = load_dataset(args.data)
    train_set = TrainingSet.from_dataset(dataset)
    cfg = _train_config(args, train_set)
    out = Path(args.out)
    params, history = fit(train_set, cfg,
                          checkpoint_dir=out / "checkpoints" if cfg.checkpoint_every else None)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "model.ckpt", params)
    files = {
        "run_config.txt": run_config_text(cfg, {"eval_knots": DESK_EVAL_KNOTS}).encode(),
        "loss_history.csv": history_to_csv(history).encode(),
    }
    files["model.ckpt"] = (out / "model.ckpt").read_bytes()
    _write_artifacts(out, files)
    print(f"train: {cfg.steps} steps, final loss {history[-1].total:.6g} -> {out}")
    return 0


def _load_run(args):
    if args.checkpoint:
        ckpt_path = Path(args.checkpoint)
        run_dir = ckpt_path.parent
    elif args.run:
        run_dir = Path(args.run)
        ckpt_path = run_dir / "model.ckpt"
    else:
        raise ValueError("eval requires --run or --checkpoint")
    if not ckpt_path.exists():
        raise ValueError(f"checkpoint not found: {ckpt_path}")
    params, _ = load_params(ckpt_path)
    rsrp_scale = 1.0
    config_path = run_dir / "run_config.txt"
    if config_path.exists():
        cfg, _ = parse_run_config(config_path.read_text())
        rsrp_scale = cfg.rsrp_scale
    return params, rsrp_scale


def _eval_common(args, method: str) -> int:
    dataset = load_dataset(args.data)
    params, rsrp_scale = _load_run(args)
    x_hat, depths = render_all_spectra(params, dataset, n_knots=args.eval_knots,
                                       aps_scale=1.0 / rsrp_scale)
    noise = None
    if args.noise_db > 0:
        noise = NoiseConfig(level_db=args.noise_db, seed=args.noise_seed)
    metrics = model_metrics(x_hat, dataset, noise=noise)
    render_doc = RenderOutput(
        aps=x_hat[0], complex_gains=np.zeros(x_hat.shape[1], dtype=np.complex128),
        depths=depths,
    )
    files = {
        "metrics.json": _metrics_doc(method, metrics, {
            "noise_db": args.noise_db, "noise_seed": args.noise_seed,
            "eval_knots": args.eval_knots,
        }),
        "aps_estimate.bin": _array_bytes(x_hat),
        "depths.bin": render_output_to_bytes(render_doc),
    }
    _write_artifacts(Path(args.out), files)
    print("eval:", _summary_line(method, metrics),
          f"| noise {args.noise_db} dB -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    return _eval_common(args, args.method)


def cmd_robustness(args) -> int:
    if args.noise_db <= 0:
        raise ValueError("robustness requires --noise-db > 0")
    return _eval_common(args, args.method)


def cmd_baseline(args) -> int:
    dataset = load_dataset(args.data)
    noise = None
    if args.noise_db > 0:
        noise = NoiseConfig(level_db=args.noise_db, seed=args.noise_seed)
    metrics = wnomp_metrics(dataset, max_atoms=args.max_atoms, noise=noise)
    spectra = wnomp_spectra(dataset, max_atoms=args.max_atoms)
    lines = ["grid_id,angle_index,value"]
    for grid_id in sorted(spectra):
        coef = spectra[grid_id]
        for idx in np.nonzero(coef)[0]:
            lines.append(f"{grid_id},{idx},{coef[idx]!r}")
    files = {
        "metrics.json": _metrics_doc("wnomp", metrics, {
            "max_atoms": args.max_atoms, "noise_db": args.noise_db,
        }),
        "wnomp_aps.csv": ("\n".join(lines) + "\n").encode(),
    }
    _write_artifacts(Path(args.out), files)
    print("baseline:", _summary_line("wnomp", metrics), f"-> {args.out}")
    return 0


def cmd_report(args) -> int:
    methods = {}
    for run in args.runs.split(","):
        doc = json.loads((Path(run) / "metrics.json").read_text())
        methods[doc["method"]] = _metrics_from_doc(doc)
    header = "sub-task comparison (mae in dB; -- marks sub-tasks a method cannot attempt)"
    files = {
        "report.csv": report_csv(methods).encode(),
        "report.txt": report_text(methods, header=header).encode(),
    }
    _write_artifacts(Path(args.out), files)
    print(report_text(methods, header=header), end="")
    return 0


def _array_bytes(arr: np.ndarray) -> bytes:
    from . import container

    return container.array_to_bytes(arr)


if __name__ == "__main__":
    sys.exit(main())
