# tumor_forecast.py
"""Batch front-end: python tumor_forecast.py <subcommand> [flags]

Exit codes: 0 ok, 1 internal, 2 usage, 3 input-not-found, 4 format/config-mismatch,
5 manifest, 6 parameter/geometry/shape/contract, 7 numeric, 8 gradcheck-failed.
"""
import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

import tumor_shared as ts
from dataset import build_cohort, load_manifest
from drr import FrameRenderer, crop_box_for
from evaluation import (
    DEFAULT_N_TRAIN_GRID, error_decomposition, evaluate, read_report, run_strategy_comparison,
    summarize, paired_tests, table1, write_report,
)
from formats.checkpoint_file import load_checkpoint
from formats.dataset_file import read_dataset, write_dataset
from formats.pgm import write_pgm
from formats.reports import SUMMARY_COLUMNS, TABLE1_COLUMNS, TEST_COLUMNS, write_rows
from model import init_glorot
from phantom import sample_breathing, tumor_center
from train import gradient_audit, train

GRADCHECK_TOLERANCE = 1e-4


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise ts.UsageError(message)


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON file with `model` and `train` sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--n-drrs", type=int, default=None)
    common.add_argument("--epochs", type=int, default=None)
    common.add_argument("--toy", action="store_true", help="small model preset")

    parser = CliParser(prog="tumor_forecast", description="Tumor motion forecasting experiments")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=CliParser)

    p = sub.add_parser("gen-cohort", parents=[common])
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("render", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--session", choices=["T1", "T2"], default="T1")

    p = sub.add_parser("build-dataset", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--session", choices=["T1", "T2"], default="T1")
    p.add_argument("--kind", choices=["train", "test"], default="train")

    p = sub.add_parser("train", parents=[common])
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--horizon-steps", type=int, default=None)

    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-train", default=",".join(str(n) for n in DEFAULT_N_TRAIN_GRID))
    p.add_argument("--seeds", type=int, default=1, help="number of seeds starting at --seed")
    p.add_argument("--horizon-steps", type=int, default=None)

    sub.add_parser("gradcheck", parents=[common])

    p = sub.add_parser("report", parents=[common])
    p.add_argument("--input", required=True, help="detail.csv from a sweep")
    return parser


# --- Config resolution ---
def resolve_configs(args):
    base = ts.ModelConfig.toy() if args.toy else ts.ModelConfig.large()
    if args.config:
        model_cfg, train_cfg = ts.read_json_config(args.config, base)
    else:
        model_cfg, train_cfg = base.validate_shape(), ts.TrainConfig()
    update = {"seed": args.seed}
    if args.epochs is not None:
        update["epochs"] = args.epochs
        if train_cfg.warmup_epochs >= args.epochs:
            update["warmup_epochs"] = args.epochs // 10
    return model_cfg, train_cfg.model_copy(update=update).validate_schedule()


def _workers(args) -> int:
    return args.workers if args.workers is not None else ts.run_settings().workers


def _cohort(args):
    return build_cohort(load_manifest(args.manifest), workers=_workers(args))


def _phantom(cohort, args):
    if args.patient not in cohort.phantoms:
        raise ts.ManifestError(f"patient {args.patient!r} not in manifest")
    return cohort.phantoms[args.patient] if args.session == "T1" else cohort.t2_phantoms[args.patient]


def _require(path: str):
    if not os.path.exists(path):
        raise ts.InputNotFoundError(f"not found: {path}")


# --- Subcommands ---
def cmd_gen_cohort(args, run: ts.RunConfig) -> dict:
    cohort = _cohort(args)
    summary = []
    for pid in cohort.patient_ids:
        for session, ph in (("T1", cohort.phantoms[pid]), ("T2", cohort.t2_phantoms[pid])):
            frame = FrameRenderer(ph, crop_box_for(cohort.phantoms[pid])).render(0.0)
            write_pgm(frame, os.path.join(args.out, f"{pid}_{session}.pgm"))
            summary.append({"patient_id": pid, "session": session, "spec_hash": ph.spec_hash(),
                            "p_ref_mm": ph.p_ref.tolist(), "amplitudes_mm": ph.amplitudes.tolist(),
                            "gtv_ml": ph.gtv_volume_ml()})
    with open(os.path.join(args.out, "cohort.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    print(f"[COHORT] {len(cohort.patient_ids)} patients -> {args.out}")
    return {"patients": cohort.patient_ids}


def cmd_render(args, run) -> dict:
    cohort = _cohort(args)
    ph = _phantom(cohort, args)
    n = args.n_drrs or 25
    signal = sample_breathing(ph.breathing_params, n, ts.FRAME_RATE_HZ, args.seed)
    renderer = FrameRenderer(ph, crop_box_for(cohort.phantoms[args.patient]), ts.run_settings().render_mode)
    rows = []
    for j, d in enumerate(signal.samples):
        frame = renderer.render(d, timestamp_s=j / ts.FRAME_RATE_HZ)
        write_pgm(frame, os.path.join(args.out, f"frame_{j:04d}.pgm"))
        rows.append([j, f"{j / ts.FRAME_RATE_HZ:.9g}", f"{d:.9g}", *(f"{v:.9g}" for v in tumor_center(ph, d))])
    path = os.path.join(args.out, "positions.csv")
    if os.path.exists(path):
        os.remove(path)
    for row in rows:
        ts.append_csv_row(path, ["index", "time_s", "displacement_mm", "x_mm", "y_mm", "z_mm"], row)
    print(f"[RENDER] {n} frames of {args.patient}/{args.session} -> {args.out}")
    return {"frames": n}


def cmd_build_dataset(args, run) -> dict:
    cohort = _cohort(args)
    _phantom(cohort, args)
    if args.kind == "train":
        if args.session != "T1":
            raise ts.ParameterError("training sets are built from the planning session (T1)")
        ds = cohort.training_set(args.patient, args.n_drrs or 1000)
    else:
        ds = cohort.test_set(args.patient, args.session)
    path = write_dataset(ds, os.path.join(args.out, f"{args.patient}_{args.session}_{args.kind}.tmfd"))
    print(f"[DATASET] {len(ds)} samples -> {path}")
    return {"dataset": path, "samples": len(ds)}


def cmd_train(args, run) -> dict:
    _require(args.dataset)
    model_cfg, train_cfg = resolve_configs(args)
    ds = read_dataset(args.dataset)
    model = init_glorot(model_cfg, args.seed)
    _, history = train(model, ds, train_cfg, run_dir=args.out)
    print(f"[TRAIN] final loss {history[-1].mean_loss:.6f} -> {args.out}")
    return {"model": model_cfg.model_dump(), "train": train_cfg.model_dump(), "final_loss": history[-1].mean_loss}


def cmd_eval(args, run) -> dict:
    _require(args.checkpoint)
    _require(args.dataset)
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    report = evaluate(model, ds, seed=args.seed, horizon=args.horizon_steps)
    write_report([report.to_row()], args.out)
    print(f"[EVAL] {ds.patient_id}/{ds.session} ADE {report.ade_mean:.4f} ± {report.ade_sd:.4f} mm, "
          f"FDE {report.fde_mean:.4f} ± {report.fde_sd:.4f} mm")
    return {"ade_mean": report.ade_mean, "fde_mean": report.fde_mean}


def cmd_sweep(args, run) -> dict:
    model_cfg, train_cfg = resolve_configs(args)
    try:
        grid = [int(v) for v in args.n_train.split(",") if v.strip()]
    except ValueError:
        raise ts.UsageError(f"--n-train must be a comma list of integers, got {args.n_train!r}")
    seeds = list(range(args.seed, args.seed + args.seeds))
    cohort = _cohort(args)
    result = run_strategy_comparison(cohort, grid, seeds, model_cfg, train_cfg,
                                     workers=_workers(args), horizon=args.horizon_steps)
    write_report(result, args.out)
    if not result.missing:
        decomp = error_decomposition(result)
        write_rows(os.path.join(args.out, "decomposition.csv"),
                   ["strategy", "patient_id", "modeling_error_mm", "inter_fractional_error_mm"],
                   [vars(r) for r in decomp.rows])
    print(f"[SWEEP] {len(result.reports)} reports ({len(result.missing)} missing) -> {args.out}")
    return {"n_train_grid": grid, "seeds": seeds, "model": model_cfg.model_dump(),
            "train": train_cfg.model_dump()}


def cmd_gradcheck(args, run) -> dict:
    config = None
    if args.config:
        config, _ = ts.read_json_config(args.config, ts.ModelConfig.tiny())
    err = gradient_audit(config, args.seed)
    print(f"[GRADCHECK] max relative error {err:.3e}")
    if not err < GRADCHECK_TOLERANCE:
        raise ts.GradcheckFailedError(f"max relative error {err:.3e} >= {GRADCHECK_TOLERANCE:g}")
    return {"max_relative_error": err}


def cmd_report(args, run) -> dict:
    rows = read_report(args.input)
    write_rows(os.path.join(args.out, "summary.csv"), SUMMARY_COLUMNS, summarize(rows))
    write_rows(os.path.join(args.out, "table1.csv"), TABLE1_COLUMNS, table1(rows))
    write_rows(os.path.join(args.out, "tests.csv"), TEST_COLUMNS, paired_tests(rows))
    print(f"[REPORT] {len(rows)} detail rows -> {args.out}")
    return {"rows": len(rows)}


COMMANDS = {
    "gen-cohort": cmd_gen_cohort, "render": cmd_render, "build-dataset": cmd_build_dataset,
    "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    ts.use_settings()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.workers is not None and args.workers < 1:
            raise ts.UsageError("--workers must be >= 1")
        run = ts.RunConfig(subcommand=args.subcommand, seed=args.seed, out=args.out,
                           workers=_workers(args), args=vars(args))
        os.makedirs(args.out, exist_ok=True)
        extra = COMMANDS[args.subcommand](args, run)
        ts.write_provenance(args.out, run, argv, extra)
        return 0
    except ts.ForecastError as e:
        msg = " ".join(str(e).split())
        print(f"error: {e.category}: {msg}", file=sys.stderr)
        ts.log_error(f"{e.category}: {msg}")
        return e.exit_code
    except Exception as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: internal: {msg}", file=sys.stderr)
        ts.log_error(f"internal: {type(e).__name__}: {msg}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
