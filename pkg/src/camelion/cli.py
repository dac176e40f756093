"""Operator entry point.

Subcommands: phantom (generate a cohort), run (one arm on one subject),
eval (collect metrics CSVs), config (inspect defaults). Exit codes are
fixed for scripting: 0 success, 2 configuration error, 3 I/O error,
4 pipeline failure.

Every command is deterministic given the same config and seed, and echoes
the merged effective configuration into its output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metrics, tissues
from .errors import (
    ArgumentError,
    CamelionError,
    ConfigError,
    PersistenceError,
    PipelineError,
)
from .phantom import generate_cohort, load_manifest
from .pipeline import run, run_direct, run_nhm, save_loop_artifacts
from .volumes import AtlasPair, LabelVolume, ScalarVolume, read_mvf, write_mvf

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4

METHODS = ("direct", "nhm", "camelion")


def _add_config_args(parser):
    parser.add_argument("--config", metavar="FILE", help="config file of 'key = value' lines")
    parser.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        dest="set_pairs",
        help="override one config value (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="override the master seed")


def _merged_config(args) -> dict:
    cfg = cfgmod.load_config(args.config, args.set_pairs)
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg["seed"] = args.seed
    return cfg


def _echo_config(cfg: dict, out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective_config.txt").write_text(cfgmod.format_config(cfg))
    except OSError as exc:
        raise PersistenceError(f"cannot write config echo in {out_dir}: {exc}") from exc


def cmd_phantom(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    manifest = generate_cohort(
        cfgmod.phantom_params(cfg),
        cfg["phantom.n_atlas"],
        cfg["phantom.n_test"],
        cfgmod.protocol(cfg, "a"),
        cfgmod.protocol(cfg, "b"),
        out_dir,
    )
    print(out_dir / "manifest.json")
    print(f"{len(manifest['subjects'])} subjects "
          f"({cfg['phantom.n_atlas']} atlas, {cfg['phantom.n_test']} test)")
    return EXIT_OK


def _subject_entry(manifest: dict, subject_id: str) -> dict:
    for entry in manifest["subjects"]:
        if entry["id"] == subject_id:
            return entry
    raise ConfigError(f"subject {subject_id!r} not in manifest")


def _load_atlases(manifest: dict) -> list[AtlasPair]:
    root = Path(manifest["_dir"])
    pairs = []
    for entry in manifest["subjects"]:
        if entry["role"] != "atlas":
            continue
        image = read_mvf(root / entry["image_a"])
        labels = read_mvf(root / entry["labels"])
        if not isinstance(image, ScalarVolume) or not isinstance(labels, LabelVolume):
            raise ConfigError(f"atlas files for {entry['id']} have unexpected kinds")
        pairs.append(AtlasPair(image, labels))
    if not pairs:
        raise ConfigError("manifest contains no atlas subjects")
    return pairs


def cmd_run(args) -> int:
    cfg = _merged_config(args)
    manifest = load_manifest(args.manifest)
    entry = _subject_entry(manifest, args.subject)
    root = Path(manifest["_dir"])
    atlases = _load_atlases(manifest)
    input_image = read_mvf(root / entry["image_b"])
    if not isinstance(input_image, ScalarVolume):
        raise ConfigError(f"input image for {args.subject} is not a scalar volume")
    truth = read_mvf(root / entry["labels"])

    out_dir = Path(args.out) / args.subject / args.method
    _echo_config(cfg, out_dir)
    loop_cfg = cfgmod.loop_config(cfg)

    if args.method == "camelion":
        result = run(input_image, atlases, loop_cfg)
        save_loop_artifacts(result, out_dir, truth_labels=truth)
        write_mvf(result.final_labels, out_dir / "labels_final.mvf")
        status = "converged" if result.converged else "hit the iteration cap"
        print(f"{args.subject}: {result.iterations_run} iterations ({status})")
    elif args.method == "direct":
        labels = run_direct(input_image, atlases, loop_cfg)
        write_mvf(labels, out_dir / "labels_final.mvf")
        print(f"{args.subject}: direct segmentation written")
    else:
        labels = run_nhm(input_image, atlases, cfg["nhm.reference_atlas"], loop_cfg)
        write_mvf(labels, out_dir / "labels_final.mvf")
        print(f"{args.subject}: histogram-matched segmentation written")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _merged_config(args)
    manifest = load_manifest(args.manifest)
    root = Path(manifest["_dir"])
    runs_dir = Path(args.runs)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    loop_cfg = cfgmod.loop_config(cfg)

    atlases = _load_atlases(manifest)

    reports = []
    per_method_volumes: dict[str, dict[str, np.ndarray]] = {m: {} for m in METHODS}
    reference_volumes: dict[str, np.ndarray] = {}
    for entry in manifest["subjects"]:
        if entry["role"] != "test":
            continue
        sid = entry["id"]
        found_any = False
        truth = read_mvf(root / entry["labels"])
        image_a = read_mvf(root / entry["image_a"])
        # reference: the direct arm applied to the same-protocol image
        ref_labels = run_direct(image_a, atlases, loop_cfg)
        ref_vols = metrics.volumes(ref_labels)
        for method in METHODS:
            labels_path = runs_dir / sid / method / "labels_final.mvf"
            if not labels_path.exists():
                continue
            found_any = True
            labels = read_mvf(labels_path)
            dice_vec = np.array(
                [metrics.dice(labels, truth, k) for k in range(1, truth.num_classes + 1)]
            )
            vols = metrics.volumes(labels)
            reports.append(
                metrics.EvalReport(
                    subject_id=sid,
                    method=method,
                    dice_per_class=dice_vec,
                    volume_mm3=vols,
                    reference_volume_mm3=ref_vols,
                )
            )
            per_method_volumes[method][sid] = vols
        if found_any:
            reference_volumes[sid] = ref_vols

    if not reports:
        raise ConfigError(f"no completed runs found under {runs_dir}")

    metrics.write_report(reports, out_dir / "report.csv")
    print(out_dir / "report.csv")

    corr_rows = []
    for method in METHODS:
        subjects = sorted(per_method_volumes[method])
        if len(subjects) < 3:
            continue
        ref = np.array([reference_volumes[s] for s in subjects])
        got = np.array([per_method_volumes[method][s] for s in subjects])
        for k in tissues.DEFAULT_EVAL_CLASSES:
            r = metrics.pearson(got[:, k - 1], ref[:, k - 1])
            corr_rows.append((method, tissues.class_name(k), r, len(subjects)))
    if corr_rows:
        metrics.write_correlations(corr_rows, out_dir / "correlations.csv")
        print(out_dir / "correlations.csv")
    else:
        print("correlations omitted: fewer than 3 evaluated subjects per method")
    return EXIT_OK


def cmd_config(args) -> int:
    if args.print_defaults:
        sys.stdout.write(cfgmod.format_config(cfgmod.DEFAULTS))
        return EXIT_OK
    cfg = _merged_config(args)
    sys.stdout.write(cfgmod.format_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camelion",
        description="Contrast-adaptive tissue segmentation toolkit with a synthetic-phantom harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output cohort directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("run", help="run one segmentation arm on one subject")
    _add_config_args(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--subject", required=True, help="subject id from the manifest")
    p.add_argument("--manifest", required=True, help="cohort manifest path")
    p.add_argument("--out", required=True, help="runs output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate completed runs into CSV reports")
    _add_config_args(p)
    p.add_argument("--manifest", required=True, help="cohort manifest path")
    p.add_argument("--runs", required=True, help="runs directory (from 'camelion run')")
    p.add_argument("--out", required=True, help="evaluation output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("config", help="print configuration")
    _add_config_args(p)
    p.add_argument("--print-defaults", action="store_true", help="print built-in defaults")
    p.set_defaults(func=cmd_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"pipeline failure at {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except PersistenceError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CamelionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
