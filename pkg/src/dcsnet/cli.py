"""Command-line entry points.

Every run writes a reproducibility record (full config, seed, version) into
the output directory. Failures exit nonzero with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from . import data, geometry, gradcheck, pipeline, sampler
from .autodiff import Tensor


def _bool_flag(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcsnet",
                                     description="Leakage-free learned point-cloud sampling pipeline")
    parser.add_argument("--config", help="run configuration file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=0, help="master seed for all random streams")
    parser.add_argument("--out", default="runs/default", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic dataset")
    for name in ("stage1", "stage2", "stage3"):
        p = sub.add_parser(name, help=f"run training {name}")
        p.add_argument("--data", help="dataset directory (default: OUT/dataset)")
        p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    p = sub.add_parser("finetune", help="finetune the classifier from the stage-3 checkpoint")
    p.add_argument("--data", help="dataset directory (default: OUT/dataset)")
    p.add_argument("--stop-gradient", type=_bool_flag, default=True, metavar="true|false",
                   help="freeze the sampler during finetuning (default true)")
    p.add_argument("--from-scratch", action="store_true",
                   help="ignore the pretrained checkpoint (baseline)")
    p = sub.add_parser("fewshot", help="few-shot evaluation episodes")
    p.add_argument("--data", help="dataset directory (default: OUT/dataset)")
    p = sub.add_parser("compare", help="FPS / DCS / random center-set comparison")
    p.add_argument("--data", help="dataset directory (default: OUT/dataset)")
    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p = sub.add_parser("heatmap", help="export the composition probability map as CSV")
    p.add_argument("--cloud", help="cloud file to map (default: the canonical sphere samples)")
    p.add_argument("--ckpt-stage", type=int, default=3, choices=(2, 3),
                   help="which checkpoint provides the composition network")
    return parser


def _load_config(args) -> cfgmod.RunConfig:
    if args.config:
        return cfgmod.parse_config(args.config)
    return cfgmod.RunConfig()


def _load_clouds(args, cfg):
    dataset_dir = getattr(args, "data", None) or os.path.join(args.out, "dataset")
    return data.load_dataset(dataset_dir)


def _run(args) -> int:
    cfg = _load_config(args)
    out = args.out
    seed = args.seed

    if args.command == "gradcheck":
        return gradcheck.main()

    if args.command == "gen-data":
        specs = [data.ShapeSpec(fam, points=cfg.data.points, scale_jitter=cfg.data.scale_jitter)
                 for fam in cfg.data.family_list()]
        manifest = data.generate_dataset(specs, cfg.data.samples_per_class, seed,
                                         os.path.join(out, "dataset"))
        pipeline.write_run_record(out, "gen-data", cfg, seed, {"manifest": manifest})
        print(f"wrote {manifest}")
        return 0

    if args.command in ("stage1", "stage2", "stage3"):
        clouds = _load_clouds(args, cfg)
        runner = {"stage1": pipeline.run_stage1, "stage2": pipeline.run_stage2,
                  "stage3": pipeline.run_stage3}[args.command]
        path = runner(clouds, cfg, seed, out, resume=args.resume)
        pipeline.write_run_record(out, args.command, cfg, seed, {"checkpoint": path})
        print(f"wrote {path}")
        return 0

    if args.command == "finetune":
        clouds = _load_clouds(args, cfg)
        path, accuracy, report = pipeline.finetune(clouds, cfg, seed, out,
                                                   stop_gradient=args.stop_gradient,
                                                   from_scratch=args.from_scratch)
        pipeline.write_run_record(out, "finetune", cfg, seed, dict(report, checkpoint=path))
        print(f"held-out accuracy {accuracy:.4f} "
              f"(sampler {'unchanged' if not report['sampler_changed'] else 'updated'})")
        return 0

    if args.command == "fewshot":
        clouds = _load_clouds(args, cfg)
        mean, std, accs = pipeline.few_shot_eval(clouds, cfg, seed, out)
        pipeline.write_run_record(out, "fewshot", cfg, seed,
                                  {"mean": mean, "std": std, "episodes": accs})
        print(f"{cfg.fewshot.way}-way {cfg.fewshot.shot}-shot: {mean:.4f} +/- {std:.4f} "
              f"over {len(accs)} episodes")
        return 0

    if args.command == "compare":
        clouds = _load_clouds(args, cfg)
        rows = pipeline.baseline_compare(clouds, cfg, seed, out)
        pipeline.write_run_record(out, "compare", cfg, seed,
                                  {"report": os.path.join(out, "baseline_compare.csv")})
        for key in ("fps_cd", "dcs_cd", "random_cd"):
            print(f"mean {key}: {np.mean([r[key] for r in rows]):.6f}")
        return 0

    if args.command == "heatmap":
        models = pipeline.DCSModels(cfg, seed)
        ckpt_path = os.path.join(out, f"stage{args.ckpt_stage}.ckpt")
        pipeline.load_models(ckpt_path, models, expected_stage=args.ckpt_stage)
        models.eval()
        if args.cloud:
            cloud = data.read_cloud(args.cloud).normalize()
            points = cloud.points
        else:
            points = geometry.sphere_samples(cfg.data.points, method=cfg.sampler.sphere_method)
        probs = models.composition(Tensor(points)).data
        dest = os.path.join(out, "heatmap.csv")
        sampler.export_probability_map(dest, points, probs)
        pipeline.write_run_record(out, "heatmap", cfg, seed, {"heatmap": dest})
        print(f"wrote {dest}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"dcsnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
