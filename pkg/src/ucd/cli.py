"""Command-line surface: run, report, gradcheck, gen-data."""

import argparse
import sys

from .config import parse_config_file
from .gradcheck import gradcheck
from .harness import compare_report, run_experiment
from .tasks import generate_shapes_dataset, save_dataset


def _cmd_run(args):
    config = parse_config_file(args.config)
    paths = run_experiment(config)
    print(f"metrics: {paths['metrics']}")
    print(f"summary: {paths['summary']}")
    return 0


def _cmd_report(args):
    print(compare_report(args.metrics, mean_steps=args.mean_steps))
    return 0


def _cmd_gradcheck(args):
    results = gradcheck(seed=args.seed, instances=args.instances)
    worst_name = max(results, key=results.get)
    for name, err in results.items():
        status = "ok" if err < 1e-5 else "FAIL"
        print(f"{name:<12} max_rel_err {err:.3e}  {status}")
    if results[worst_name] >= 1e-5:
        print(f"gradcheck failed: {worst_name} at {results[worst_name]:.3e}")
        return 1
    return 0


def _cmd_gen_data(args):
    images = generate_shapes_dataset(args.seed, args.n_images, args.height, args.width,
                                     args.n_classes, noise_std=args.noise_std)
    save_dataset(args.out, images)
    print(f"wrote {len(images)} images to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ucd",
                                     description="Incremental segmentation experiments "
                                                 "with contrastive distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.set_defaults(func=_cmd_run)

    p_report = sub.add_parser("report", help="tabulate metrics files side by side")
    p_report.add_argument("metrics", nargs="+")
    p_report.add_argument("--mean-steps", action="store_true",
                          help="average over steps instead of reporting the final step")
    p_report.set_defaults(func=_cmd_report)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--instances", type=int, default=20)
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--n-images", type=int, default=64)
    p_gen.add_argument("--height", type=int, default=16)
    p_gen.add_argument("--width", type=int, default=16)
    p_gen.add_argument("--n-classes", type=int, default=4)
    p_gen.add_argument("--noise-std", type=float, default=0.05)
    p_gen.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
