"""Command line entry point: ``posekit {gen,train,eval,refine,render}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluation import check_compatible, evaluate, ppn_detector
from .exceptions import ConfigurationError, DataError, DivergenceError, PosekitError
from .geometry import CameraIntrinsics, Pose
from .objects import load_obj
from .renderer import rasterize, read_ppm, write_ppm
from .scene import SceneConfig, config_from_pairs, read_config_file, read_dataset, write_dataset
from .training import TrainConfig, load_models, save_models, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SCENE_PREFIX = "scene."
ABLATIONS = ("none", "v1", "v2", "v3", "v4")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="posekit", description="Pose proposals with attention-based refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic dataset")
    g.add_argument("--config", required=True, help="key=value file; scene.* keys are used")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)

    t = sub.add_parser("train", help="train both networks jointly")
    t.add_argument("--config", required=True, help="key=value file; scene.* keys are ignored")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss log CSV (default: <out>.log.csv)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--iters", type=int, default=0)
    e.add_argument("--ablation", choices=ABLATIONS, default="none")
    e.add_argument("--report", help="write the JSON metric report here")
    e.add_argument("--records", help="write per-object JSON lines here")

    r = sub.add_parser("refine", help="refine one pose in one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--pose", required=True, help='JSON file {"quat", "t", "K"}')
    r.add_argument("--iters", type=int, default=4)
    r.add_argument("--gt", help="ground-truth pose JSON (needed for oracle flow and the ADD trace)")
    r.add_argument("--trace", help="write the per-iteration JSON lines here")

    d = sub.add_parser("render", help="render a model at a pose")
    d.add_argument("--model", required=True)
    d.add_argument("--pose", required=True, help='JSON file {"quat", "t", "K"}')
    d.add_argument("--out", required=True)
    return p


def _load_pose(path) -> tuple[Pose, CameraIntrinsics | None]:
    try:
        d = json.loads(Path(path).read_text())
        pose = Pose.from_dict(d)
        K = CameraIntrinsics.from_dict(d["K"]) if "K" in d else None
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read pose from {path}: {exc}") from exc
    return pose, K


def cmd_gen(args) -> int:
    if args.count < 0:
        raise ConfigurationError("--count must be >= 0")
    pairs = read_config_file(args.config)
    cfg = config_from_pairs(SceneConfig, {k: v for k, v in pairs.items() if k.startswith(SCENE_PREFIX)},
                            SCENE_PREFIX)
    write_dataset(cfg, args.out, args.count)
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = read_config_file(args.config)
    cfg = config_from_pairs(TrainConfig, pairs, ignore=(SCENE_PREFIX,))
    data = read_dataset(args.data)
    result = train(cfg, data)
    save_models(args.out, result.ppn, result.marn, data.models, cfg)
    log_path = args.log or f"{args.out}.log.csv"
    write_log(log_path, result)
    print(f"checkpoint {args.out}; {len(result.log)} steps logged to {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data = read_dataset(args.data)
    ppn, marn, meta = load_models(args.ckpt)
    check_compatible(meta, data, args.ablation)
    report, records = evaluate(data, ppn_detector(ppn, data.models), marn, args.iters)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    if args.records:
        Path(args.records).write_text("".join(r.to_json() + "\n" for r in records))
    print(report.to_table())
    return EXIT_OK


def cmd_refine(args) -> int:
    from .marn import refine

    _, marn, _ = load_models(args.ckpt)
    image = read_ppm(args.image)
    model = load_obj(args.model)
    pose, K = _load_pose(args.pose)
    if K is None:
        raise DataError("the pose file must carry intrinsics under \"K\"")
    gt = _load_pose(args.gt)[0] if args.gt else None
    if marn.cfg.flow_mode == "oracle" and gt is None:
        raise ConfigurationError("this refiner uses oracle flow; pass --gt")
    result = refine(pose, image, model, K, marn, args.iters, gt)
    if args.trace:
        Path(args.trace).write_text(result.trace_jsonl() + "\n")
    out = {**result.pose.to_dict(), "n_renders": result.n_renders, "stopped_early": result.stopped_early}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    model = load_obj(args.model)
    pose, K = _load_pose(args.pose)
    K = K or SceneConfig().intrinsics
    write_ppm(args.out, rasterize(model, pose, K).rgb)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "refine": cmd_refine, "render": cmd_render}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, PosekitError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
