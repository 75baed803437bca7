"""Command line interface.

Subcommands: single-frame, sequence, calibration, render-debug, make-scene.
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import costmap, harness, map_model, perception_sim, scenarios


def _add_common(sub):
    sub.add_argument("--config", required=True, help="scenario config file")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--ablate", default=None,
                     help="disable a pipeline part: uncertainty|cauchy|lights|borders "
                          "(comma-separated to combine)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monoloc",
        description="Monocular localization against sparse lane/traffic-light "
                    "maps, with synthetic perception experiments.")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("single-frame", "single-image relocalization experiment"),
                            ("sequence", "sliding-window sequence experiment"),
                            ("calibration", "self-calibration check of the simulator"),
                            ("render-debug", "render one frame and dump rasters")):
        sub = subs.add_parser(name, help=help_text)
        _add_common(sub)
        if name == "render-debug":
            sub.add_argument("--frame", type=int, default=0,
                             help="trajectory frame index to render")

    mk = subs.add_parser("make-scene", help="write a synthetic scene preset")
    mk.add_argument("--preset", required=True, choices=scenarios.PRESETS)
    mk.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_single_frame(args) -> int:
    cfg = harness.parse_config(args.config)
    _, summary = harness.run_single_frame_experiment(
        cfg, out_dir=args.out, ablate=args.ablate, seed=args.seed)
    print(f"success rate: {summary['sr']:.1f}%")
    for k in ("lat", "z", "yaw", "pitch", "roll"):
        print(f"mean |{k}| over successes: {summary[k]:.4f}")
    return 0


def _cmd_sequence(args) -> int:
    cfg = harness.parse_config(args.config)
    _, summary = harness.run_sequence_experiment(
        cfg, out_dir=args.out, ablate=args.ablate, seed=args.seed)
    cols = ("lon", "lat", "z", "yaw", "pitch", "roll")
    for stat in ("rmse", "mae"):
        row = "  ".join(f"{c}={v:.4f}" for c, v in zip(cols, summary[stat]))
        print(f"{stat}: {row}")
    return 0


def _cmd_calibration(args) -> int:
    cfg = harness.parse_config(args.config)
    ece_val, ence_val = harness.run_calibration_check(cfg, out_dir=args.out,
                                                      seed=args.seed)
    print(f"ece: {ece_val:.4f}")
    print(f"ence: {ence_val:.4f}")
    return 0


def _cmd_render_debug(args) -> int:
    cfg = harness.parse_config(args.config)
    semantic_map = map_model.load_map(cfg.map_path)
    _, poses = scenarios.load_trajectory(cfg.trajectory_path)
    if not 0 <= args.frame < len(poses):
        raise harness.ConfigError(f"frame {args.frame} outside trajectory")
    seed = cfg.seed if args.seed is None else args.seed
    noise = harness._frame_noise(cfg, np.uint64(seed))
    render = perception_sim.render_scene(semantic_map, poses[args.frame],
                                         cfg.cam, noise)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    probs = render.dirichlet.expected_prob()
    for c in range(render.dirichlet.num_classes):
        perception_sim.dump_pgm16(out / f"prob_class{c}.pgm", probs[..., c])
    perception_sim.dump_pgm16(out / "uncertainty.pgm",
                              render.dirichlet.uncertainty())
    cm = harness._build_cost_map(render, cfg, frozenset())
    if cm is not None:
        costmap.dump_cost_raster(out / "cost.f32", cm)
    print(f"rendered frame {args.frame}: {len(render.detections)} detection(s), "
          f"rasters written to {out}")
    return 0


def _cmd_make_scene(args) -> int:
    cfg_path = scenarios.write_preset(args.preset, args.out)
    print(f"wrote {cfg_path}")
    return 0


_COMMANDS = {
    "single-frame": _cmd_single_frame,
    "sequence": _cmd_sequence,
    "calibration": _cmd_calibration,
    "render-debug": _cmd_render_debug,
    "make-scene": _cmd_make_scene,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (harness.ConfigError, map_model.ParseError,
            map_model.InvariantViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:   # runtime failures map to exit code 3
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
