"""Command-line interface.

Subcommands: synth, warp-fit, track, tryon, train-toy, metrics, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import agnostic, checks, flowtrack, geometry, objectives, pipeline, report, warpfit
from .bundle import BundleError, SequenceBundle
from .cft import CftError, read_tensor, write_tensor
from .config import ConfigError, default_config, load_config
from .flowtrack import TrackConfig
from .numcore import ContractError, EvaluationError, ShapeError, Tensor
from .synth import SceneError, SynthScene, noisy_flows, synth_scene

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (BundleError, CftError, ConfigError, SceneError, ShapeError,
                ContractError, agnostic.ConfigError, FileNotFoundError,
                OSError, KeyError)
_NUMERIC_ERRORS = (EvaluationError, objectives.OptimizationError,
                   warpfit.OptimizationError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise UsageError(message)


def _int_pair(text):
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated integers")
    return tuple(parts)


def build_parser() -> _Parser:
    # global flags are accepted both before and after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory")

    p = _Parser(prog="vtryon", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add_parser("synth", help="generate a synthetic scene bundle")
    s.add_argument("--velocity", type=_int_pair, default=(0, 0),
                   help="per-frame garment motion: vy,vx")
    s.add_argument("--noise-sigma", type=float, default=0.0,
                   help="flow noise (normalized units) stored as role 'flows'")
    s.add_argument("--occluder-frames", default="",
                   help="comma-separated frame indices with the occluder")

    w = add_parser("warp-fit", help="fit warps for a bundle")
    w.add_argument("bundle", help="bundle directory")

    t = add_parser("track", help="temporally smooth a flow sequence")
    t.add_argument("bundle", help="bundle directory with a 'flows' role")
    t.add_argument("--window", type=int, default=None)
    t.add_argument("--mu", type=float, default=None)
    t.add_argument("--epsilon", type=float, default=None)

    r = add_parser("tryon", help="run the full pipeline on a bundle")
    r.add_argument("bundle", help="bundle directory")

    tt = add_parser("train-toy", help="overfit the generator on a tiny scene")
    tt.add_argument("--steps", type=int, default=None)
    tt.add_argument("--lr", type=float, default=None)

    m = add_parser("metrics", help="compare a prediction to a reference")
    m.add_argument("pred", help="CFT file, (T, H, W, 3) frames")
    m.add_argument("target", help="CFT file, same shape")

    add_parser("gradcheck", help="finite-difference check every operation")
    return p


def _load_cfg(args):
    if args.config:
        return load_config(args.config)
    return default_config()


def _require_out(args):
    if not args.out:
        raise UsageError(f"{args.command} requires --out")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_synth(args, cfg) -> int:
    out = _require_out(args)
    scene_cfg = cfg["scene"]
    occ_frames = tuple(int(v) for v in args.occluder_frames.split(",") if v.strip())
    spec = SynthScene(
        seed=args.seed, T=scene_cfg["T"], H=scene_cfg["H"], W=scene_cfg["W"],
        velocity=args.velocity,
        occluder_center=(scene_cfg["H"] // 2, scene_cfg["W"] // 2)
        if occ_frames else None,
        occluder_frames=occ_frames,
    )
    bundle = synth_scene(spec)
    if args.noise_sigma > 0:
        bundle.tensors["flows"] = noisy_flows(bundle, args.noise_sigma, args.seed)
    bundle.save(out)
    print(f"wrote bundle to {out}")
    return EXIT_OK


def cmd_warp_fit(args, cfg) -> int:
    out = _require_out(args)
    bundle = SequenceBundle.load(args.bundle)
    fit = pipeline.run_warp_fit(bundle, cfg)
    write_tensor(os.path.join(out, "masked_clothes.cft"), fit.masked_clothes)
    write_tensor(os.path.join(out, "flows_raw.cft"),
                 np.stack([f.coords.data for f in fit.flows]))
    print(f"fitted warps for {bundle.T} frames -> {out}")
    return EXIT_OK


def cmd_track(args, cfg) -> int:
    out = _require_out(args)
    bundle = SequenceBundle.load(args.bundle)
    t = cfg["track"]
    tc = TrackConfig(
        window_n=t["window_n"] if args.window is None else args.window,
        mu=t["mu"] if args.mu is None else args.mu,
        epsilon=t["epsilon"] if args.epsilon is None else args.epsilon,
    )
    flows_arr = bundle["flows"]
    flows = pipeline._flows_from_array(flows_arr)
    optical = pipeline._flows_from_array(bundle["optical_flows"])
    region = pipeline.garment_region(bundle)
    clothes_mask = (bundle["clothes_mask"] if "clothes_mask" in bundle
                    else np.any(bundle["clothes"] != 0, axis=-1).astype(float))
    omegas = pipeline.compute_omegas(bundle, flows, clothes_mask)
    tracked = flowtrack.track_sequence(flows, optical, omegas, tc)
    write_tensor(os.path.join(out, "flows_tracked.cft"),
                 pipeline._flows_to_array(tracked))

    clothes = bundle["clothes"]
    warp = lambda fl: [geometry.warp_by_flow(Tensor(clothes), f).data for f in fl]
    before = flowtrack.jitter_metric(warp(flows), optical, list(region))
    after = flowtrack.jitter_metric(warp(tracked), optical, list(region))
    report.write_csv(os.path.join(out, "jitter.csv"), ["measure", "value"],
                     [["before", f"{before:.8f}"], ["after", f"{after:.8f}"]])
    report.line_figure(os.path.join(out, "jitter.png"),
                       {"before": [before] * 2, "after": [after] * 2},
                       "", "jitter", "jitter before/after tracking")
    print(f"jitter before={before:.6f} after={after:.6f}")
    return EXIT_OK


def cmd_tryon(args, cfg) -> int:
    out = _require_out(args)
    bundle = SequenceBundle.load(args.bundle)
    results = pipeline.run_pipeline(bundle, cfg, outdir=out, seed=args.seed)
    print(f"mean ssim={np.mean(results['ssim']):.6f} "
          f"jitter before={results['jitter_before']:.6f} "
          f"after={results['jitter_after']:.6f}")
    return EXIT_OK


def cmd_train_toy(args, cfg) -> int:
    out = _require_out(args)
    steps = cfg["toy"]["train_steps"] if args.steps is None else args.steps
    spec = SynthScene(seed=args.seed, T=2, H=16, W=16,
                      garment_size=(8, 6), garment_pos=(4, 5), velocity=(0, 1))
    bundle = synth_scene(spec)
    result = pipeline.train_toy(bundle, cfg, steps=steps, lr=args.lr,
                                seed=args.seed, outdir=out)
    drop = 1.0 - result["final"] / result["initial"]
    print(f"loss {result['initial']:.6f} -> {result['final']:.6f} "
          f"({100 * drop:.1f}% reduction in {steps} steps)")
    return EXIT_OK


def _pooled_features(frames: np.ndarray, grid=4) -> np.ndarray:
    """Per-frame feature vectors: channel means over a grid of cells."""
    T, H, W, C = frames.shape
    hs, ws = H // grid, W // grid
    cells = frames[:, : hs * grid, : ws * grid]
    cells = cells.reshape(T, grid, hs, grid, ws, C).mean(axis=(2, 4))
    return cells.reshape(T, -1)


def cmd_metrics(args, cfg) -> int:
    out = _require_out(args)
    pred = read_tensor(args.pred)
    target = read_tensor(args.target)
    if pred.shape != target.shape or pred.ndim != 4:
        raise ShapeError(
            f"metrics needs matching (T, H, W, C) inputs, got "
            f"{pred.shape} vs {target.shape}"
        )
    ssims = [objectives.ssim(pred[t], target[t]) for t in range(pred.shape[0])]
    fd = float("nan")
    if pred.shape[0] >= 2:
        fd = objectives.frechet_distance(
            *objectives.gaussian_fit(_pooled_features(pred)),
            *objectives.gaussian_fit(_pooled_features(target)),
        )
    rows = [[t, f"{s:.6f}"] for t, s in enumerate(ssims)]
    rows.append(["frechet", f"{fd:.6f}"])
    report.write_csv(os.path.join(out, "metrics.csv"), ["frame", "value"], rows)
    report.line_figure(os.path.join(out, "ssim.png"), {"ssim": ssims},
                       "frame", "ssim", "per-frame SSIM")
    print(f"mean ssim={np.mean(ssims):.6f} frechet={fd:.6f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    worst = 0.0
    for name, fn in checks.ALL_CHECKS:
        err = fn()
        worst = max(worst, err)
        print(f"{name}: max rel err {err:.3e}")
    if worst > checks.TOLERANCE:
        print(f"FAIL: worst {worst:.3e} exceeds {checks.TOLERANCE:.0e}")
        return EXIT_NUMERIC
    print(f"OK: worst {worst:.3e}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "warp-fit": cmd_warp_fit,
    "track": cmd_track,
    "tryon": cmd_tryon,
    "train-toy": cmd_train_toy,
    "metrics": cmd_metrics,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("config", None), ("seed", 0), ("out", None)):
            if not hasattr(args, name):  # SUPPRESS default never fired
                setattr(args, name, default)
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        cfg = _load_cfg(args)
        return _COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.PipelineError as e:
        code = (EXIT_NUMERIC if isinstance(e.cause, _NUMERIC_ERRORS)
                else EXIT_DATA)
        print(f"error: {e}", file=sys.stderr)
        return code
    except _NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def run():  # console-script entry point
    raise SystemExit(main())


if __name__ == "__main__":
    run()
